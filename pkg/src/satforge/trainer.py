"""Speaker-independent and speaker-adaptive training of frame classifiers.

Frame error rate (FER) stands in for WER throughout; no number produced
here is comparable to a decoded word error rate.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from satforge.conditioning import ConditioningSpec, attach
from satforge.config import ModelConfig, TrainingConfig
from satforge.nn_core import MLP, SGD, NumericError, cross_entropy_loss
from satforge.synth_data import Corpus, cmn, utterance_level

log = logging.getLogger(__name__)

TrainConfig = TrainingConfig
POLICIES = ("fine_tune_all", "freeze_main")
EVAL_BATCH = 4096


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class EmbeddingTransform:
    """Centering (and optional PCA) fitted on training-split embeddings."""

    mean: np.ndarray
    components: np.ndarray | None = None

    @classmethod
    def fit(cls, corpus: Corpus, kind: str, pca_dim: int = 0) -> "EmbeddingTransform":
        from satforge.backends import pca_fit

        embs = corpus.embeddings(kind)
        X = np.stack([utterance_level(embs[u.id]) for u in corpus.split("train")]).astype(np.float64)
        if pca_dim:
            model = pca_fit(X, pca_dim)
            return cls(model.mean, model.components)
        return cls(X.mean(axis=0))

    @property
    def dim(self) -> int:
        return self.mean.size if self.components is None else self.components.shape[0]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        out = np.asarray(v, dtype=np.float64) - self.mean
        if self.components is not None:
            out = out @ self.components.T
        return out.astype(np.float32)


@dataclass
class FrameSet:
    x: np.ndarray
    y: np.ndarray
    utt_ids: list[str]
    utt_bounds: np.ndarray  # (n_utts + 1,) frame offsets
    durations: np.ndarray
    e: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def with_embeddings(self, e: np.ndarray | None) -> "FrameSet":
        return FrameSet(self.x, self.y, self.utt_ids, self.utt_bounds, self.durations, e)


def frame_set(
    corpus: Corpus,
    split: str,
    use_cmn: bool = True,
    embedding_kind: str | None = None,
    transform: EmbeddingTransform | None = None,
) -> FrameSet:
    utts = corpus.split(split)
    if not utts:
        raise ValueError(f"split {split!r} is empty")
    frames = cmn(utts) if use_cmn else {u.id: u.frames for u in utts}
    x = np.concatenate([frames[u.id] for u in utts]).astype(np.float32)
    y = np.concatenate([u.labels for u in utts]).astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum([u.num_frames for u in utts])])
    durations = np.array([u.duration_sec for u in utts])
    e = None
    if embedding_kind is not None:
        embs = corpus.embeddings(embedding_kind)
        rows = []
        for u in utts:
            if u.id not in embs:
                raise KeyError(f"no {embedding_kind} embedding for {u.id}")
            emb = embs[u.id]
            v = emb.per_frame(u.num_frames)
            rows.append(transform(v) if transform is not None else np.asarray(v, dtype=np.float32))
        e = np.concatenate(rows).astype(np.float32)
    return FrameSet(x, y, [u.id for u in utts], bounds, durations, e)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    split: str
    fer_percent: float
    per_utterance: dict[str, tuple[int, int, float]]  # id -> (errors, frames, duration)
    fingerprint: str = ""
    by_length: dict[float, float] = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return sum(v[1] for v in self.per_utterance.values())


def predict_frames(model: MLP, data: FrameSet, batch_size: int = EVAL_BATCH) -> np.ndarray:
    conditioned = model.conditioner is not None
    if conditioned and data.e is None:
        raise ValueError("conditioned model needs embeddings for evaluation")
    if not conditioned and data.e is not None:
        raise ValueError("embeddings supplied to an unconditioned model")
    preds = np.empty(len(data), dtype=np.int64)
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        logits = model.predict(data.x[sl], None if data.e is None else data.e[sl])
        preds[sl] = logits.argmax(axis=1)
    return preds


def eval_fer(model: MLP, data: FrameSet, split: str = "", fingerprint: str = "", batch_size: int = EVAL_BATCH) -> EvalReport:
    """Percentage of misclassified frames, batch norm on running statistics."""
    wrong = predict_frames(model, data, batch_size) != data.y
    per_utt = {}
    for i, uid in enumerate(data.utt_ids):
        a, b = data.utt_bounds[i], data.utt_bounds[i + 1]
        per_utt[uid] = (int(wrong[a:b].sum()), int(b - a), float(data.durations[i]))
    fer = 100.0 * float(wrong.sum()) / len(data)
    return EvalReport(split, fer, per_utt, fingerprint)


def fer_by_min_length(report: EvalReport, thresholds) -> dict[float, float]:
    """FER over utterances at least ``threshold`` seconds long; empty buckets omitted."""
    curve = {}
    for thr in thresholds:
        kept = [v for v in report.per_utterance.values() if v[2] >= thr]
        if not kept:
            log.warning("no utterances of at least %.2f s; point omitted", thr)
            continue
        curve[float(thr)] = 100.0 * sum(v[0] for v in kept) / sum(v[1] for v in kept)
    return curve


def eval_fer_by_min_length(model: MLP, data: FrameSet, thresholds, split: str = "") -> dict[float, float]:
    return fer_by_min_length(eval_fer(model, data, split), thresholds)


# ---------------------------------------------------------------------------
# training


@dataclass
class ExperimentResult:
    name: str
    stage: str
    corpus_fingerprint: str
    config_fingerprint: str
    dev: EvalReport
    eval: EvalReport
    epochs_run: int = 0
    history: list[float] = field(default_factory=list)

    def rows(self, thresholds=(0.0,)) -> list[tuple[str, str, str, float, float]]:
        out = [(self.name, self.stage, "dev", 0.0, self.dev.fer_percent)]
        curve = fer_by_min_length(self.eval, thresholds)
        if 0.0 not in curve:
            curve = {0.0: self.eval.fer_percent, **curve}
        out += [(self.name, self.stage, "eval", thr, fer) for thr, fer in sorted(curve.items())]
        return out


def run_fingerprint(corpus_fp: str, *parts) -> str:
    text = corpus_fp + "|" + "|".join(repr(p) for p in parts)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _fit(
    model: MLP,
    train: FrameSet,
    dev: FrameSet,
    cfg: TrainingConfig,
    lr: float,
    epochs: int,
    skip: frozenset[str],
    row_masks: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> tuple[int, list[float]]:
    """Minibatch SGD with dev-FER model selection, lr halving and early stopping.

    The starting point is itself a candidate, so the returned model is never
    worse on dev than the model passed in.
    """
    params = model.params()
    opt = SGD(cfg.momentum)
    best_state = model.state_dict()
    best = eval_fer(model, dev).fer_percent
    history = [best]
    bad = 0
    n = len(train)
    epoch = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            try:
                cache = model.forward(train.x[idx], None if train.e is None else train.e[idx], training=True)
                loss, dlogits = cross_entropy_loss(cache.logits, train.y[idx])
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss")
                grads = model.backward(cache, dlogits, skip=skip)
                for name, mask in row_masks.items():
                    grads[name] = grads[name] * mask
                opt.step(params, grads, lr)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
        fer = eval_fer(model, dev).fer_percent
        history.append(fer)
        log.info("epoch %d lr %.4g dev FER %.2f", epoch, lr, fer)
        if fer < best:
            best, bad = fer, 0
            best_state = model.state_dict()
        else:
            bad += 1
            lr *= 0.5
            if bad >= cfg.patience:
                break
    model.load_state(best_state)
    return epoch, history


def build_model(model_cfg: ModelConfig, in_dim: int, num_classes: int, seed: int) -> MLP:
    return MLP.build(
        in_dim,
        [model_cfg.hidden_units] * model_cfg.hidden_layers,
        num_classes,
        activation=model_cfg.activation,
        batch_norm=model_cfg.batch_norm,
        seed=seed,
    )


def train_si(corpus: Corpus, model_cfg: ModelConfig | None = None, train_cfg: TrainingConfig | None = None, name: str | None = None):
    """Train the unconditioned baseline; returns ``(model, ExperimentResult)``."""
    model_cfg = model_cfg or ModelConfig()
    cfg = train_cfg or TrainingConfig()
    train = frame_set(corpus, "train", cfg.cmn)
    dev = frame_set(corpus, "dev", cfg.cmn)
    test = frame_set(corpus, "eval", cfg.cmn)
    model = build_model(model_cfg, corpus.config.feat_dim, corpus.config.num_classes, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    epochs, history = _fit(model, train, dev, cfg, cfg.lr, cfg.epochs_stage1, frozenset(), {}, rng)
    fp = run_fingerprint(corpus.fingerprint, model_cfg, cfg)
    name = name or ("si-cmn" if cfg.cmn else "si")
    result = ExperimentResult(
        name, "si", corpus.fingerprint, fp,
        eval_fer(model, dev, "dev", fp), eval_fer(model, test, "eval", fp), epochs, history,
    )
    return model, result


def trainable_names(model: MLP, policy: str) -> tuple[frozenset[str], dict[str, np.ndarray]]:
    """Parameters to skip and per-row gradient masks implementing ``policy``."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "fine_tune_all":
        return frozenset(), {}
    names = set(model.params())
    cond = {n for n in names if n.startswith("cond.")}
    masks = {}
    if model.conditioner is not None and model.conditioner.spec.mechanism == "concatenate":
        w = model.layers[0].weight
        mask = np.zeros((w.shape[0], 1), dtype=w.dtype)
        mask[w.shape[0] - model.conditioner.embed_dim :] = 1
        masks["layer0.W"] = mask
        cond.add("layer0.W")
    return frozenset(names - cond), masks


def check_compatible(spec: ConditioningSpec, model: MLP, embed_dim: int) -> None:
    sites = spec.sites(model.n_hidden)
    if spec.mechanism in ("control_vector", "control_variable", "constant_scale"):
        for s in sites:
            if model.site_dim(s) != embed_dim:
                raise ValueError(
                    f"{spec.mechanism} needs embedding dim {model.site_dim(s)} at site {s}, got {embed_dim}; "
                    "set [embeddings] pca_dim to match"
                )


def train_sat(
    si_model: MLP,
    corpus: Corpus,
    spec: ConditioningSpec,
    embedding_kind: str = "oracle_full",
    policy: str = "fine_tune_all",
    train_cfg: TrainingConfig | None = None,
    pca_dim: int = 0,
    name: str | None = None,
    epochs: int | None = None,
):
    """Second training stage: attach conditioning to a copy of the SI model and train.

    The SI weights are copied exactly and the conditioner starts near the
    identity. ``freeze_main`` updates only conditioning parameters and keeps
    the main network's batch-norm statistics fixed.
    """
    cfg = train_cfg or TrainingConfig()
    transform = EmbeddingTransform.fit(corpus, embedding_kind, pca_dim)
    check_compatible(spec, si_model, transform.dim)
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    train = frame_set(corpus, "train", cfg.cmn, embedding_kind, transform)
    dev = frame_set(corpus, "dev", cfg.cmn, embedding_kind, transform)
    test = frame_set(corpus, "eval", cfg.cmn, embedding_kind, transform)
    model = attach(si_model, spec, transform.dim, seed=cfg.seed + 7919)
    skip, masks = trainable_names(model, policy)
    if policy == "freeze_main":
        model.set_bn_mode("eval")
    rng = np.random.default_rng([cfg.seed, 2])
    n_epochs = cfg.epochs_stage2 if epochs is None else epochs
    ran, history = _fit(model, train, dev, cfg, cfg.lr_stage2, n_epochs, skip, masks, rng)
    model.set_bn_mode("train")
    fp = run_fingerprint(corpus.fingerprint, spec, embedding_kind, policy, cfg, pca_dim)
    name = name or f"sat:{spec.label}:{embedding_kind}:{policy}"
    result = ExperimentResult(
        name, "sat", corpus.fingerprint, fp,
        eval_fer(model, dev, "dev", fp), eval_fer(model, test, "eval", fp), ran, history,
    )
    return model, result


# ---------------------------------------------------------------------------
# comparison


def compare_experiments(results: list[ExperimentResult], baseline: str | None = None) -> list[dict]:
    """Rows sorted by eval FER with relative gain ``(B - A) / B`` over ``baseline``."""
    if not results:
        return []
    fps = {r.corpus_fingerprint for r in results}
    if len(fps) > 1:
        raise ValueError(f"results come from different corpora: {sorted(fps)}")
    base = None
    if baseline is not None:
        match = [r for r in results if r.name == baseline]
        if not match:
            raise KeyError(f"baseline {baseline!r} not among results")
        base = match[0].eval.fer_percent
    rows = []
    for r in sorted(results, key=lambda r: (r.eval.fer_percent, r.name)):
        gain = None if not base else (base - r.eval.fer_percent) / base
        rows.append({"experiment": r.name, "stage": r.stage, "dev_fer": r.dev.fer_percent, "eval_fer": r.eval.fer_percent, "rel_gain": gain})
    return rows
