"""Speaker-verification backends: PCA, LDA, two-covariance PLDA, cosine, EER.

Trials pair a speaker-level representation (mean of that speaker's enroll
embeddings) with a single test utterance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

RIDGE = 1e-6


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _eigh_desc(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(_sym(a))
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def _group(labels) -> dict:
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return groups


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (out_dim, in_dim), orthonormal rows
    explained_variance: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(X, out_dim: int) -> PCAModel:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds input dim {d}")
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} rows, got {n}")
    mean = X.mean(axis=0)
    cov = (X - mean).T @ (X - mean) / max(n - 1, 1)
    vals, vecs = _eigh_desc(cov)
    rank = int(np.sum(vals > 1e-10 * max(vals[0], 1e-300)))
    if rank < out_dim:
        log.warning("data rank %d below requested PCA dim %d; padding with orthonormal directions", rank, out_dim)
    # eigh already returns an orthonormal basis, including the null space
    comps = vecs[:, :out_dim].T
    # fixed sign convention: largest-magnitude entry of each component positive
    signs = np.sign(comps[np.arange(out_dim), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1, signs)[:, None]
    return PCAModel(mean, comps, np.clip(vals[:out_dim], 0, None))


def pca_apply(model: PCAModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - model.mean) @ model.components.T


def pca_inverse(model: PCAModel, Y) -> np.ndarray:
    return np.asarray(Y, dtype=np.float64) @ model.components + model.mean


# ---------------------------------------------------------------------------
# LDA


@dataclass(frozen=True)
class LDAModel:
    mean: np.ndarray
    projection: np.ndarray  # (out_dim, in_dim)

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]


def _within_between(X: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    groups = _group(labels)
    if len(groups) < 2:
        raise ValueError("need at least two classes")
    small = [k for k, idx in groups.items() if len(idx) < 2]
    if small:
        raise ValueError(f"classes with fewer than two samples: {small[:5]}")
    mu = X.mean(axis=0)
    d = X.shape[1]
    within = np.zeros((d, d))
    means = []
    for idx in groups.values():
        xc = X[idx]
        m = xc.mean(axis=0)
        means.append(m)
        within += (xc - m).T @ (xc - m)
    within /= X.shape[0] - len(groups)
    means = np.array(means)
    return mu, _sym(within), means, groups


def _regularize(cov: np.ndarray, what: str) -> np.ndarray:
    vals = np.linalg.eigvalsh(cov)
    scale = max(float(np.abs(vals).max()), 1.0)
    if vals.min() <= 1e-10 * scale:
        log.warning("%s covariance is singular; adding ridge %.1e", what, RIDGE * scale)
        return cov + RIDGE * scale * np.eye(cov.shape[0])
    return cov


def lda_fit(X, labels, out_dim: int | None = None) -> LDAModel:
    """Whiten the within-class scatter, then take the top between-class directions."""
    X = np.asarray(X, dtype=np.float64)
    mu, within, means, groups = _within_between(X, labels)
    limit = min(X.shape[1], len(groups) - 1)
    out_dim = limit if not out_dim else out_dim
    if out_dim > limit:
        raise ValueError(f"LDA dim {out_dim} exceeds min(dim, classes - 1) = {limit}")
    within = _regularize(within, "within-class")
    wvals, wvecs = np.linalg.eigh(within)
    whiten = wvecs / np.sqrt(wvals)  # columns: W^{-1/2} basis
    counts = np.array([len(i) for i in groups.values()], dtype=np.float64)
    centered = (means - mu) @ whiten
    between = (centered * counts[:, None]).T @ centered / counts.sum()
    _, bvecs = _eigh_desc(between)
    proj = (whiten @ bvecs[:, :out_dim]).T
    return LDAModel(mu, proj)


def lda_apply(model: LDAModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - model.mean) @ model.projection.T


# ---------------------------------------------------------------------------
# PLDA (two-covariance)


@dataclass
class PLDAModel:
    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    _score_mats: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.mu.size

    def _mats(self):
        if self._score_mats is None:
            d = self.dim
            total = self.between_cov + self.within_cov
            same = np.block([[total, self.between_cov], [self.between_cov, total]])
            diff = np.block([[total, np.zeros((d, d))], [np.zeros((d, d)), total]])
            _, logdet_same = np.linalg.slogdet(same)
            _, logdet_diff = np.linalg.slogdet(diff)
            m = np.linalg.inv(same) - np.linalg.inv(diff)
            self._score_mats = (_sym(m), 0.5 * (logdet_same - logdet_diff))
        return self._score_mats


def plda_fit(X, labels, correct_bias: bool = True) -> PLDAModel:
    """Moment estimate of the two-covariance model.

    ``within_cov`` is the pooled within-class covariance; ``between_cov`` is
    the covariance of the class means minus the ``W / n`` contribution of
    averaging ``n`` samples, projected back onto the PSD cone.
    """
    X = np.asarray(X, dtype=np.float64)
    mu, within, means, groups = _within_between(X, labels)
    within = _regularize(within, "within-class")
    dm = means - means.mean(axis=0)
    between = dm.T @ dm / len(groups)
    if correct_bias:
        inv_n = np.mean([1.0 / len(i) for i in groups.values()])
        between = between - within * inv_n
    vals, vecs = np.linalg.eigh(_sym(between))
    between = _sym((vecs * np.clip(vals, 0, None)) @ vecs.T)
    return PLDAModel(mu, between, within)


def plda_score(model: PLDAModel, enroll, test) -> np.ndarray:
    """Same-speaker vs. different-speaker log-likelihood ratio.

    Accepts single vectors or row-aligned matrices of pairs.
    """
    e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - model.mu
    t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - model.mu
    if e.shape[1] != model.dim or t.shape[1] != model.dim:
        raise ValueError("score inputs do not match the PLDA dimension")
    m, half_logdet = model._mats()
    z = np.concatenate([e, t], axis=1)
    llr = -0.5 * np.einsum("ij,jk,ik->i", z, m, z) - half_logdet
    return llr if np.ndim(enroll) > 1 or np.ndim(test) > 1 else float(llr[0])


# ---------------------------------------------------------------------------
# cosine and speaker representations


def cosine_score(a, b) -> float | np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine score of a zero vector")
    out = np.sum(a * b, axis=-1) / (na * nb)
    return np.clip(out, -1.0, 1.0)


def speaker_representation(embeddings) -> np.ndarray:
    embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not embeddings:
        raise ValueError("speaker representation needs at least one enroll embedding")
    return np.mean(embeddings, axis=0)


# ---------------------------------------------------------------------------
# trials and EER


@dataclass(frozen=True)
class TrialSet:
    trials: tuple[tuple[str, str, bool], ...]
    seed: int = 0
    non_target_prop: float = 0.5

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def is_target(self) -> np.ndarray:
        return np.array([t[2] for t in self.trials], dtype=bool)

    def lines(self) -> list[str]:
        return [f"{e} {t} {'target' if tgt else 'nontarget'}" for e, t, tgt in self.trials]

    def subset(self, keep) -> "TrialSet":
        return TrialSet(tuple(t for t, k in zip(self.trials, keep) if k), self.seed, self.non_target_prop)


def make_trials(enroll_ids, test_utts: list[tuple[str, str]], non_target_prop: float = 0.5, seed: int = 0) -> TrialSet:
    """Build trials from enroll speaker ids and ``(test_utt_id, speaker)`` pairs.

    Every test utterance gets a target trial against its own speaker. Non-target
    trials pair randomly chosen test utterances with a uniformly random other
    speaker, sized so non-targets make up ``non_target_prop`` of all trials.
    """
    speakers = sorted(set(enroll_ids))
    if len(speakers) < 2:
        raise ValueError("need at least two enrolled speakers for non-target trials")
    if not 0 <= non_target_prop < 1:
        raise ValueError("non_target_prop must be in [0, 1)")
    missing = {s for _, s in test_utts} - set(speakers)
    if missing:
        raise ValueError(f"test speakers without enrollment: {sorted(missing)[:5]}")
    rng = np.random.default_rng(seed)
    trials = [(spk, uid, True) for uid, spk in test_utts]
    n = len(test_utts)
    n_non = int(round(n * non_target_prop / (1 - non_target_prop)))
    picks = rng.choice(n, size=n_non, replace=n_non > n)
    picks.sort(kind="stable")
    for i in picks:
        uid, spk = test_utts[i]
        j = rng.integers(len(speakers) - 1)
        others = [s for s in speakers if s != spk]
        trials.append((others[j], uid, False))
    return TrialSet(tuple(trials), seed, non_target_prop)


def _operating_points(scores: np.ndarray, is_target: np.ndarray):
    """FRR/FAR when accepting ``score >= t``, t over sorted unique scores then +inf."""
    n_t = int(is_target.sum())
    n_n = int((~is_target).sum())
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    tgt = is_target[order]
    uniq, first = np.unique(s, return_index=True)
    # counts strictly below each unique threshold
    tgt_below = np.concatenate([[0], np.cumsum(tgt)])[first]
    non_below = np.concatenate([[0], np.cumsum(~tgt)])[first]
    frr = np.append(tgt_below, n_t) / n_t
    far = np.append(n_n - non_below, 0) / n_n
    return frr, far


def interpolate_eer(frr: np.ndarray, far: np.ndarray) -> float:
    """Crossing point of FRR and FAR, linear between the bracketing operating points."""
    diff = frr - far
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0:
        return float(frr[j])
    lam = -diff[j - 1] / (diff[j] - diff[j - 1])
    return float(frr[j - 1] + lam * (frr[j] - frr[j - 1]))


def eer(scores, is_target) -> float:
    """Equal error rate in percent."""
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    if not is_target.any() or is_target.all():
        raise ValueError("EER needs at least one target and one non-target trial")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    frr, far = _operating_points(scores, is_target)
    return 100.0 * interpolate_eer(frr, far)


def operating_points_csv(scores, is_target) -> list[tuple[float, float, float]]:
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    frr, far = _operating_points(scores, is_target)
    thresholds = np.append(np.unique(scores), np.inf)
    return list(zip(thresholds.tolist(), frr.tolist(), far.tolist()))


def filter_trials_by_min_length(
    trials: TrialSet,
    test_durations: dict[str, float],
    enroll_durations: dict[str, list[float]],
    min_sec: float,
) -> TrialSet:
    """Keep trials whose test utterance and some enroll utterance last ``min_sec`` or more.

    Enroll representations must then be recomputed from the surviving enroll
    utterances (see :func:`speaker_reps`).
    """
    ok_spk = {s for s, durs in enroll_durations.items() if any(d >= min_sec for d in durs)}
    keep = [test_durations[t] >= min_sec and e in ok_spk for e, t, _ in trials.trials]
    out = trials.subset(keep)
    if not len(out):
        log.warning("no trials survive a %.2f s minimum length", min_sec)
    return out


# ---------------------------------------------------------------------------
# speaker subsets


@dataclass(frozen=True)
class SubsetAssignment:
    labels: dict[str, str]
    flagged: tuple[str, ...]  # utterances longer than max_sec, kept alone


def split_speaker_subsets(utterances, max_sec: float) -> SubsetAssignment:
    """Greedy contiguous grouping of each speaker's utterances into <= max_sec subsets."""
    labels: dict[str, str] = {}
    flagged = []
    state: dict[str, tuple[int, float]] = {}
    for u in utterances:
        idx, total = state.get(u.speaker, (-1, max_sec + 1.0))
        dur = u.duration_sec
        if idx < 0 or total + dur > max_sec + 1e-9:
            idx, total = idx + 1, 0.0
        total += dur
        if dur > max_sec + 1e-9:
            flagged.append(u.id)
            log.warning("utterance %s (%.2f s) exceeds the %.1f s subset limit; kept alone", u.id, dur, max_sec)
            state[u.speaker] = (idx, max_sec + 1.0)  # force a new subset next
        else:
            state[u.speaker] = (idx, total)
        labels[u.id] = f"{u.speaker}#{idx}"
    return SubsetAssignment(labels, tuple(flagged))


# ---------------------------------------------------------------------------
# end-to-end scoring


BACKENDS = ("cosine", "plda", "lda", "lda_plda")


@dataclass
class Backend:
    name: str
    mean: np.ndarray
    lda: LDAModel | None = None
    plda: PLDAModel | None = None

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return lda_apply(self.lda, X) if self.lda is not None else X - self.mean

    def score(self, enroll, test) -> np.ndarray:
        if self.plda is not None:
            return np.atleast_1d(plda_score(self.plda, enroll, test))
        return np.atleast_1d(cosine_score(enroll, test))


def fit_backend(name: str, X, labels, lda_dim: int | None = None) -> Backend:
    X = np.asarray(X, dtype=np.float64)
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    mean = X.mean(axis=0)
    lda = lda_fit(X, labels, lda_dim) if name in ("lda", "lda_plda") else None
    Xt = lda_apply(lda, X) if lda is not None else X - mean
    plda = plda_fit(Xt, labels) if name in ("plda", "lda_plda") else None
    return Backend(name, mean, lda, plda)


def speaker_reps(backend: Backend, enroll: dict[str, list[np.ndarray]]) -> dict[str, np.ndarray]:
    """Mean of each speaker's (backend-transformed) enroll embeddings."""
    return {s: speaker_representation(backend.transform(np.stack(v))) for s, v in enroll.items() if v}


def score_trials(backend: Backend, reps: dict[str, np.ndarray], test: dict[str, np.ndarray], trials: TrialSet) -> np.ndarray:
    if not len(trials):
        return np.zeros(0)
    ids = sorted(test)
    index = {u: i for i, u in enumerate(ids)}
    T = backend.transform(np.stack([test[u] for u in ids]))
    E = np.stack([reps[e] for e, _, _ in trials.trials])
    tv = T[[index[t] for _, t, _ in trials.trials]]
    return backend.score(E, tv)


@dataclass
class SpeakerEvalResult:
    kind: str
    task: str  # speaker | subset
    trials: TrialSet
    eer: dict[str, float]
    scores: dict[str, np.ndarray]
    by_length: dict[str, dict[float, float]]
    excluded: list[str] = field(default_factory=list)


def evaluate_speaker_recognition(
    corpus,
    kind: str,
    backends=BACKENDS,
    *,
    min_lengths=(0.0,),
    subset_max_sec: float = 0.0,
    lda_dim: int = 0,
    pca_dim: int = 0,
    non_target_prop: float = 0.5,
    seed: int | None = None,
    embeddings=None,
) -> SpeakerEvalResult:
    """Score a speaker-verification task on the merged dev+eval speakers.

    Backends are trained on the training split. With ``subset_max_sec`` set,
    both training and evaluation speakers are first split into contiguous
    subsets of at most that many seconds, and the subsets act as speakers.
    """
    from satforge.synth_data import split_enroll_test, utterance_level

    embs = embeddings if embeddings is not None else corpus.embeddings(kind)
    seed = corpus.config.seed if seed is None else seed
    train = corpus.split("train")
    pool = corpus.split("dev") + corpus.split("eval")
    if subset_max_sec:
        train_labels = split_speaker_subsets(train, subset_max_sec).labels
        pool_labels = split_speaker_subsets(pool, subset_max_sec).labels
    else:
        train_labels = {u.id: u.speaker for u in train}
        pool_labels = {u.id: u.speaker for u in pool}
    vec = {u.id: utterance_level(embs[u.id]).astype(np.float64) for u in train + pool}
    if pca_dim:
        pca = pca_fit(np.stack([vec[u.id] for u in train]), pca_dim)
        vec = {k: pca_apply(pca, v[None])[0] for k, v in vec.items()}
    split = split_enroll_test(pool, pool_labels)
    dur = {u.id: u.duration_sec for u in pool}
    enroll_ids: dict[str, list[str]] = {}
    for u in split.enroll:
        enroll_ids.setdefault(pool_labels[u.id], []).append(u.id)
    test_pairs = [(u.id, pool_labels[u.id]) for u in split.test]
    trials = make_trials(list(enroll_ids), test_pairs, non_target_prop, seed)
    test_vecs = {u.id: vec[u.id] for u in split.test}
    counts: dict[str, int] = {}
    for u in train:
        counts[train_labels[u.id]] = counts.get(train_labels[u.id], 0) + 1
    fit_utts = [u for u in train if counts[train_labels[u.id]] >= 2]
    X_train = np.stack([vec[u.id] for u in fit_utts])
    y_train = [train_labels[u.id] for u in fit_utts]

    results, scores, curves = {}, {}, {}
    for name in backends:
        limit = min(X_train.shape[1], len(set(y_train)) - 1)
        backend = fit_backend(name, X_train, y_train, min(lda_dim, limit) if lda_dim else None)
        reps = speaker_reps(backend, {s: [vec[i] for i in ids] for s, ids in enroll_ids.items()})
        s = score_trials(backend, reps, test_vecs, trials)
        scores[name] = s
        results[name] = eer(s, trials.is_target)
        curve = {}
        for m in min_lengths:
            if m <= 0:
                curve[float(m)] = results[name]
                continue
            kept = filter_trials_by_min_length(
                trials, {t: dur[t] for t in test_vecs}, {k: [dur[i] for i in ids] for k, ids in enroll_ids.items()}, m
            )
            tgt = kept.is_target
            if not len(kept) or tgt.all() or not tgt.any():
                continue
            long_enroll = {k: [vec[i] for i in ids if dur[i] >= m] for k, ids in enroll_ids.items()}
            reps_m = speaker_reps(backend, long_enroll)
            curve[float(m)] = eer(score_trials(backend, reps_m, test_vecs, kept), tgt)
        curves[name] = curve
    task = "subset" if subset_max_sec else "speaker"
    return SpeakerEvalResult(kind, task, trials, results, scores, curves, split.excluded)
