"""Synthetic frame-classification corpus with controllable speaker/channel/noise latents.

A frame with class ``k`` is ``prototype[k] * channel_scale + speaker_offset
+ noise_level * N(0, I)``. Labels follow a first-order Markov chain. Each
speaker's utterances are grouped into contiguous sessions: the log channel
scale is drawn per session and perturbed per utterance, so neighbouring
utterances share acoustic conditions.

Oracle embedding kinds mimic the usual extractor families:

``oracle_full``        speaker offset + channel + noise level, small jitter
``oracle_full_noisy``  same content, larger jitter
``oracle_speaker``     speaker offset only, jitter shrinking with duration
``oracle_frame``       causal running estimate of ``oracle_full``, one row per frame
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from satforge.conditioning import Embedding
from satforge.serialization import (
    format_float,
    load_tensors,
    read_table,
    save_tensors,
    write_bytes_atomic,
    write_table,
)

log = logging.getLogger(__name__)

EMBEDDING_KINDS = ("oracle_full", "oracle_speaker", "oracle_full_noisy", "oracle_frame")
_KIND_CODE = {k: i + 1 for i, k in enumerate(EMBEDDING_KINDS)}
SPLITS = ("train", "dev", "eval")


@dataclass(frozen=True)
class CorpusConfig:
    feat_dim: int = 20
    num_classes: int = 24
    num_speakers: int = 40
    dev_speakers: int = 8
    eval_speakers: int = 8
    speaker_overlap: bool = False
    utts_per_speaker: int = 30
    min_frames: int = 50
    max_frames: int = 400
    frame_period: float = 0.01
    p_stay: float = 0.9
    prototype_std: float = 0.5
    speaker_offset_std: float = 0.3
    channel_log_std: float = 0.8
    channel_utt_log_std: float = 0.05
    session_mean_utts: float = 1.0
    noise_min: float = 0.2
    noise_max: float = 0.6
    jitter_full: float = 0.05
    jitter_full_noisy: float = 0.3
    jitter_speaker: float = 0.05
    jitter_frame: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.feat_dim < 2:
            raise ValueError("need feat_dim >= 2")
        if self.utts_per_speaker < 1 or self.min_frames < 1 or self.max_frames < self.min_frames:
            raise ValueError("degenerate utterance sizing")
        if not self.speaker_overlap and self.dev_speakers + self.eval_speakers >= self.num_speakers:
            raise ValueError("no speakers left for training")
        if not 0.0 <= self.p_stay <= 1.0:
            raise ValueError("p_stay must be a probability")
        if min(self.speaker_offset_std, self.channel_log_std, self.channel_utt_log_std, self.noise_min) < 0:
            raise ValueError("attribute spreads must be non-negative")
        if self.noise_max < self.noise_min:
            raise ValueError("noise_max < noise_min")
        if self.session_mean_utts < 1:
            raise ValueError("session_mean_utts must be >= 1")

    def jitter(self, kind: str) -> float:
        return {
            "oracle_full": self.jitter_full,
            "oracle_full_noisy": self.jitter_full_noisy,
            "oracle_speaker": self.jitter_speaker,
            "oracle_frame": self.jitter_frame,
        }[kind]

    def fingerprint(self) -> str:
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(("satforge-corpus-v1;" + text).encode()).hexdigest()[:16]


@dataclass
class AttributeLatents:
    speaker_id: str
    speaker_offset: np.ndarray
    channel_scale: np.ndarray
    noise_level: float
    session: int = 0


@dataclass
class Utterance:
    id: str
    index: int
    frames: np.ndarray  # (T, feat_dim) float32
    labels: np.ndarray  # (T,) int
    latents: AttributeLatents
    split: str
    frame_period: float = 0.01

    @property
    def speaker(self) -> str:
        return self.latents.speaker_id

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_sec(self) -> float:
        return self.num_frames * self.frame_period


@dataclass
class Corpus:
    config: CorpusConfig
    prototypes: np.ndarray
    utterances: list[Utterance]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [u for u in self.utterances if u.split == name]

    @property
    def splits(self) -> dict[str, list[Utterance]]:
        return {s: self.split(s) for s in SPLITS}

    def speakers(self, split: str | None = None) -> list[str]:
        seen: dict[str, None] = {}
        for u in self.utterances if split is None else self.split(split):
            seen.setdefault(u.speaker, None)
        return list(seen)

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}

    def embeddings(self, kind: str) -> dict[str, Embedding]:
        """Oracle embeddings for every utterance, jitter seeded from the corpus seed."""
        if kind not in self._cache:
            self._cache[kind] = {
                u.id: oracle_embedding(u, kind, (self.config.seed, u.index), self.config.jitter(kind))
                for u in self.utterances
            }
        return self._cache[kind]


# ---------------------------------------------------------------------------
# generation


def _markov_labels(rng: np.random.Generator, n: int, k: int, p_stay: float) -> np.ndarray:
    labels = np.empty(n, dtype=np.int64)
    labels[0] = rng.integers(k)
    stay = rng.random(n) < p_stay
    jumps = rng.integers(1, k, size=n)
    for t in range(1, n):
        labels[t] = labels[t - 1] if stay[t] else (labels[t - 1] + jumps[t]) % k
    return labels


def _assign_split(cfg: CorpusConfig, spk: int, utt: int) -> str:
    if cfg.speaker_overlap:
        frac = utt / cfg.utts_per_speaker
        return "train" if frac < 0.7 else ("dev" if frac < 0.85 else "eval")
    n_train = cfg.num_speakers - cfg.dev_speakers - cfg.eval_speakers
    if spk < n_train:
        return "train"
    return "dev" if spk < n_train + cfg.dev_speakers else "eval"


def gen_corpus(config: CorpusConfig | None = None, seed: int | None = None) -> Corpus:
    """Generate a corpus; a pure function of ``(config, seed)``."""
    cfg = config or CorpusConfig()
    if seed is not None and seed != cfg.seed:
        cfg = CorpusConfig(**{**asdict(cfg), "seed": seed})
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    f = cfg.feat_dim
    prototypes = rng.normal(0.0, cfg.prototype_std, size=(cfg.num_classes, f))
    utterances: list[Utterance] = []
    for s in range(cfg.num_speakers):
        spk = f"spk{s:03d}"
        offset = rng.normal(0.0, cfg.speaker_offset_std, size=f)
        session = -1
        session_log = np.zeros(f)
        for j in range(cfg.utts_per_speaker):
            if j == 0 or rng.random() < 1.0 / cfg.session_mean_utts:
                session += 1
                session_log = rng.normal(0.0, cfg.channel_log_std, size=f)
            channel = np.exp(session_log + rng.normal(0.0, cfg.channel_utt_log_std, size=f))
            noise = float(rng.uniform(cfg.noise_min, cfg.noise_max))
            n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            labels = _markov_labels(rng, n, cfg.num_classes, cfg.p_stay)
            g = rng.standard_normal((n, f))
            frames = prototypes[labels] * channel + offset + noise * g
            lat = AttributeLatents(spk, offset.astype(np.float32), channel.astype(np.float32), noise, session)
            utterances.append(
                Utterance(
                    id=f"{spk}-u{j:03d}",
                    index=len(utterances),
                    frames=frames.astype(np.float32),
                    labels=labels,
                    latents=lat,
                    split=_assign_split(cfg, s, j),
                    frame_period=cfg.frame_period,
                )
            )
    return Corpus(cfg, prototypes.astype(np.float32), utterances)


# ---------------------------------------------------------------------------
# normalisation and oracle embeddings


def cmn(utterances: list[Utterance], frames: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Speaker-level mean normalisation.

    Each speaker's mean frame (over all of its utterances in ``utterances``)
    is subtracted from every frame of that speaker. ``frames`` overrides the
    stored frames, which makes repeated application straightforward.
    """
    src = {u.id: (u.frames if frames is None else frames[u.id]) for u in utterances}
    groups: dict[str, list[str]] = {}
    for u in utterances:
        groups.setdefault(u.speaker, []).append(u.id)
    out: dict[str, np.ndarray] = {}
    for ids in groups.values():
        stacked = np.concatenate([src[i] for i in ids], axis=0).astype(np.float64)
        mean = stacked.mean(axis=0)
        for i in ids:
            out[i] = (src[i] - mean).astype(np.float32)
    return out


def _full_vector(utt: Utterance) -> np.ndarray:
    lat = utt.latents
    return np.concatenate([lat.speaker_offset, lat.channel_scale, [lat.noise_level]]).astype(np.float64)


def _jitter_rng(kind: str, jitter_seed) -> np.random.Generator:
    seed = list(jitter_seed) if isinstance(jitter_seed, (tuple, list)) else [int(jitter_seed)]
    return np.random.default_rng([_KIND_CODE[kind], *seed])


def frame_observations(utt: Utterance, jitter_seed, jitter: float) -> np.ndarray:
    """Per-frame noisy views of the full attribute vector (online estimator input)."""
    clean = _full_vector(utt)
    rng = _jitter_rng("oracle_frame", jitter_seed)
    return clean + jitter * rng.standard_normal((utt.num_frames, clean.size))


def oracle_embedding(utt: Utterance, kind: str, jitter_seed=0, jitter: float | None = None) -> Embedding:
    if kind not in EMBEDDING_KINDS:
        raise ValueError(f"unknown embedding kind {kind!r}")
    if jitter is None:
        jitter = CorpusConfig().jitter(kind)
    if kind == "oracle_frame":
        obs = frame_observations(utt, jitter_seed, jitter)
        running = np.cumsum(obs, axis=0) / np.arange(1, obs.shape[0] + 1)[:, None]
        return Embedding(running.astype(np.float32), "frame", kind)
    rng = _jitter_rng(kind, jitter_seed)
    if kind == "oracle_speaker":
        base = utt.latents.speaker_offset.astype(np.float64)
        scale = jitter / np.sqrt(max(utt.duration_sec, 1e-9))  # shrinks with length, 1 s reference
    else:
        base = _full_vector(utt)
        scale = jitter
    vec = base + scale * rng.standard_normal(base.size)
    return Embedding(vec.astype(np.float32), "utterance", kind)


def utterance_level(emb: Embedding) -> np.ndarray:
    """Single vector summarising an embedding (last row of a frame-level track)."""
    return emb.vector[-1] if emb.level == "frame" else emb.vector


class EnrollTestSplit(NamedTuple):
    enroll: list[Utterance]
    test: list[Utterance]
    excluded: list[str]


def split_enroll_test(utterances: list[Utterance], label_of: dict[str, str] | None = None) -> EnrollTestSplit:
    """Alternate each speaker's utterances between enroll (even) and test (odd).

    ``label_of`` maps utterance id to a speaker label (e.g. a speaker subset);
    labels with a single utterance are excluded and reported.
    """
    groups: dict[str, list[Utterance]] = {}
    for u in utterances:
        groups.setdefault(label_of[u.id] if label_of else u.speaker, []).append(u)
    enroll, test, excluded = [], [], []
    for label, utts in groups.items():
        if len(utts) < 2:
            log.warning("label %s has a single utterance; excluded from enroll/test split", label)
            excluded.append(label)
            continue
        enroll.extend(utts[0::2])
        test.extend(utts[1::2])
    return EnrollTestSplit(enroll, test, excluded)


# ---------------------------------------------------------------------------
# persistence


def manifest_line(u: Utterance) -> str:
    lat = u.latents
    return (
        f"{u.id} {u.speaker} {format_float(u.duration_sec)} {u.split} "
        f"session={lat.session} noise={format_float(lat.noise_level)} "
        f"channel_mean={format_float(np.mean(lat.channel_scale))} "
        f"offset_norm={format_float(np.linalg.norm(lat.speaker_offset))}"
    )


def write_corpus(corpus: Corpus, out_dir, kinds=("oracle_full", "oracle_speaker", "oracle_full_noisy")) -> None:
    from satforge.config import dataclass_to_section

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(out / "manifest.txt", ("\n".join(manifest_line(u) for u in corpus.utterances) + "\n").encode())
    write_bytes_atomic(
        out / "corpus.ini",
        (dataclass_to_section("corpus", corpus.config) + f"\n# fingerprint {corpus.fingerprint}\n").encode(),
    )
    save_tensors(out / "prototypes.bin", {"prototypes": corpus.prototypes})
    for u in corpus.utterances:
        lat = u.latents
        save_tensors(
            out / "blobs" / f"{u.id}.bin",
            {
                "frames": u.frames,
                "labels": u.labels.astype(np.float32),
                "speaker_offset": lat.speaker_offset,
                "channel_scale": lat.channel_scale,
                "noise_level": np.array([lat.noise_level], dtype=np.float32),
                "session": np.array([lat.session], dtype=np.float32),
            },
        )
    for kind in kinds:
        embs = corpus.embeddings(kind)
        if kind == "oracle_frame":
            rows = {f"{uid}:{t}": row for uid, e in embs.items() for t, row in enumerate(e.vector)}
        else:
            rows = {uid: e.vector for uid, e in embs.items()}
        write_table(out / "embeddings" / f"{kind}.txt", rows)


def read_corpus(corpus_dir) -> Corpus:
    from satforge.config import section_to_dataclass

    root = Path(corpus_dir)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root} does not contain a corpus manifest")
    import configparser

    cp = configparser.ConfigParser(inline_comment_prefixes=None, comment_prefixes=("#",))
    cp.read_string((root / "corpus.ini").read_text())
    cfg = section_to_dataclass(CorpusConfig, dict(cp["corpus"]))
    protos = load_tensors(root / "prototypes.bin")["prototypes"]
    utterances = []
    for index, line in enumerate((root / "manifest.txt").read_text().splitlines()):
        uid, spk, _dur, split, *_ = line.split()
        t = load_tensors(root / "blobs" / f"{uid}.bin")
        lat = AttributeLatents(
            spk, t["speaker_offset"], t["channel_scale"], float(t["noise_level"][0]), int(t["session"][0])
        )
        utterances.append(
            Utterance(uid, index, t["frames"], t["labels"].astype(np.int64), lat, split, cfg.frame_period)
        )
    corpus = Corpus(cfg, protos, utterances)
    emb_dir = root / "embeddings"
    if emb_dir.exists():
        for path in sorted(emb_dir.glob("*.txt")):
            kind = path.stem
            if kind == "oracle_frame" or kind not in EMBEDDING_KINDS:
                continue
            table = read_table(path)
            corpus._cache[kind] = {uid: Embedding(v, "utterance", kind) for uid, v in table.items()}
    return corpus


def load_embedding_table(corpus_dir, kind: str) -> dict[str, Embedding]:
    path = Path(corpus_dir) / "embeddings" / f"{kind}.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing embedding table {path}")
    table = read_table(path)
    if kind != "oracle_frame":
        return {uid: Embedding(v, "utterance", kind) for uid, v in table.items()}
    rows: dict[str, list[np.ndarray]] = {}
    for key, v in table.items():
        uid, _ = key.rsplit(":", 1)
        rows.setdefault(uid, []).append(v)
    return {uid: Embedding(np.stack(v), "frame", kind) for uid, v in rows.items()}
