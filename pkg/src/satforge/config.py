"""Experiment configuration: flat ``[section] key = value`` text.

Every field has a default, unknown sections or keys are rejected, and
``dumps(loads(text))`` is stable so the resolved config can be diffed and
re-run.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields

from satforge.synth_data import CorpusConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_layers: int = 4
    hidden_units: int = 64
    activation: str = "relu"
    batch_norm: bool = True


@dataclass(frozen=True)
class ConditioningConfig:
    mechanism: str = "control_layer"
    mode: str = "shift"
    site: str = "input"  # input | all_hidden | comma-separated site indices
    activation: str = "linear"
    shared_units: int = 100
    use_skip: bool = True
    constant: float = 0.1
    policy: str = "fine_tune_all"


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "oracle_full"
    pca_dim: int = 0  # 0 keeps the native dimension
    kinds_to_write: tuple[str, ...] = ("oracle_full", "oracle_speaker", "oracle_full_noisy")


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    cmn: bool = True
    lr: float = 0.1
    lr_stage2: float = 0.02
    momentum: float = 0.9
    batch_size: int = 256
    epochs_stage1: int = 12
    epochs_stage2: int = 12
    patience: int = 5


@dataclass(frozen=True)
class EvaluationConfig:
    min_lengths: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    backends: tuple[str, ...] = ("cosine", "plda", "lda", "lda_plda")
    non_target_prop: float = 0.5
    lda_dim: int = 0  # 0 picks min(dim, speakers - 1)
    spk_pca_dim: int = 0
    subset_max_sec: float = 0.0  # 0 disables speaker-subset relabelling


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


SECTIONS = [f.name for f in fields(ExperimentConfig)]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, tp, name: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            (inner, _ellipsis) = typing.get_args(tp)
            return tuple(_parse_value(part, inner, name) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r}") from exc
    raise ConfigError(f"{name}: unsupported field type {tp}")


def dataclass_to_section(name: str, obj) -> str:
    lines = [f"[{name}]"]
    for f in fields(obj):
        lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def section_to_dataclass(cls, values: dict[str, str], section: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section or cls.__name__}]: {', '.join(sorted(unknown))}")
    kwargs = {k: _parse_value(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    return cls(**kwargs)


def dumps(cfg: ExperimentConfig) -> str:
    return "\n".join(dataclass_to_section(s, getattr(cfg, s)) for s in SECTIONS)


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    hints = typing.get_type_hints(ExperimentConfig)
    parts = {s: section_to_dataclass(hints[s], dict(cp[s]), s) for s in cp.sections()}
    cfg = ExperimentConfig(**parts)
    cfg.corpus.validate()
    return cfg


def load(path) -> ExperimentConfig:
    from pathlib import Path

    return loads(Path(path).read_text())
