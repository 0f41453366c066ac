"""Run configuration: one flat ``key = value`` file covering every stage.

Blank lines and ``#`` comments are ignored. Values are parsed according to
the field type; unknown keys and malformed values raise :class:`ConfigError`.
:meth:`RunConfig.to_text` renders the fully resolved configuration in the
same format, so any output directory can be reproduced from its own copy.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from .embeddings import EmbeddingConfig, TransformerConfig
from .model import GPConfig
from .train import TrainConfig

ABLATIONS = {
    "location": ("location",),
    "demographics": ("demographics",),
    "both": ("demographics", "location"),
    "location+demographics": ("demographics", "location"),
    "demographics+location": ("demographics", "location"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # paths and seed
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: str = ""
    seed: int = 0
    # synthetic cohort
    n_patients: int = 1562
    vocab_size: int = 500
    n_locations: int = 60
    positive_rate: float = 0.4
    noise_fraction: float = 0.1
    seq_len: int = 20
    risk_weight: float = 8.0
    location_weight: float = 20.0
    age_weight: float = 0.5
    # encoders
    code_embed_dim: int = 128
    max_len: int = 200
    n_blocks: int = 2
    n_heads: int = 8
    feedforward_dim: int = 256
    ehr_out_dim: int = 128
    embed_init_scale: float = 0.02
    tabular_hidden: int = 16
    tabular_embed_dim: int = 2
    fused_dim: int = 16
    use_demographics: bool = True
    use_location: bool = True
    # sparse GP
    n_inducing: int = 200
    free_mean: bool = False
    jitter: float = 1e-6
    # optimisation
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    smoothing: int = 3
    B_train: int = 8
    B_eval: int = 64
    pretrain_epochs: int = 10
    embed_l2: float = 0.04
    tabular_l2: float = 0.03
    # inference
    B_predict: int = 512
    filter_fractions: tuple[float, ...] = (0.0, 0.2, 0.5, 0.8)
    n_sample: int = 200

    def __post_init__(self):
        try:
            self.embedding(vocab_size=max(self.vocab_size, 1), demographics_dim=1, location_dim=1)
            self.gp()
            self.train()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError("positive_rate must lie in (0, 1)")
        if self.B_predict < 2:
            raise ConfigError("B_predict must be at least 2")
        if any(not 0.0 <= q < 1.0 for q in self.filter_fractions):
            raise ConfigError("filter_fractions must lie in [0, 1)")

    # -- views for the library -----------------------------------------------

    def embedding(self, vocab_size: int, demographics_dim: int, location_dim: int) -> EmbeddingConfig:
        transformer = TransformerConfig(
            self.n_blocks, self.n_heads, self.code_embed_dim, self.feedforward_dim, self.max_len, self.ehr_out_dim, self.embed_init_scale
        )
        return EmbeddingConfig(
            vocab_size,
            demographics_dim,
            location_dim,
            transformer,
            self.tabular_hidden,
            self.tabular_embed_dim,
            self.fused_dim,
            self.use_demographics,
            self.use_location,
        )

    def gp(self) -> GPConfig:
        return GPConfig(self.n_inducing, self.free_mean, self.jitter)

    def train(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            clip_norm=self.clip_norm,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            smoothing=self.smoothing,
            B_train=self.B_train,
            B_eval=self.B_eval,
            pretrain_epochs=self.pretrain_epochs,
            embed_l2=self.embed_l2,
            tabular_l2=self.tabular_l2,
            seed=self.seed,
        )

    def with_ablation(self, ablate: str | None) -> "RunConfig":
        if ablate is None:
            return self
        if ablate not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablate!r}; choose from {sorted(ABLATIONS)}")
        drop = ABLATIONS[ablate]
        return replace(self, use_demographics=self.use_demographics and "demographics" not in drop,
                       use_location=self.use_location and "location" not in drop)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind is bool or kind == "bool":
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if kind == "tuple[float, ...]":
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines on top of ``base`` (defaults when omitted)."""
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse(key, _TYPES[key], value)
    return replace(base or RunConfig(), **updates)


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    config = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = parse_config(text, config)
    if overrides:
        config = parse_config("\n".join(overrides), config)
    return config


__all__ = ["ABLATIONS", "ConfigError", "RunConfig", "load_config", "parse_config"]
