"""Per-modality encoders, multiplicative fusion and cross-entropy pre-training.

Weights are plain dictionaries of named numpy arrays so they can be
checkpointed, differentiated (via :class:`~unite.autodiff.Graph`) and updated
by :func:`~unite.optim.adam_step` without any object plumbing. Names:

``ehr.*``
    token table, transformer blocks and the output projection to ``h^d``.
``demo.*`` / ``loc.*``
    two-layer perceptrons producing ``h^s`` (demographics) and ``h^g``
    (location).
``fusion.*``
    Hadamard weights ``w_d``, ``w_s``, ``w_g`` and the projection of the
    concatenated vector down to the fused latent dimension.
``head.*``
    the linear two-logit classifier used only during pre-training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .data import PAD_ID, PatientBatch
from .optim import AdamConfig, AdamState, adam_step

logger = logging.getLogger(__name__)

MODALITIES = ("d", "s", "g")


@dataclass(frozen=True)
class TransformerConfig:
    n_blocks: int = 2
    n_heads: int = 8
    model_dim: int = 128
    feedforward_dim: int = 256
    max_len: int = 200
    out_dim: int = 128
    embed_init_scale: float = 0.02

    def __post_init__(self):
        if self.embed_init_scale < 0:
            raise ValueError("embed_init_scale must be non-negative")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be at least 1")
        if self.n_heads < 1 or self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        if min(self.feedforward_dim, self.max_len, self.out_dim) < 1:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class EmbeddingConfig:
    vocab_size: int
    demographics_dim: int
    location_dim: int
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    tabular_hidden: int = 16
    tabular_dim: int = 2
    fused_dim: int = 16
    use_demographics: bool = True
    use_location: bool = True

    @property
    def active(self) -> tuple[str, ...]:
        flags = {"d": True, "s": self.use_demographics, "g": self.use_location}
        return tuple(m for m in MODALITIES if flags[m])

    @property
    def concat_dim(self) -> int:
        dims = {"d": self.transformer.out_dim, "s": self.tabular_dim, "g": self.tabular_dim}
        return sum(dims[m] for m in self.active)


@dataclass
class FusionWeights:
    w_d: object
    w_s: object
    w_g: object


@dataclass
class Standardizer:
    """Column-wise affine scaling of the tabular inputs, fit on training rows."""

    demo_mean: np.ndarray
    demo_scale: np.ndarray
    loc_mean: np.ndarray
    loc_scale: np.ndarray

    @staticmethod
    def _stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # indicator columns (one-hot gender and zip buckets) are left as they are
        binary = np.all((x == 0) | (x == 1), axis=0)
        scale = x.std(axis=0)
        mean = np.where(binary, 0.0, x.mean(axis=0))
        return mean, np.where(binary | (scale <= 1e-12), 1.0, scale)

    @classmethod
    def fit(cls, batch: PatientBatch) -> "Standardizer":
        return cls(*cls._stats(batch.demographics), *cls._stats(batch.location))

    @classmethod
    def identity(cls, demographics_dim: int, location_dim: int) -> "Standardizer":
        return cls(np.zeros(demographics_dim), np.ones(demographics_dim), np.zeros(location_dim), np.ones(location_dim))

    def demographics(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.demo_mean) / self.demo_scale

    def location(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.loc_mean) / self.loc_scale


# -- initialisation ----------------------------------------------------------


def _dense(rng, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(scale=gain / np.sqrt(n_in), size=(n_in, n_out))


def init_params(config: EmbeddingConfig, seed) -> dict[str, np.ndarray]:
    """Random initial weights for every tower, fusion and the pre-training head.

    Towers excluded by an ablation flag are still initialised so that
    checkpoints keep a fixed layout; they simply never enter the graph.
    """
    rng = np.random.default_rng(seed)
    t = config.transformer
    d = t.model_dim
    p: dict[str, np.ndarray] = {"ehr.embed": rng.normal(scale=t.embed_init_scale, size=(config.vocab_size, d))}
    p["ehr.embed"][PAD_ID] = 0.0
    for b in range(t.n_blocks):
        pre = f"ehr.block{b}."
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + w] = _dense(rng, d, d)
        p[pre + "ff_w1"] = _dense(rng, d, t.feedforward_dim, np.sqrt(2.0))
        p[pre + "ff_b1"] = np.zeros(t.feedforward_dim)
        p[pre + "ff_w2"] = _dense(rng, t.feedforward_dim, d)
        p[pre + "ff_b2"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[pre + ln + "_gain"] = np.ones(d)
            p[pre + ln + "_bias"] = np.zeros(d)
    p["ehr.proj_w"] = _dense(rng, d, t.out_dim)
    p["ehr.proj_b"] = np.zeros(t.out_dim)
    for prefix, n_in in (("demo", config.demographics_dim), ("loc", config.location_dim)):
        p[f"{prefix}.w1"] = _dense(rng, n_in, config.tabular_hidden, np.sqrt(2.0))
        p[f"{prefix}.b1"] = np.zeros(config.tabular_hidden)
        p[f"{prefix}.w2"] = _dense(rng, config.tabular_hidden, config.tabular_dim)
        p[f"{prefix}.b2"] = np.zeros(config.tabular_dim)
    p["fusion.w_d"] = np.ones(t.out_dim)
    p["fusion.w_s"] = np.ones(config.tabular_dim)
    p["fusion.w_g"] = np.ones(config.tabular_dim)
    p["fusion.proj_w"] = _dense(rng, config.concat_dim, config.fused_dim)
    p["fusion.proj_b"] = np.zeros(config.fused_dim)
    p["head.w"] = _dense(rng, config.fused_dim, 2)
    p["head.b"] = np.zeros(2)
    return p


def embedding_names(config: EmbeddingConfig, params: Mapping[str, np.ndarray]) -> list[str]:
    """Names of the encoder and fusion weights that take part in the graph."""
    frozen = set()
    if not config.use_demographics:
        frozen |= {n for n in params if n.startswith("demo.")} | {"fusion.w_s"}
    if not config.use_location:
        frozen |= {n for n in params if n.startswith("loc.")} | {"fusion.w_g"}
    return [n for n in params if n.split(".")[0] in ("ehr", "demo", "loc", "fusion") and n not in frozen]


# -- encoders ----------------------------------------------------------------


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal encodings, ``sin`` on even and ``cos`` on odd channels."""
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe


def embed_ehr(params: Mapping[str, object], tokens, config: TransformerConfig, mask=None) -> Tensor:
    """Transformer encoding of padded token rows (``N x L``) to ``N x out_dim``.

    ``mask`` marks content positions; by default every non-pad token. Masked
    positions are excluded both as attention keys and from the mean pooling.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    N, L = tokens.shape
    if L != config.max_len:
        raise ShapeError("embed_ehr", f"expected sequences of length {config.max_len}, got {L}")
    mask = tokens != PAD_ID if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("no content tokens")
    d, h = config.model_dim, config.n_heads
    dh = d // h
    x = ad.take(params["ehr.embed"], tokens) + positional_encoding(L, d)
    key_mask = mask[:, None, None, :]
    for b in range(config.n_blocks):
        pre = f"ehr.block{b}."

        def heads(w):
            return ad.transpose(ad.reshape(ad.matmul(x, params[pre + w]), (N, L, h, dh)), (0, 2, 1, 3))

        att = ad.attention(heads("wq"), heads("wk"), heads("wv"), key_mask)
        att = ad.matmul(ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (N, L, d)), params[pre + "wo"])
        x = ad.layer_norm(x + att) * params[pre + "ln1_gain"] + params[pre + "ln1_bias"]
        ff = ad.relu(ad.matmul(x, params[pre + "ff_w1"]) + params[pre + "ff_b1"])
        ff = ad.matmul(ff, params[pre + "ff_w2"]) + params[pre + "ff_b2"]
        x = ad.layer_norm(x + ff) * params[pre + "ln2_gain"] + params[pre + "ln2_bias"]
    weights = (mask / counts[:, None])[:, :, None]
    pooled = (x * weights).sum(axis=1)
    return ad.matmul(pooled, params["ehr.proj_w"]) + params["ehr.proj_b"]


def embed_tabular(params: Mapping[str, object], x, prefix: str) -> Tensor:
    """Two fully connected layers with a ReLU in between."""
    x = ad.as_tensor(np.atleast_2d(x) if not isinstance(x, Tensor) else x)
    w1 = ad.as_tensor(params[f"{prefix}.w1"])
    if x.shape[-1] != w1.shape[0]:
        raise ShapeError("embed_tabular", f"input dimension {x.shape[-1]} does not match {prefix} layer ({w1.shape[0]})")
    hidden = ad.relu(ad.matmul(x, w1) + params[f"{prefix}.b1"])
    return ad.matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def fuse(h_d, h_s, h_g, weights: FusionWeights) -> Tensor:
    """Hadamard-weight each modality and concatenate in the order d, s, g.

    A modality passed as ``None`` is left out (ablation).
    """
    parts = []
    for name, h, w in (("d", h_d, weights.w_d), ("s", h_s, weights.w_s), ("g", h_g, weights.w_g)):
        if h is None:
            continue
        h, w = ad.as_tensor(h), ad.as_tensor(w)
        if h.shape[-1:] != w.shape:
            raise ShapeError("fuse", f"modality {name}: embedding {h.shape} vs weight {w.shape}")
        parts.append(h * w)
    if not parts:
        raise ValueError("at least one modality is required")
    return ad.concat(parts, axis=-1)


def latent(
    params: Mapping[str, object], batch: PatientBatch, config: EmbeddingConfig, standardizer: Standardizer | None = None
) -> Tensor:
    """Fused latent vectors ``V`` (``N x fused_dim``) for a batch of patients."""
    std = standardizer or Standardizer.identity(config.demographics_dim, config.location_dim)
    h_d = embed_ehr(params, batch.tokens, config.transformer)
    h_s = embed_tabular(params, std.demographics(batch.demographics), "demo") if config.use_demographics else None
    h_g = embed_tabular(params, std.location(batch.location), "loc") if config.use_location else None
    fused = fuse(h_d, h_s, h_g, FusionWeights(params["fusion.w_d"], params["fusion.w_s"], params["fusion.w_g"]))
    if fused.shape[-1] != config.concat_dim:
        raise ShapeError("fuse", f"fused dimension {fused.shape[-1]} != {config.concat_dim}")
    return ad.matmul(fused, params["fusion.proj_w"]) + params["fusion.proj_b"]


def head_logits(params: Mapping[str, object], V) -> Tensor:
    return ad.matmul(V, params["head.w"]) + params["head.b"]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    onehot = np.eye(2)[labels]
    return -(ad.log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / len(labels))


def _squared_norm(x) -> Tensor:
    x = ad.as_tensor(x)
    return (x * x).sum()


@dataclass(frozen=True)
class Penalty:
    """Squared-norm penalties (Gaussian priors) on the code table and on the tabular input layers."""

    embed_l2: float = 0.0
    tabular_l2: float = 0.0

    def __post_init__(self):
        if self.embed_l2 < 0 or self.tabular_l2 < 0:
            raise ValueError("penalty weights must be non-negative")

    def __call__(self, params, config: EmbeddingConfig) -> Tensor | None:
        terms = []
        if self.embed_l2:
            terms.append(_squared_norm(params["ehr.embed"]) * self.embed_l2)
        if self.tabular_l2:
            for prefix, active in (("demo", config.use_demographics), ("loc", config.use_location)):
                if active:
                    terms.append(_squared_norm(params[f"{prefix}.w1"]) * self.tabular_l2)
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total


def pretrain_loss(params, batch: PatientBatch, config: EmbeddingConfig, standardizer=None, penalty: Penalty = Penalty()) -> Tensor:
    loss = cross_entropy(head_logits(params, latent(params, batch, config, standardizer)), batch.labels)
    extra = penalty(params, config)
    return loss if extra is None else loss + extra


# -- pre-training ------------------------------------------------------------


def take_rows(batch: PatientBatch, idx) -> PatientBatch:
    idx = np.asarray(idx, dtype=int)
    return PatientBatch(
        [batch.patient_ids[i] for i in idx], batch.tokens[idx], batch.demographics[idx], batch.location[idx], batch.labels[idx]
    )


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    accuracy: float
    seconds: float


def predict_head(params, batch: PatientBatch, config: EmbeddingConfig, standardizer=None) -> np.ndarray:
    """Positive-class probability from the pre-training head."""
    logits = head_logits(params, latent(params, batch, config, standardizer)).data
    return 1.0 / (1.0 + np.exp(-np.clip(logits[:, 1] - logits[:, 0], -500, 500)))


def pretrain(
    params: Mapping[str, np.ndarray],
    batch: PatientBatch,
    config: EmbeddingConfig,
    epochs: int = 10,
    batch_size: int = 256,
    adam: AdamConfig = AdamConfig(),
    seed=0,
    standardizer: Standardizer | None = None,
    validation: PatientBatch | None = None,
    patience: int = 5,
    penalty: Penalty = Penalty(),
) -> PretrainResult:
    """Minimise the head's cross-entropy over the encoders with Adam.

    ``batch`` holds the full training set; minibatches are drawn by
    shuffling it each epoch with a generator seeded by ``seed``. When a
    ``validation`` batch is given, the weights with the lowest validation
    loss are returned and training stops after ``patience`` epochs without
    improvement. ``penalty`` is added to the training loss only, never to
    the validation loss.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    start = time.perf_counter()
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    names = embedding_names(config, params) + ["head.w", "head.b"]
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses = []
    n = len(batch)
    best_loss, best_params, stale = np.inf, params, 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            mb = take_rows(batch, order[lo : lo + batch_size])
            leaves = {k: (ad.parameter(v, k) if k in names else v) for k, v in params.items()}
            loss = pretrain_loss(leaves, mb, config, standardizer, penalty)
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"pre-training loss at epoch {epoch}", "forward")
            loss.backward()
            grads = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(params[k]) for k in names}
            params, state = adam_step(params, grads, state, adam)
            total += float(loss.data) * len(mb)
        losses.append(total / n)
        logger.info("pretrain epoch %d loss %.5f", epoch + 1, losses[-1])
        if validation is not None:
            val_loss = float(pretrain_loss(params, validation, config, standardizer).data)
            if val_loss < best_loss:
                best_loss, best_params, stale = val_loss, params, 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if validation is not None:
        params = best_params
    prob = predict_head(params, batch, config, standardizer)
    accuracy = float(np.mean((prob >= 0.5).astype(int) == batch.labels))
    return PretrainResult(params, losses, accuracy, time.perf_counter() - start)


def with_ablation(config: EmbeddingConfig, ablate: Sequence[str] = ()) -> EmbeddingConfig:
    ablate = set(ablate)
    unknown = ablate - {"demographics", "location"}
    if unknown:
        raise ValueError(f"unknown modality to ablate: {sorted(unknown)}")
    return replace(config, use_demographics="demographics" not in ablate, use_location="location" not in ablate)
