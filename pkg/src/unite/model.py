"""The full deep-kernel model: encoders, fusion and the sparse GP on top.

A :class:`UniteModel` is a bundle of configuration, a flat dictionary of
named parameter arrays and the tabular standardisation fitted on the training
split. GP parameters live next to the encoder weights under ``gp.*``:

``gp.Z``                 inducing locations (``M x D``)
``gp.alpha``             variational mean coefficients
``gp.log_sigma2``        log of the shared variational variance
``gp.log_lengthscales``  log ARD lengthscales (``D``)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .data import PatientBatch
from .embeddings import EmbeddingConfig, Standardizer, TransformerConfig, head_logits, init_params, latent
from .kernel import DEFAULT_JITTER, add_jitter, find_jitter, kernel_matrix
from .svgp import ElboEstimate, ElboTerms, VariationalState, elbo

FORMAT_VERSION = 1
GP_NAMES = ("gp.Z", "gp.alpha", "gp.log_sigma2", "gp.log_lengthscales")


class CheckpointError(ValueError):
    pass


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class GPConfig:
    n_inducing: int = 200
    free_mean: bool = False
    jitter: float = DEFAULT_JITTER
    init_sigma2: float = 0.1

    def __post_init__(self):
        if self.n_inducing < 1:
            raise ValueError("n_inducing must be at least 1")
        if self.init_sigma2 <= 0 or self.jitter < 0:
            raise ValueError("init_sigma2 must be positive and jitter non-negative")


@dataclass
class UniteModel:
    embedding: EmbeddingConfig
    gp: GPConfig
    params: dict[str, np.ndarray]
    standardizer: Standardizer
    gp_ready: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, embedding: EmbeddingConfig, gp: GPConfig, standardizer: Standardizer, seed) -> "UniteModel":
        params = init_params(embedding, seed)
        D, M = embedding.fused_dim, gp.n_inducing
        params["gp.Z"] = np.zeros((M, D))
        params["gp.alpha"] = np.zeros(M if gp.free_mean else D)
        params["gp.log_sigma2"] = np.array(np.log(gp.init_sigma2))
        params["gp.log_lengthscales"] = np.zeros(D)
        return cls(embedding, gp, params, standardizer)

    @property
    def state(self) -> VariationalState:
        p = self.params
        return VariationalState(p["gp.Z"], p["gp.alpha"], float(p["gp.log_sigma2"]), self.gp.free_mean)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.params["gp.log_lengthscales"])

    def latent(self, batch: PatientBatch, params: Mapping[str, object] | None = None) -> np.ndarray:
        return latent(params or self.params, batch, self.embedding, self.standardizer).data

    def head_probability(self, batch: PatientBatch) -> np.ndarray:
        """Positive-class probability of the pre-training head (the deterministic variant)."""
        logits = head_logits(self.params, self.latent(batch))
        return 1.0 / (1.0 + np.exp(-np.clip(logits.data[:, 1] - logits.data[:, 0], -500, 500)))

    def require_gp(self) -> None:
        if not self.gp_ready:
            raise UntrainedModelError("model has no fitted GP layer; train it first")

    # -- GP initialisation ---------------------------------------------------

    def init_gp(self, batch: PatientBatch, seed) -> None:
        """Place inducing points and the variational mean from pre-trained latents.

        ``Z`` comes from k-means on the latents of ``batch`` (a random subset
        when it has fewer rows than ``M``); lengthscales start at one;
        ``alpha`` solves a least squares fit of the head's logit margin at
        ``Z``; ``sigma2`` starts at ``M / tr(K_ZZ^{-1})``, the value that
        minimises the KL term for the initial kernel.
        """
        rng = np.random.default_rng(seed)
        V = self.latent(batch)
        M, D = self.gp.n_inducing, V.shape[1]
        if V.shape[0] <= M:
            Z = V[rng.choice(V.shape[0], size=M, replace=V.shape[0] < M)].copy()
            Z += 1e-3 * V.std(axis=0) * rng.standard_normal(Z.shape)
        else:
            Z, _ = kmeans2(V, V[rng.choice(V.shape[0], size=M, replace=False)], iter=20, minit="matrix")
        logits = head_logits(self.params, Z).data
        margin = logits[:, 1] - logits[:, 0]
        if self.gp.free_mean:
            alpha = margin
        else:
            alpha = np.linalg.lstsq(Z, margin, rcond=None)[0]
        self.params["gp.Z"] = np.asarray(Z, dtype=float)
        self.params["gp.alpha"] = alpha
        self.params["gp.log_lengthscales"] = np.zeros(D)
        K = kernel_matrix(self.params["gp.Z"], self.params["gp.Z"], np.ones(D))
        jitter, _ = find_jitter(K, self.gp.jitter)
        L = np.linalg.cholesky(add_jitter(K, jitter).values)
        trace_inv = float(np.sum(solve_triangular(L, np.eye(M), lower=True) ** 2))
        self.params["gp.log_sigma2"] = np.array(np.log(M / trace_inv))
        self.gp_ready = True

    # -- objective -----------------------------------------------------------

    def elbo_terms(self, params: Mapping[str, object], batch: PatientBatch, eps_u, eps_f, total_count: int) -> ElboTerms:
        V = latent(params, batch, self.embedding, self.standardizer)
        return elbo(
            V,
            batch.labels,
            params["gp.Z"],
            params["gp.alpha"],
            params["gp.log_sigma2"],
            params["gp.log_lengthscales"],
            eps_u,
            eps_f,
            total_count=total_count,
            jitter=self.gp.jitter,
            free_mean=self.gp.free_mean,
        )

    def elbo_batch(self, batch: PatientBatch, B: int, total_count: int | None = None, seed=0) -> ElboEstimate:
        """Numeric Monte-Carlo ELBO of a batch with fresh noise."""
        self.require_gp()
        if B < 1:
            raise ValueError("B must be at least 1")
        rng = np.random.default_rng(seed)
        eps_u = rng.standard_normal((B, self.gp.n_inducing))
        eps_f = rng.standard_normal((len(batch), B))
        terms = self.elbo_terms(self.params, batch, eps_u, eps_f, total_count or len(batch))
        value = float(terms.value.data)
        if not np.isfinite(value):
            raise ad.NonFiniteError("elbo", "forward")
        se = float(terms.per_sample.std(ddof=1) / np.sqrt(B)) if B > 1 else float("nan")
        return ElboEstimate(value, float(terms.likelihood.data), float(terms.kl.data), B, se)

    # -- checkpoints ---------------------------------------------------------

    def metadata(self) -> dict:
        emb = asdict(self.embedding)
        return {
            "format_version": FORMAT_VERSION,
            "embedding": emb,
            "gp": asdict(self.gp),
            "gp_ready": self.gp_ready,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        arrays = {f"param/{k}": np.asarray(v) for k, v in self.params.items()}
        for name in ("demo_mean", "demo_scale", "loc_mean", "loc_scale"):
            arrays[f"std/{name}"] = getattr(self.standardizer, name)
        arrays["metadata"] = np.array(json.dumps(self.metadata(), sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "UniteModel":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["metadata"]))
                params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
                std = Standardizer(*(z[f"std/{n}"].copy() for n in ("demo_mean", "demo_scale", "loc_mean", "loc_scale")))
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        emb = dict(meta["embedding"])
        emb["transformer"] = TransformerConfig(**emb["transformer"])
        model = cls(EmbeddingConfig(**emb), GPConfig(**meta["gp"]), params, std, bool(meta["gp_ready"]), meta.get("meta", {}))
        expected = set(UniteModel.create(model.embedding, model.gp, std, 0).params)
        if set(params) != expected:
            raise CheckpointError("checkpoint parameters do not match its configuration")
        return model
