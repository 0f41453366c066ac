"""Predictive risk, epistemic uncertainty, filtering and covariance biclustering.

For a new patient with fused latent ``v`` and a draw ``u = m + sigma * e`` of
the inducing values, the latent function is Gaussian with mean
``a^T L^{-1} u`` and variance ``1 - |a|^2`` where ``L`` is the Cholesky
factor of ``K_ZZ`` and ``a = L^{-1} k_Z(v)``. Sampling ``f`` therefore only
needs the per-patient mean ``mu``, the coupling vector
``c = sigma * L^{-T} a`` and the residual variance:
``f = mu + c . e + sqrt(var) * e_f``.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .data import PatientBatch
from .kernel import add_jitter, find_jitter, kernel_matrix
from .model import UniteModel

F_CLIP = 30.0


@dataclass(frozen=True)
class PredictiveDistribution:
    patient_id: str
    mean: float
    variance: float
    n_samples: int

    @property
    def label(self) -> int:
        return int(self.mean >= 0.5)


@dataclass
class CovarianceExport:
    patient_ids: list[str]
    matrix: np.ndarray
    assignment: np.ndarray
    order: np.ndarray
    degenerate: bool
    eigenvalue: float

    @property
    def reordered(self) -> np.ndarray:
        return self.matrix[np.ix_(self.order, self.order)]


def _sigmoid(f: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(f, -F_CLIP, F_CLIP)))


def latent_factors(model: UniteModel, V: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(mu, C, var)`` such that ``f = mu + C @ e + sqrt(var) * e_f`` with ``e ~ N(0, I_M)``."""
    state = model.state
    ls = model.lengthscales
    K = kernel_matrix(state.Z, state.Z, ls)
    jitter, _ = find_jitter(K, model.gp.jitter)
    L = np.linalg.cholesky(add_jitter(K, jitter).values)
    A = solve_triangular(L, kernel_matrix(state.Z, V, ls), lower=True)  # M x N
    LtA = solve_triangular(L, A, lower=True, trans="T")  # K^{-1} k_Z(v), M x N
    mu = LtA.T @ state.mean()
    C = np.sqrt(state.sigma2) * LtA.T
    var = np.maximum(1.0 - np.sum(A * A, axis=0), 0.0)
    return mu, C, var


def predictive_moments(model: UniteModel, batch: PatientBatch, eps_u: np.ndarray, eps_f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``sigmoid(f)`` under shared noise (``eps_u``: ``B x M``, ``eps_f``: ``N x B``)."""
    model.require_gp()
    mu, C, var = latent_factors(model, model.latent(batch))
    f = mu[:, None] + C @ eps_u.T + np.sqrt(var)[:, None] * eps_f
    p = _sigmoid(f)
    return p.mean(axis=1), p.var(axis=1)


def patient_seed(seed: int, patient_id: str) -> np.random.SeedSequence:
    """Deterministic noise stream per patient, independent of batch composition."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(patient_id.encode("utf-8"))])


def sample_moments(p_samples: np.ndarray) -> tuple[float, float]:
    """Mean and (population) variance of a set of probability samples."""
    p = np.asarray(p_samples, dtype=float)
    return float(p.mean()), float(p.var())


def predict(model: UniteModel, batch: PatientBatch, B: int = 512, seed: int = 0) -> list[PredictiveDistribution]:
    """Monte-Carlo predictive risk and epistemic variance for each patient."""
    if B < 2:
        raise ValueError("B must be at least 2")
    model.require_gp()
    mu, C, var = latent_factors(model, model.latent(batch))
    out = []
    for i, pid in enumerate(batch.patient_ids):
        rng = np.random.default_rng(patient_seed(seed, pid))
        e_u = rng.standard_normal((B, C.shape[1]))
        e_f = rng.standard_normal(B)
        mean, variance = sample_moments(_sigmoid(mu[i] + e_u @ C[i] + np.sqrt(var[i]) * e_f))
        out.append(PredictiveDistribution(pid, mean, variance, B))
    return out


def uncertainty_filter(predictions: Sequence[PredictiveDistribution], remove_fraction: float) -> np.ndarray:
    """Indices retained after dropping the ``floor(q N)`` most uncertain patients.

    Ties in variance are broken by patient ID (ascending ID is removed first).
    The returned indices are sorted.
    """
    if not 0.0 <= remove_fraction < 1.0:
        raise ValueError("empty retained set" if remove_fraction >= 1.0 else "remove_fraction must be >= 0")
    n = len(predictions)
    n_remove = int(np.floor(remove_fraction * n + 1e-9))
    ranked = sorted(range(n), key=lambda i: (-predictions[i].variance, predictions[i].patient_id))
    return np.sort(np.array(ranked[n_remove:], dtype=int))


# -- covariance biclustering --------------------------------------------------


def spectral_bipartition(K: np.ndarray, tol: float = 1e-6) -> tuple[np.ndarray, bool, float]:
    """Two-way partition from the leading non-trivial eigenvector of ``D^{-1/2} K D^{-1/2}``.

    The trivial eigenvector ``D^{1/2} 1`` (eigenvalue one) is deflated
    explicitly, which also makes the split well defined when the top
    eigenvalue is repeated (exact block structure). Returns
    ``(assignment, degenerate, eigenvalue)``; the assignment puts the first
    row in cluster 0, and a degenerate matrix yields all zeros.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] < 2:
        raise ValueError("expected a square matrix with at least two rows")
    if (K < 0).any():
        raise ValueError("kernel entries must be non-negative")
    d = K.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    S = s[:, None] * K * s[None, :]
    u1 = np.sqrt(d) / np.linalg.norm(np.sqrt(d))
    R = S - np.outer(u1, u1)
    try:
        w, vecs = np.linalg.eigh(0.5 * (R + R.T))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigen-solver did not converge: {exc}") from exc
    lam, v = float(w[-1]), vecs[:, -1]
    if lam < tol:
        return np.zeros(K.shape[0], dtype=int), True, lam
    sign = 1.0 if v[0] >= 0 else -1.0
    return (v * sign < 0).astype(int), False, lam


def covariance_bicluster(model: UniteModel, batch: PatientBatch) -> CovarianceExport:
    """Kernel matrix over the patients' fused latents and its spectral 2-way split."""
    if len(batch) < 4:
        raise ValueError("need at least 4 patients")
    V = model.latent(batch)
    K = kernel_matrix(V, V, model.lengthscales)
    assignment, degenerate, lam = spectral_bipartition(K)
    order = np.argsort(assignment, kind="stable")
    return CovarianceExport(list(batch.patient_ids), K, assignment, order, degenerate, lam)


def cluster_agreement(assignment, labels) -> float:
    """Fraction of agreement under the better of the two label permutations."""
    a, y = np.asarray(assignment, dtype=int), np.asarray(labels, dtype=int)
    agree = float(np.mean(a == y))
    return max(agree, 1.0 - agree)


def balanced_sample(labels, n_sample: int, seed: int) -> np.ndarray:
    """``n_sample // 2`` random patients of each class, returned in sorted order."""
    labels = np.asarray(labels, dtype=int)
    half = n_sample // 2
    if n_sample < 4 or n_sample % 2:
        raise ValueError("n_sample must be an even number >= 4")
    rng = np.random.default_rng(seed)
    picks = []
    for c in (0, 1):
        idx = np.nonzero(labels == c)[0]
        if idx.size < half:
            raise ValueError(f"class {c} has only {idx.size} patients; {half} required")
        picks.append(rng.choice(idx, size=half, replace=False))
    return np.sort(np.concatenate(picks))


# -- export ------------------------------------------------------------------


def write_predictions(path, predictions: Sequence[PredictiveDistribution]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "risk_mean", "uncertainty", "label_pred"])
        for p in predictions:
            w.writerow([p.patient_id, repr(p.mean), repr(p.variance), p.label])


def read_predictions(path) -> list[PredictiveDistribution]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [PredictiveDistribution(r["patient_id"], float(r["risk_mean"]), float(r["uncertainty"]), 0) for r in rows]


def write_covariance(out_dir, export: CovarianceExport, labels=None) -> tuple[Path, Path]:
    """Write the cluster-ordered matrix as CSV and the ordering as a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [export.patient_ids[i] for i in export.order]
    matrix_path, meta_path = out / "covariance.csv", out / "covariance.json"
    with open(matrix_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *ids])
        for pid, row in zip(ids, export.reordered):
            w.writerow([pid, *(repr(float(x)) for x in row)])
    meta = {
        "order": ids,
        "assignment": {export.patient_ids[i]: int(export.assignment[i]) for i in range(len(ids))},
        "degenerate": export.degenerate,
        "eigenvalue": export.eigenvalue,
    }
    if labels is not None:
        meta["label_agreement"] = cluster_agreement(export.assignment, labels)
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return matrix_path, meta_path
