"""ARD squared-exponential kernel over fused latent vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NotPositiveDefiniteError, Tensor

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


class SingularKernelError(np.linalg.LinAlgError):
    pass


@dataclass
class KernelMatrix:
    values: np.ndarray
    jitter: float = 0.0


def rbf(v, w, lengthscales) -> float:
    """``exp(-0.5 * sum(((v - w) / l) ** 2))`` for a single pair."""
    v, w, l = (np.asarray(x, dtype=float).ravel() for x in (v, w, lengthscales))
    if not (v.size == w.size == l.size):
        raise ValueError(f"dimension mismatch: {v.size}, {w.size}, {l.size}")
    return float(np.exp(-0.5 * np.sum(((v - w) / l) ** 2)))


def ard_rbf(V, W, log_lengthscales) -> Tensor:
    """Differentiable cross-kernel between the rows of ``V`` and ``W``.

    Uses explicit pairwise differences so the diagonal of ``k(V, V)`` is
    exactly one and the matrix is exactly symmetric.
    """
    V, W, log_l = ad.as_tensor(V), ad.as_tensor(W), ad.as_tensor(log_lengthscales)
    if V.ndim != 2 or W.ndim != 2 or V.shape[1] != W.shape[1] or log_l.shape != (V.shape[1],):
        raise ad.ShapeError("ard_rbf", f"V {V.shape}, W {W.shape}, lengthscales {log_l.shape}")
    if V.shape[0] == 0 or W.shape[0] == 0:
        raise ValueError("kernel inputs must be non-empty")
    inv_l = ad.exp(-log_l)
    a = ad.reshape(V * inv_l, (V.shape[0], 1, V.shape[1]))
    b = ad.reshape(W * inv_l, (1, W.shape[0], W.shape[1]))
    sq = ad.square(a - b).sum(axis=-1)
    return ad.exp(sq * -0.5)


def kernel_matrix(V, W, lengthscales) -> np.ndarray:
    l = np.asarray(lengthscales, dtype=float)
    if (l <= 0).any():
        raise ValueError("lengthscales must be positive")
    return ard_rbf(np.asarray(V, dtype=float), np.asarray(W, dtype=float), np.log(l)).data


def add_jitter(K, jitter: float = DEFAULT_JITTER) -> KernelMatrix:
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got {K.shape}")
    return KernelMatrix(K + jitter * np.eye(K.shape[0]), jitter)


def find_jitter(K: np.ndarray, jitter: float = DEFAULT_JITTER, max_jitter: float = MAX_JITTER) -> tuple[float, int]:
    """Smallest jitter on the doubling ladder that makes ``K`` factorizable.

    Returns ``(jitter, n_doublings)``. A zero starting jitter is tried once
    and then replaced by :data:`DEFAULT_JITTER`.
    """
    K = np.asarray(K, dtype=float)
    eye = np.eye(K.shape[0])
    doublings = 0
    current = jitter
    while True:
        try:
            np.linalg.cholesky(0.5 * (K + K.T) + current * eye)
            return current, doublings
        except np.linalg.LinAlgError:
            pass
        if current <= 0:
            current = DEFAULT_JITTER
            continue
        current *= 2.0
        doublings += 1
        if current > max_jitter:
            raise SingularKernelError("irrecoverably singular kernel")


def jittered_cholesky(K: Tensor, jitter: float = DEFAULT_JITTER, max_jitter: float = MAX_JITTER) -> tuple[Tensor, float]:
    """Differentiable lower Cholesky factor of ``K + jitter * I`` with escalation."""
    K = ad.as_tensor(K)
    used, _ = find_jitter(K.data, jitter, max_jitter)
    try:
        return ad.cholesky(K + used * np.eye(K.shape[0])), used
    except NotPositiveDefiniteError as exc:
        raise SingularKernelError("irrecoverably singular kernel") from exc
