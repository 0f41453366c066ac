"""Reverse-mode automatic differentiation over dense float64 arrays.

Computations are recorded eagerly: every primitive returns a :class:`Tensor`
holding its forward value together with a closure that maps the output
adjoint to the adjoints of its operands. Calling :meth:`Tensor.backward` on a
scalar walks the recorded nodes in reverse topological order.

A :class:`Graph` packages a builder function with a named parameter registry
so a whole computation can be evaluated, differentiated, or checked against
finite differences as a pure function of ``(parameters, bindings)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import lapack
from scipy.linalg import solve_triangular as _solve_triangular

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "NotPositiveDefiniteError",
    "ContractError",
    "Tensor",
    "as_tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "log_sigmoid",
    "relu",
    "clamp_min",
    "softmax",
    "log_softmax",
    "layer_norm",
    "attention",
    "cholesky",
    "solve_triangular",
    "cholesky_solve",
    "diag",
    "tensor_sum",
    "tensor_mean",
    "Graph",
    "GradientReport",
    "evaluate",
    "gradient",
    "check_gradient",
]


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, node: str, detail: str):
        self.node = node
        super().__init__(f"shape mismatch in node '{node}': {detail}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, node: str, phase: str = "forward"):
        self.node = node
        self.phase = phase
        super().__init__(f"non-finite values produced by node '{node}' during {phase} pass")


class NotPositiveDefiniteError(AutodiffError, np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (failing pivot index {pivot})")


class ContractError(AutodiffError):
    pass


def _all_finite(a: np.ndarray) -> bool:
    # a finite sum implies finite entries; only scan when the cheap test fails
    s = a.sum()
    if np.isfinite(s):
        return True
    return bool(np.isfinite(a).all())


class Tensor:
    """A node in the recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError(name or "input")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "parameter" if requires_grad else "input"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate adjoints into every reachable leaf with ``requires_grad``."""
        if grad is None:
            if self.data.shape != ():
                raise ContractError(
                    f"backward() without an explicit seed needs a scalar output, got shape {self.data.shape}"
                )
            grad = np.ones(())
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not _all_finite(pg):
                    raise NonFiniteError(node.op, "backward")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, a, b, fn):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(op, f"{a.shape} vs {b.shape}") from exc
    return a, b, out


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b, out = _binary("add", a, b, np.add)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b, out = _binary("sub", a, b, np.subtract)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b, out = _binary("mul", a, b, np.multiply)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b, out = _binary("div", a, b, np.divide)

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    try:
        out2 = np.matmul(a2, b2)
    except ValueError as exc:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}") from exc
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"{a.shape} -> {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", ", ".join(str(t.shape) for t in ts)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, ts, backward, "concat")


def take(weight, indices) -> Tensor:
    """Row lookup ``weight[indices]`` (embedding table gather)."""
    weight = as_tensor(weight)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ShapeError("take", f"index out of range for table with {weight.shape[0]} rows")
    out = weight.data[idx]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, *weight.shape[1:]))
        return (gw,)

    return _node(out, (weight,), backward, "take")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _node(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def diag(a) -> Tensor:
    """Main diagonal of a square matrix."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("diag", f"expected a square matrix, got {a.shape}")
    return _node(np.diagonal(a.data).copy(), (a,), lambda g: (np.diag(g),), "diag")


# -- elementwise nonlinearities ---------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    """Square root; the adjoint at exactly zero is taken as zero."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(out > 0, 0.5 * g / np.where(out > 0, out, 1.0), 0.0)
        return (ga,)

    return _node(out, (a,), backward, "sqrt")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """``log(1 / (1 + exp(-x)))`` without overflow in either tail."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)

    def backward(g):
        s = _stable_sigmoid(np.atleast_1d(-a.data)).reshape(a.shape)
        return (g * s,)

    return _node(out, (a,), backward, "log_sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _node(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# -- normalisations ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(a, eps: float = 1e-9) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    out = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _node(out, (a,), backward, "layer_norm")


def attention(q, k, v, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``key_mask`` is a boolean array broadcastable to ``(..., Tq, Tk)``; keys
    where it is False receive exactly zero weight.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", f"q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if key_mask is not None:
        mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("attention", "a query row has no unmasked keys")
        scores = np.where(mask, scores, -np.inf)
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)

    return _node(out, (q, k, v), backward, "attention")


# -- dense factorisations ---------------------------------------------------


def _cholesky_lower(a: np.ndarray) -> np.ndarray:
    sym = 0.5 * (a + a.T)
    c, info = lapack.dpotrf(sym, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info) - 1)
    if info < 0:
        raise AutodiffError(f"dpotrf rejected argument {-info}")
    return c


def cholesky(a) -> Tensor:
    """Lower Cholesky factor of the symmetric part of ``a``.

    The adjoint is the symmetric matrix ``(S + S^T) / 2`` with
    ``S = L^{-T} Phi(L^T Lbar) L^{-1}``, evaluated with triangular solves.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("cholesky", f"expected a square matrix, got {a.shape}")
    L = _cholesky_lower(a.data)

    def backward(g):
        phi = np.tril(L.T @ g)
        phi[np.diag_indices_from(phi)] *= 0.5
        y = _solve_triangular(L, phi, lower=True, trans="T")
        s = _solve_triangular(L, y.T, lower=True, trans="T").T
        return (0.5 * (s + s.T),)

    return _node(L, (a,), backward, "cholesky")


def solve_triangular(a, b, lower: bool = True, trans: bool = False) -> Tensor:
    """Solve ``a x = b`` (or ``a^T x = b`` when ``trans``) for triangular ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise ShapeError("solve_triangular", f"{a.shape} vs {b.shape}")
    flag = "T" if trans else "N"
    x = _solve_triangular(a.data, b.data, lower=lower, trans=flag)
    tri = np.tril if lower else np.triu

    def backward(g):
        gb = _solve_triangular(a.data, g, lower=lower, trans="N" if trans else "T")
        gb2 = gb.reshape(gb.shape[0], -1)
        x2 = x.reshape(x.shape[0], -1)
        ga = -(x2 @ gb2.T) if trans else -(gb2 @ x2.T)
        return tri(ga), gb

    return _node(x, (a, b), backward, "solve_triangular")


def cholesky_solve(K, B) -> Tensor:
    """Return ``X`` with ``K X = B`` for symmetric positive-definite ``K``."""
    L = cholesky(K)
    return solve_triangular(L, solve_triangular(L, B, lower=True), lower=True, trans=True)


# -- reductions --------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tensor_sum(a, axis, keepdims) * (1.0 / n)


# -- graphs -----------------------------------------------------------------


Builder = Callable[[Mapping[str, Tensor], Mapping[str, object]], Mapping[str, Tensor]]


@dataclass
class Graph:
    """A builder function plus the named trainable parameters it reads.

    ``build(params, bindings)`` must return a mapping of named output
    tensors. Parameters are passed in as :class:`Tensor` leaves; bindings are
    passed through untouched so integer inputs (token IDs) stay integral.
    """

    build: Builder
    parameters: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()

    def _run(self, bindings: Mapping[str, object], params: Mapping[str, np.ndarray], track: bool):
        missing = [n for n in self.inputs if n not in bindings]
        if missing:
            raise ContractError(f"unbound graph inputs: {', '.join(missing)}")
        leaves = {k: Tensor(v, requires_grad=track, name=k) for k, v in params.items()}
        return leaves, self.build(leaves, bindings)


def evaluate(graph: Graph, bindings: Mapping[str, object], outputs: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Forward values of the requested outputs (all outputs by default)."""
    _, result = graph._run(bindings, graph.parameters, track=False)
    names = list(result) if outputs is None else list(outputs)
    return {n: np.array(result[n].data, copy=True) for n in names}


def gradient(graph: Graph, bindings: Mapping[str, object], output: str) -> dict[str, np.ndarray]:
    """Adjoints of a scalar output with respect to every graph parameter."""
    leaves, result = graph._run(bindings, graph.parameters, track=True)
    target = result[output]
    if target.shape != ():
        raise ContractError(f"output '{output}' must be a scalar, got shape {target.shape}")
    if target.requires_grad:
        target.backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


@dataclass
class GradientReport:
    max_rel_error: float
    per_parameter: dict[str, float]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __bool__(self) -> bool:
        return bool(self.per_parameter)


def check_gradient(
    graph: Graph,
    bindings: Mapping[str, object],
    output: str,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradientReport:
    """Compare reverse-mode adjoints with central finite differences.

    The relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    When ``max_entries`` is set, at most that many entries per parameter are
    sampled (without replacement) instead of checking every one.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradient(graph, bindings, output)
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    n_checked = 0
    base = {k: np.array(v, dtype=np.float64) for k, v in graph.parameters.items()}

    def value(params) -> float:
        _, res = graph._run(bindings, params, track=False)
        return float(res[output].data)

    for name, arr in base.items():
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in flat_idx:
            trial = dict(base)
            p = arr.copy().reshape(-1)
            p[i] = arr.flat[i] + step
            trial[name] = p.reshape(arr.shape)
            up = value(trial)
            p[i] = arr.flat[i] - step
            trial[name] = p.reshape(arr.shape)
            down = value(trial)
            num = (up - down) / (2.0 * step)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
            n_checked += 1
        per_param[name] = worst
    return GradientReport(max(per_param.values(), default=0.0), per_param, n_checked, tolerance)
