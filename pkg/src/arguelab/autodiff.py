"""Small reverse-mode automatic differentiation core on float64 numpy arrays.

The trace is rebuilt on every forward pass: each operation records its parents
and a backward closure on the freshly created output node. ``backward()``
topologically sorts the trace and visits each node exactly once. Leaves that
never entered the trace simply keep ``grad = None`` (read as exactly zero).

Values are never mutated by a backward pass; only ``.grad`` fields change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NearZeroNorm,
    NonFiniteLoss,
    NonPositiveTemperature,
    NotADistribution,
)

# Floor applied inside every logarithm of a probability. Documented clamp:
# prevents -inf losses on adversarial inputs, never rescales the distribution.
PROB_FLOOR = 1e-30

_NORM_EPS = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    for _ in range(extra):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus its position in the differentiation trace."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        out = Tensor(data, _parents=parents, _backward=backward)
        out.requires_grad = True
        return out

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    def __radd__(self, other):
        return as_tensor(other) + self

    def __neg__(self):
        def backward(g, a=self):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        other = as_tensor(other)

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        exponent = float(exponent)

        def backward(g, a=self, e=exponent):
            if a.requires_grad:
                a._accumulate(g * e * np.power(a.data, e - 1.0))

        return Tensor._make(np.power(self.data, exponent), (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g, a=a, b=b):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                if a.requires_grad:
                    a._accumulate(g * bd)
                if b.requires_grad:
                    b._accumulate(g * ad)
            elif ad.ndim == 2 and bd.ndim == 2:
                if a.requires_grad:
                    a._accumulate(g @ bd.T)
                if b.requires_grad:
                    b._accumulate(ad.T @ g)
            elif ad.ndim == 1 and bd.ndim == 2:
                if a.requires_grad:
                    a._accumulate(bd @ g)
                if b.requires_grad:
                    b._accumulate(np.outer(ad, g))
            elif ad.ndim == 2 and bd.ndim == 1:
                if a.requires_grad:
                    a._accumulate(np.outer(g, bd))
                if b.requires_grad:
                    b._accumulate(ad.T @ g)
            else:
                raise DimensionMismatch(
                    f"matmul backward unsupported for {ad.shape} @ {bd.shape}")

        return Tensor._make(self.data @ other.data, (self, other), backward)

    # -- elementwise functions ---------------------------------------------------

    def tanh(self):
        y = np.tanh(self.data)

        def backward(g, a=self, y=y):
            if a.requires_grad:
                a._accumulate(g * (1.0 - y * y))

        return Tensor._make(y, (self,), backward)

    def exp(self):
        y = np.exp(self.data)

        def backward(g, a=self, y=y):
            if a.requires_grad:
                a._accumulate(g * y)

        return Tensor._make(y, (self,), backward)

    def log(self):
        def backward(g, a=self):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._make(np.log(self.data), (self,), backward)

    def clip_min(self, floor: float):
        """Elementwise max(x, floor); gradient is zero where the clip engages."""
        mask = self.data > floor

        def backward(g, a=self, mask=mask):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._make(np.maximum(self.data, floor), (self,), backward)

    # -- reductions / shape ----------------------------------------------------

    def sum(self, axis: int | None = None):
        def backward(g, a=self, axis=axis):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

        return Tensor._make(self.data.sum(axis=axis), (self,), backward)

    def mean(self, axis: int | None = None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / float(n)

    @property
    def T(self):
        def backward(g, a=self):
            if a.requires_grad:
                a._accumulate(g.T)

        return Tensor._make(self.data.T, (self,), backward)

    # -- backward pass -----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stack_rows(rows: Sequence[Tensor | np.ndarray]) -> Tensor:
    """Stack 1-D tensors into a 2-D tensor; gradients split back by row."""
    parts = [as_tensor(r) for r in rows]
    data = np.stack([p.data for p in parts], axis=0)

    def backward(g, parts=parts):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(g[i])

    return Tensor._make(data, tuple(parts), backward)


# ---------------------------------------------------------------------------
# Public vector operations
# ---------------------------------------------------------------------------

def _wants_tensor(*args) -> bool:
    return any(isinstance(a, Tensor) for a in args)


def l2_normalize(v):
    """Scale a vector to unit Euclidean norm, preserving direction.

    Raises NearZeroNorm when the norm is at or below 1e-12.
    """
    t = as_tensor(v)
    norm_sq = float(np.dot(t.data.ravel(), t.data.ravel()))
    if math.sqrt(norm_sq) <= _NORM_EPS:
        raise NearZeroNorm(f"cannot normalize vector with norm {math.sqrt(norm_sq):.3e}")
    out = t / ((t * t).sum() ** 0.5)
    return out if _wants_tensor(v) else out.data


def cosine_similarity(a, b):
    """Cosine of the angle between two equal-dimension vectors."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.shape != tb.shape or ta.ndim != 1:
        raise DimensionMismatch(f"cosine requires equal 1-D shapes, got {ta.shape} vs {tb.shape}")
    na = float(np.linalg.norm(ta.data))
    nb = float(np.linalg.norm(tb.data))
    if na <= _NORM_EPS or nb <= _NORM_EPS:
        raise NearZeroNorm("cosine undefined for near-zero-norm input")
    out = (ta @ tb) / (((ta * ta).sum() ** 0.5) * ((tb * tb).sum() ** 0.5))
    return out if _wants_tensor(a, b) else float(out.data)


def softmax_with_temperature(logits, tau: float):
    """Temperature softmax with max-subtraction for numerical stability.

    Works on 1-D logits or row-wise on 2-D logits.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    t = as_tensor(logits)
    if not np.all(np.isfinite(t.data)):
        raise NotADistribution("logits must be finite")
    scaled = t / float(tau)
    # The subtracted max is detached: softmax is invariant under constant
    # shifts, so treating it as a constant leaves gradients exact.
    if t.ndim <= 1:
        shift = scaled - float(np.max(scaled.data))
        exps = shift.exp()
        out = exps / exps.sum()
    elif t.ndim == 2:
        shift = scaled - np.max(scaled.data, axis=1, keepdims=True)
        exps = shift.exp()
        out = exps / _row_sums(exps)
    else:
        raise DimensionMismatch("softmax supports 1-D or 2-D input")
    return out if _wants_tensor(logits) else out.data


def as_column(t: Tensor) -> Tensor:
    """Reshape a 1-D tensor to an (n, 1) column so division broadcasts per row."""
    def backward(g, a=t):
        if a.requires_grad:
            a._accumulate(g[:, 0])

    return Tensor._make(t.data.reshape(-1, 1), (t,), backward)


def _row_sums(t: Tensor) -> Tensor:
    return as_column(t.sum(axis=1))


def normalize_rows(t: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit norm."""
    inv = (((t * t).sum(axis=1)) ** 0.5) ** -1.0
    return t * as_column(inv)


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim != 1:
        raise NotADistribution(f"expected 1-D distribution, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NotADistribution("distribution contains non-finite entries")
    if np.min(p) < -1e-9:
        raise NotADistribution(f"negative probability {np.min(p):.3e}")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise NotADistribution(f"probabilities sum to {float(p.sum()):.8f}, not 1")


def cross_entropy(probabilities, target_index: int):
    """Negative log-probability of the target class, floored at 1e-30."""
    t = as_tensor(probabilities)
    _check_distribution(t.data)
    n = t.data.shape[0]
    if not (0 <= int(target_index) < n):
        raise IndexOutOfRange(f"target {target_index} outside [0, {n})")
    onehot = np.zeros(n)
    onehot[int(target_index)] = 1.0
    out = -((t.clip_min(PROB_FLOOR).log() * onehot).sum())
    return out if _wants_tensor(probabilities) else float(out.data)


def entropy(probabilities):
    """Shannon entropy in nats; maximal (ln C) exactly at the uniform distribution."""
    t = as_tensor(probabilities)
    _check_distribution(t.data)
    out = -((t * t.clip_min(PROB_FLOOR).log()).sum())
    return out if _wants_tensor(probabilities) else float(out.data)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float


def gradient_check(loss_fn: Callable[[Tensor], Tensor], params,
                   eps: float = 1e-5) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``loss_fn`` against central differences.

    ``loss_fn`` receives a parameter tensor and must return a scalar tensor.
    Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(params, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = loss_fn(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if not np.isfinite(out.data):
        raise NonFiniteLoss("loss is not finite at the evaluation point")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    def evaluate(x: np.ndarray) -> float:
        value = loss_fn(Tensor(x))
        v = float(value.data if isinstance(value, Tensor) else value)
        if not math.isfinite(v):
            raise NonFiniteLoss("loss not finite during finite differencing")
        return v

    max_abs = 0.0
    max_rel = 0.0
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
        a = float(analytic[idx])
        abs_err = abs(a - numeric)
        rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)
    return GradCheckReport(max_abs_err=max_abs, max_rel_err=max_rel)
