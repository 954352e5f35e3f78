"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records its output as a node holding parent links and a
closure computing parent gradients; the graph is rebuilt on every forward
pass, so episode structure can vary freely between steps. Node ids are
assigned from a monotone counter, which makes creation order a valid
topological order: `backward` visits reachable nodes once, in decreasing
id order, and accumulates gradients into parameter leaves.

All data is float64. Any primitive producing a NaN or Inf raises
NumericsError immediately rather than letting poison propagate.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_NODE_IDS = itertools.count()
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation/rollout path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus its position in the current tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericsError("tensor holds NaN/Inf values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._nid = next(_NODE_IDS)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same buffer, no graph membership."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are folded in as constants.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def parameter(data, rng: np.random.Generator | None = None, scale_: float | None = None) -> Tensor:
    """Create a trainable leaf, optionally filled from `rng.normal(0, scale_)`."""
    if rng is not None:
        data = rng.normal(0.0, scale_ if scale_ is not None else 1.0, size=data)
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _node(data, parents, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dtheta into `.grad` of every reachable parameter leaf.

    Deterministic for a fixed graph; calling it twice without zeroing
    doubles every gradient (accumulation contract).
    """
    if loss.ndim != 0:
        raise ContractError("backward() needs a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any parameter")

    seen = {loss._nid: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._nid not in seen:
                seen[p._nid] = p
                stack.append(p)
    order = sorted(seen.values(), key=lambda n: n._nid, reverse=True)

    pending: dict[int, np.ndarray] = {loss._nid: np.asarray(1.0)}
    for node in order:
        g = pending.pop(node._nid, None)
        if g is None:
            continue
        if node._backward is None:
            if not np.isfinite(g).all():
                raise NumericsError("non-finite gradient reached a parameter")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._nid in pending:
                pending[p._nid] = pending[p._nid] + pg
            else:
                pending[p._nid] = pg


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Broadcast-add a scalar tensor onto every entry of `a`."""
    if s.ndim != 0:
        raise ShapeError("add_scalar: second operand must be scalar")
    return _node(a.data + s.data, (a, s), lambda g: (g, np.asarray(g).sum()))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), lambda g: (g,))


def vsum(a: Tensor) -> Tensor:
    return _node(a.data.sum(), (a,), lambda g: (np.full_like(a.data, float(g)),))


def vmean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    return _node(a.data.mean(), (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"mean_rows: expected 2-D, got {a.shape}")
    n = a.shape[0]
    return _node(a.data.mean(axis=0), (a,), lambda g: (np.tile(g / n, (n, 1)),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError("dot: both operands must be 1-D")
    _same_shape(a, b, "dot")
    return _node(a.data @ b.data, (a, b), lambda g: (float(g) * b.data, float(g) * a.data))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), lambda g: (g * _stable_sigmoid(a.data),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericsError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matvec(w: Tensor, x: Tensor) -> Tensor:
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: {w.shape} @ {x.shape}")
    return _node(w.data @ x.data, (w, x), lambda g: (np.outer(g, x.data), w.data.T @ g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose: expected 2-D")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError("concat: expected 1-D operands")
    na = a.shape[0]
    return _node(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:na], g[na:]))


def stack(parts: list[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D vector."""
    for p in parts:
        if p.ndim != 0:
            raise ShapeError("stack: expected scalar tensors")
    data = np.array([p.data for p in parts])
    return _node(data, tuple(parts), lambda g: tuple(np.asarray(gi) for gi in g))


def embed(table: Tensor, ids) -> Tensor:
    """Gather rows `ids` of a 2-D table; gradient scatter-adds back."""
    if table.ndim != 2:
        raise ShapeError("embed: table must be 2-D")
    idx = np.asarray(ids, dtype=np.intp)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(table.data[idx], (table,), back)


def gather(x: Tensor, ids) -> Tensor:
    """Pick entries of a 1-D tensor; duplicate indices accumulate in backward."""
    if x.ndim != 1:
        raise ShapeError("gather: expected 1-D tensor")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError("gather: index out of range")

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], (x,), back)


def pick(x: Tensor, i: int) -> Tensor:
    if x.ndim != 1:
        raise ShapeError("pick: expected 1-D tensor")
    if not 0 <= i < x.shape[0]:
        raise ContractError(f"pick: index {i} out of range for length {x.shape[0]}")

    def back(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _node(x.data[i], (x,), back)


# ---------------------------------------------------------------------------
# Normalization primitives
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Probability vector over a 1-D input; max-subtracted for stability."""
    if x.ndim != 1 or x.shape[0] < 1:
        raise ShapeError("softmax: expected non-empty 1-D input")
    e = np.exp(x.data - x.data.max())
    p = e / e.sum()
    return _node(p, (x,), lambda g: (p * (g - float(p @ g)),))


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 1 or x.shape[0] < 1:
        raise ShapeError("log_softmax: expected non-empty 1-D input")
    shifted = x.data - x.data.max()
    lse = math.log(np.exp(shifted).sum())
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(),))


def row_softmax(x: Tensor) -> Tensor:
    """Softmax applied independently to each row of a 2-D input."""
    if x.ndim != 2:
        raise ShapeError("row_softmax: expected 2-D input")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return _node(p, (x,), lambda g: (p * (g - (p * g).sum(axis=1, keepdims=True)),))


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """gain * (x - mean) / sqrt(pop_var + 1e-5) + bias over a 1-D input."""
    if x.ndim != 1 or x.shape[0] < 2:
        raise ShapeError("layer_norm: expected 1-D input with length >= 2")
    _same_shape(x, gain, "layer_norm")
    _same_shape(x, bias, "layer_norm")
    mu = x.data.mean()
    var = ((x.data - mu) ** 2).mean()
    inv = 1.0 / math.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv

    def back(g):
        h = g * gain.data
        gx = (h - h.mean() - xhat * (h * xhat).mean()) * inv
        return gx, g * xhat, g

    return _node(gain.data * xhat + bias.data, (x, gain, bias), back)
