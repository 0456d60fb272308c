"""Dense tensors with a small reverse-mode differentiation engine.

Every operation returns a new :class:`Tensor`; data buffers are never
mutated once built. When at least one input requires a gradient the result
records its parents and a closure mapping the output gradient to input
gradients. :func:`backward` walks the recorded nodes in reverse construction
order, so for a fixed graph the accumulated gradients are bit-reproducible.

Broadcasting is deliberately absent: binary ops demand identical shapes, and
the only way to expand a tensor is the explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ShapeError

LAYERNORM_EPS = 1e-6

_node_counter = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A contiguous row-major array that may take part in a gradient graph.

    Args:
        data: Anything ``np.asarray`` accepts. Floating arrays keep their
            dtype (f32 or f64); everything else is stored as f32.
        requires_grad: Mark the tensor as a leaf whose gradient is wanted.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_counter)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Union[Tensor, float, int]) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Union[float, int]) -> Tensor:
        return scale(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``root``.

    Gradients are added to any existing ``.grad``; call ``zero_grad`` on the
    leaves between passes to start fresh.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"{node.op}: grad shape {pg.shape} != input shape {parent.shape}")
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar; the only broadcast the engine allows."""
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), "scale", lambda g: (g * g.dtype.type(c),))


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, shape)),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), "sum", fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    out = Tensor(x.data)
    out.op = "detach"
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _result(data, (x,), "reshape", lambda g: (g.reshape(src),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2: need at least 2 dims, got {x.shape}")
    return _result(_swap(x.data), (x,), "transpose_last2", lambda g: (_swap(g),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    data = np.ascontiguousarray(np.swapaxes(x.data, a1, a2))
    return _result(data, (x,), "swapaxes", lambda g: (np.ascontiguousarray(np.swapaxes(g, a1, a2)),))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    src_shape, dtype = x.shape, x.dtype
    data = np.ascontiguousarray(np.take(x.data, index, axis=axis))

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        idx = [slice(None)] * len(src_shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _result(data, (x,), "take", fn)


def broadcast_to(x: Tensor, leading: Sequence[int]) -> Tensor:
    """Prepend ``leading`` axes by repetition; the one explicit expansion op."""
    leading = tuple(int(n) for n in leading)
    if not leading:
        return x
    nlead = len(leading)
    data = np.ascontiguousarray(np.broadcast_to(x.data, leading + x.shape))
    return _result(data, (x,), "broadcast_to", lambda g: (g.sum(axis=tuple(range(nlead))),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: no parts given")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or p.shape[:axis] + p.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: shape mismatch {ref} vs {p.shape} along axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=axis)

    def fn(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return out

    return _result(data, tuple(parts), "concat", fn)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[..., start:stop]), (x,), "slice_lastdim", fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction over the last axis of ``a`` and second-last of ``b``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ _swap(bd) if a.requires_grad else None
        gb = _swap(ad) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), "matmul", fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, "linear", fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: need a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax", fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.shape}/bias {bias.shape} do not match last extent {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), "layernorm", fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact erf form: 0.5 x (1 + erf(x / sqrt 2))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    cdf = cdf.astype(xd.dtype, copy=False)

    def fn(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _result(xd * cdf, (x,), "gelu", fn)


def pool_windows(length: int, target: int) -> list[tuple[int, int]]:
    """Half-open windows ``[floor(t L / T), ceil((t + 1) L / T))``."""
    return [((t * length) // target, -((-(t + 1) * length) // target)) for t in range(target)]


def adaptive_avg_pool_lastdim(x: Tensor, target: int) -> Tensor:
    length = x.shape[-1]
    if target < 1 or target > length:
        raise ShapeError(f"adaptive_avg_pool_lastdim: target {target} outside [1, {length}]")
    src_shape, dtype = x.shape, x.dtype
    if length % target == 0:
        w = length // target
        data = x.data.reshape(src_shape[:-1] + (target, w)).mean(axis=-1)

        def fn(g):
            rep = np.repeat(g, w, axis=-1) if w > 1 else g
            return (rep * dtype.type(1.0 / w) if w > 1 else rep.copy(),)

        return _result(data, (x,), "adaptive_avg_pool", fn)

    windows = pool_windows(length, target)
    data = np.stack([x.data[..., lo:hi].mean(axis=-1) for lo, hi in windows], axis=-1)

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        for t, (lo, hi) in enumerate(windows):
            full[..., lo:hi] += g[..., t:t + 1] / dtype.type(hi - lo)
        return (full,)

    return _result(data, (x,), "adaptive_avg_pool", fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs batch {n}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", fn)
