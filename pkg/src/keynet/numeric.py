"""Small dense-tensor engine with tape-based reverse-mode gradients.

Everything is float64 numpy underneath. A :class:`Tensor` records the op that
produced it; :func:`backward` walks that record in reverse topological order.
Leaf tensors accumulate into ``.grad`` across calls until :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, exact erf form."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``rate=0`` is the identity."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def take(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def scatter_rows(x: Tensor, index, total: int) -> Tensor:
    """Rows of ``x`` placed at ``index`` along axis 0 of a zero tensor of length ``total``."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((total,) + x.shape[1:], dtype=DTYPE)
    out[index] = x.data
    return _make(out, (x,), lambda g: (g[index],))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def masked_softmax(x: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``keep``.

    Excluded entries get weight exactly 0. A row with nothing kept is all
    zeros instead of NaN.
    """
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    masked = np.where(keep, x.data, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(keep, np.exp(np.where(keep, x.data, 0.0) - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total > 0.0, total, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def embedding(table: Tensor, ids: np.ndarray, frozen_row: int | None = 0) -> Tensor:
    """Row lookup ``table[ids]``; the gradient of ``frozen_row`` is dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if frozen_row is not None:
            full[frozen_row] = 0.0
        return (full,)

    return _make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, C]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ValueError(f"{labels.shape[0]} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"class index out of range [0, {classes})")
    w = np.ones(batch) if weights is None else np.asarray(weights, dtype=DTYPE)
    denom = max(w.sum(), 1e-300)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(batch)
    loss = -(w * logp[rows, labels]).sum() / denom

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad * (w / denom)[:, None],)

    return _make(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean binary cross-entropy on logits; ``weights`` masks elements."""
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} != logits shape {logits.shape}")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("multi-hot targets must be 0 or 1")
    w = np.ones_like(y) if weights is None else np.broadcast_to(np.asarray(weights, dtype=DTYPE), y.shape)
    denom = max(w.sum(), 1e-300)
    z = logits.data
    # softplus(z) - y*z, stable for either sign
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (w * per).sum() / denom
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def backward(g):
        return (g * (sig - y) * w / denom,)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- autodiff


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every ``requires_grad`` leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        params = list(params)
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``p.data``."""
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} params but optimizer state holds {len(state.m)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- checking


def numeric_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)`` over the whole array (norm-wise)."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return float(diff)
    return float(diff / scale)


@dataclass
class GradCheckResult:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> GradCheckResult:
    """Compare :func:`backward` against central differences for each named parameter."""
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())

    def scalar() -> float:
        with no_grad():
            return float(loss_fn().data)

    result = GradCheckResult()
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        result.errors[name] = relative_error(analytic, numeric_grad(scalar, p, h))
    return result
