"""Minimal reverse-mode automatic differentiation on top of numpy.

Every value is a float64 :class:`Tensor`. Operations record a closure that
pushes the output gradient back to their inputs; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.

The op set is deliberately small: what the flow-matching transformer and its
control branches need, with attention, layer normalization and 1-D
convolution implemented as fused ops with hand-written backward rules.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "nan_check",
    "as_tensor",
    "matmul",
    "conv1d",
    "attention",
    "attention_weights",
    "layer_norm",
    "adaptive_scale_shift",
    "silu",
    "sigmoid",
    "exp",
    "log",
    "embedding",
    "concat",
    "check_gradients",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _nan_check_enabled() -> bool:
    return getattr(_state, "nan_check", False)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (thread-local)."""
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def nan_check():
    """Raise ``FloatingPointError`` as soon as any op produces a non-finite value."""
    prev = _nan_check_enabled()
    _state.nan_check = True
    try:
        yield
    finally:
        _state.nan_check = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf in the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _nan_check_enabled() and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by an op")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: _accumulate(a, g * exponent * a.data ** (exponent - 1)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * out))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: _accumulate(a, g * s * (1.0 + a.data * (1.0 - s))))


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inverse)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), backward)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, T]`` with ``w[C_out, C_in, K]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    B, C_in, T = x.shape
    C_out, _, K = w.shape
    span = T + 2 * padding - K
    if span < 0 or span % stride:
        raise ShapeError(f"conv1d: output length ({T} + 2*{padding} - {K})/{stride} + 1 is not an integer")
    T_out = span // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    cols = cols.transpose(0, 2, 1, 3).reshape(B, T_out, C_in * K)
    wmat = w.data.reshape(C_out, C_in * K)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gt = g.transpose(0, 2, 1)  # B, T_out, C_out
        if w.requires_grad:
            gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1]))
            _accumulate(w, gw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gt.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(B, T_out, C_in, K)
            gxp = np.zeros_like(xp)
            stop = stride * (T_out - 1) + 1
            for k in range(K):
                gxp[:, :, k:k + stop:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            _accumulate(x, gxp[:, :, padding:padding + T] if padding else gxp)

    return _result(out, parents, backward)


def embedding(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; gradient scatters back with repeats summed."""
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        _accumulate(table, full)

    return _result(table.data[index], (table,), backward)


# -- normalization and attention ---------------------------------------------

def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis; optional elementwise affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        dx = inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))
        _accumulate(x, dx)

    out = _result(y, (x,), backward)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def adaptive_scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """adaLN modulation ``x * (1 + scale) + shift`` with per-sample ``scale, shift[B, D]``."""
    B, D = scale.shape
    scale = reshape(scale, (B, 1, D))
    shift = reshape(shift, (B, 1, D))
    return x * (scale + 1.0) + shift


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    B, T, D = a.shape
    return a.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _softmax(s: np.ndarray) -> np.ndarray:
    e = s - s.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def attention_weights(q, k, heads: int = 1) -> np.ndarray:
    """Softmax weights ``[B, heads, T_q, T_k]`` (no graph)."""
    q, k = as_tensor(q).data, as_tensor(k).data
    dh = q.shape[-1] // heads
    s = _split_heads(q, heads) @ _split_heads(k, heads).transpose(0, 1, 3, 2) / np.sqrt(dh)
    return _softmax(s)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Full (non-causal) multi-head scaled dot-product attention.

    ``q[B, T_q, D]``, ``k, v[B, T_k, D]``; heads split the feature axis and are
    concatenated back.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects rank-3 [B, T, D] operands")
    B, Tq, D = q.shape
    if k.shape != v.shape or k.shape[0] != B or k.shape[2] != D:
        raise ShapeError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    if D % heads:
        raise ShapeError(f"attention: width {D} not divisible by {heads} heads")
    dh = D // heads
    scale = 1.0 / np.sqrt(dh)
    qh, kh, vh = _split_heads(q.data, heads), _split_heads(k.data, heads), _split_heads(v.data, heads)
    p = _softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
    oh = p @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(B, Tq, D)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(a.shape[0], a.shape[2], D)

    def backward(g):
        go = _split_heads(g, heads)
        gp = go @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            _accumulate(q, merge(gs @ kh))
        if k.requires_grad:
            _accumulate(k, merge(gs.transpose(0, 1, 3, 2) @ qh))
        if v.requires_grad:
            _accumulate(v, merge(p.transpose(0, 1, 3, 2) @ go))

    return _result(out, (q, k, v), backward)


# -- gradient checking --------------------------------------------------------

def check_gradients(f, params, n_samples: int = 20, step: float = 1e-5, seed: int = 0,
                    floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``f()`` must return a scalar Tensor built from ``params``. Up to
    ``n_samples`` coordinates per parameter are probed; the relative error of
    one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("check_gradients: f() must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            count = min(n_samples, flat.size)
            for i in rng.choice(flat.size, size=count, replace=False):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                a = ga.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
