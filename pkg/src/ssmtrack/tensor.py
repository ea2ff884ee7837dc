"""Dense float tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`. Outside a tape
they run eagerly and nothing is recorded, which is how inference works.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)

Elementwise binary ops only broadcast over *leading* dimensions (the shorter
shape must be a suffix of the longer one). Anything else needs an explicit
:func:`expand`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AxisOutOfRange, NonFiniteValue, NonScalarLoss, ShapeMismatch

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch storage precision. float32 exists for benchmarks only."""
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "__weakref__")
    # make ndarray (op) Tensor defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if any(s < 1 for s in arr.shape):
            raise ShapeMismatch(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.is_leaf = True
        self.name = name

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
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` and register ``backward_fn`` on the active tape.

    ``backward_fn(g)`` returns one gradient array (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.is_leaf = False
    out.name = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.nodes.append(Node(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep over ``tape``; leaf grads accumulate (no implicit zeroing)."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf and loss.requires_grad:
        loss.grad = loss.grad + 1.0
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


def zero_grad(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ------------------------------------------------------- shape helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_suffix(a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeMismatch(f"shapes {a} and {b} only broadcast over leading dims; use expand()")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < max(ndim, 1):
        raise AxisOutOfRange(f"axis {axis} out of range for rank {ndim}")
    return axis % max(ndim, 1)


# ------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record((a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record((a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(
        (a, b), ad * bd, lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return record(
        (a, b),
        out,
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    return record((a,), -a.data, lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return record((a,), ad**p, lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record((a,), np.log(ad), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record((a,), out, lambda g: (g * 0.5 / out,))


def tabs(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return record((a,), np.abs(a.data), lambda g: (g * sgn,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return record((a,), s, lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)
    return record((a,), x * s, lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return record((a,), out, lambda g: (g * _sigmoid_np(x),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return record((a,), t, lambda g: (g * (1.0 - t * t),))


ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "softplus": softplus, "exp": exp, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    return ACTIVATIONS[kind](x)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return record((a,), np.where(mask, a.data, lo), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return record((a,), np.clip(a.data, lo, hi), lambda g: (g * mask,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array of the output shape."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    if out.shape != cond.shape:
        raise ShapeMismatch("where() condition must have the output shape")
    sa, sb = a.shape, b.shape
    return record(
        (a, b),
        out,
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
    else:
        axes = None

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record((a,), np.sum(a.data, axis=axes, keepdims=keepdims), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[_norm_axis(ax, a.ndim)] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return record((a,), out, lambda g: (_unbroadcast(g, old),))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return record((a,), a.data[idx], bw)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis with an integer index array (used for permutations)."""
    axis = _norm_axis(axis, a.ndim)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return record((a,), np.take(a.data, indices, axis=axis), bw)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    axis = _norm_axis(axis, ts[0].ndim)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record(tuple(ts), np.concatenate([t.data for t in ts], axis=axis),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = _norm_axis(axis, out.ndim)
    return record(tuple(ts), out,
                  lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


# ------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record((a, b), out, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


# ------------------------------------------------------- normalization


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return record((a,), s, lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


softmax_axis = softmax


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeMismatch(f"rmsnorm gain {gain.shape} vs input {x.shape}")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xh = xd * r

    def bw(g):
        gg = g * gd
        dx = r * (gg - xh * np.mean(gg * xh, axis=-1, keepdims=True))
        dgain = (g * xh).reshape(-1, xd.shape[-1]).sum(axis=0)
        return dx, dgain

    return record((x, gain), xh * gd, bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layernorm params {gain.shape}/{bias.shape} vs input {x.shape}")
    xd, gd = x.data, gain.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xh = xc * r

    def bw(g):
        gg = g * gd
        dx = r * (gg - gg.mean(axis=-1, keepdims=True) - xh * np.mean(gg * xh, axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xh.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return record((x, gain, bias), xh * gd + bias.data, bw)


# ------------------------------------------------------- convolutions


def conv1d_depthwise(x: Tensor, kernel: Tensor, causal: bool = False) -> Tensor:
    """Per-channel 1-D cross-correlation over axis 1 of ``x[B, L, D]``, zero padded."""
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[2]:
        raise ShapeMismatch(f"conv1d_depthwise: x {x.shape}, kernel {kernel.shape}")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ShapeMismatch("kernel width must be odd")
    L = x.shape[1]
    left = k - 1 if causal else k // 2
    right = k - 1 - left
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    kd = kernel.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + L, :] * kd[:, j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(k):
            gxp[:, j:j + L, :] += g * kd[:, j]
            gk[:, j] = (g * xp[:, j:j + L, :]).sum(axis=(0, 1))
        return gxp[:, left:left + L, :], gk

    return record((x, kernel), out, bw)


def conv2d(x: Tensor, kernel: Tensor, depthwise: bool = False) -> Tensor:
    """Same-padded 2-D cross-correlation, ``x[B, C, H, W]``.

    Dense kernels are ``[C_out, C, kh, kw]``; depthwise kernels ``[C, 1, kh, kw]``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch("conv2d expects rank-4 input and kernel")
    B, C, H, W = x.shape
    co, ci, kh, kw = kernel.shape
    if (depthwise and (co != C or ci != 1)) or (not depthwise and ci != C):
        raise ShapeMismatch(f"conv2d: x {x.shape}, kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("kernel sizes must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kd = kernel.data
    out = np.zeros((B, co, H, W), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + H, j:j + W]
            if depthwise:
                out += win * kd[None, :, 0, i, j, None, None]
            else:
                out += np.einsum("oc,bchw->bohw", kd[:, :, i, j], win)

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i:i + H, j:j + W]
                if depthwise:
                    gxp[:, :, i:i + H, j:j + W] += g * kd[None, :, 0, i, j, None, None]
                    gk[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                else:
                    gxp[:, :, i:i + H, j:j + W] += np.einsum("oc,bohw->bchw", kd[:, :, i, j], g)
                    gk[:, :, i, j] = np.einsum("bohw,bchw->oc", g, win)
        return gxp[:, :, ph:ph + H, pw:pw + W], gk

    return record((x, kernel), out, bw)


# ------------------------------------------------------- gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``x`` to a scalar tensor. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    was, saved = x.requires_grad, x.grad
    x.data = np.array(x.data, dtype=x.data.dtype, copy=True)
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    with Tape() as tape:
        y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteValue("f(x) is not finite")
    tape.backward(y)
    analytic = x.grad.copy()
    numeric = np.empty_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteValue(f"f not finite near coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    x.requires_grad, x.grad = was, saved
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
