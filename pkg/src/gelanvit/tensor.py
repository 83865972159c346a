"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to a :class:`Tape`.  A tape is
created explicitly per forward pass (``Tape().constant(x)``) or implicitly the
first time a gradient-requiring leaf enters an operation; tapes that meet in a
single operation are merged.  :func:`backward` walks the tape once in reverse.
"""

from __future__ import annotations

import io
import struct
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "atan",
    "maximum",
    "minimum",
    "clamp_min",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "concat_channels",
    "split",
    "matmul",
    "linear",
    "conv2d",
    "max_pool2d",
    "upsample_nearest2",
    "sigmoid",
    "silu",
    "gelu",
    "softmax",
    "layer_norm",
    "batch_norm2d",
    "bce_with_logits",
    "multi_head_attention",
    "check_finite",
    "count_flops_executed",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf values."""


_MAC_COUNTERS: list = []


class count_flops_executed:
    """Context manager tallying ``2 * MACs`` of conv2d and matmul calls that run inside it.

    Bias additions, normalization, activations and pooling are not counted.
    """

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        _MAC_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _MAC_COUNTERS.remove(self)
        return False


def _tally(macs: int) -> None:
    for c in _MAC_COUNTERS:
        c.flops += 2 * int(macs)


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._merged_into: Optional[Tape] = None

    def resolve(self) -> "Tape":
        tape = self
        while tape._merged_into is not None:
            tape = tape._merged_into
        return tape

    def constant(self, data, dtype=None) -> "Tensor":
        """Wrap ``data`` as a non-differentiable tensor attached to this tape."""
        t = Tensor(data, dtype=dtype)
        t.tape = self
        return t

    def absorb(self, other: "Tape") -> None:
        # nodes of two disjoint tapes share no dependencies, so appending keeps
        # the combined list topologically ordered
        other = other.resolve()
        if other is self:
            return
        self.nodes.extend(other.nodes)
        other.nodes = []
        other._merged_into = self

    def reset(self) -> None:
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """n-dimensional array participating in a gradient tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self) -> "Tensor":
        check_finite(self)
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


# ---------------------------------------------------------------------------
# recording machinery
# ---------------------------------------------------------------------------

def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    found = None
    for t in inputs:
        if t.tape is None:
            continue
        tape = t.tape.resolve()
        if found is None:
            found = tape
        elif tape is not found:
            found.absorb(tape)
    return found


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    needs = any(t.requires_grad for t in inputs)
    tape = _tape_of(inputs)
    if needs:
        if tape is None:
            tape = Tape()
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    out.tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    return a, b


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every gradient-requiring tensor reachable from ``loss``.

    The tape is consumed: its node list is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = (tape or loss.tape).resolve()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    # what remains belongs to leaves
    for key, g in grads.items():
        t = seen[key]
        g = g.astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
    tape.reset()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power supports scalar exponents only")
    p = float(exponent)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def atan(a: Tensor) -> Tensor:
    return _result(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _result(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _result(np.minimum(a.data, b.data), (a, b), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return _result(np.where(keep, a.data, a.dtype.type(lo)), (a,), lambda g: (np.where(keep, g, 0.0),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1) if a.data.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=basic) if basic else out, (a,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ndim = xs[0].ndim
    axis = axis % ndim
    ref = xs[0].shape
    bad = [i for i, x in enumerate(xs) if x.ndim != ndim or any(x.shape[d] != ref[d] for d in range(ndim) if d != axis)]
    if bad:
        listing = ", ".join(f"#{i}{tuple(xs[i].shape)}" for i in bad)
        raise ShapeError(f"concat along axis {axis}: operands {listing} do not match {tuple(ref)}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _result(out, tuple(xs), bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D ``[N, C_i, H, W]`` tensors along the channel axis."""
    for i, x in enumerate(xs):
        if x.ndim != 4:
            raise ShapeError(f"concat_channels operand #{i} has shape {tuple(x.shape)}, expected 4-D")
    return concat(xs, axis=1)


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    parts = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        parts.append(getitem(a, tuple(sl)))
        start += n
    return parts


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if _MAC_COUNTERS:
        _tally(out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape ``[D_in, D_out]``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    y = matmul(x, w) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), w).reshape((w.shape[1],))
    return y if b is None else add(y, b)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x [N,C,H,W]`` with ``w [O,C,k,k]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(w.shape)}")
    n, c, h, wd = x.shape
    o, c_w, kh, kw = w.shape
    if c != c_w:
        raise ShapeError(f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    if stride < 1 or kh < 1 or kh != kw:
        raise ShapeError(f"conv2d needs square kernel >= 1 and stride >= 1 (k={kh}x{kw}, stride={stride})")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel {kh} larger than padded input {h}x{wd} (pad {pad})")
    k = kh
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    xd, wdata = x.data, w.data
    if _MAC_COUNTERS:
        _tally(n * o * ho * wo * c * k * k)

    if k == 1 and stride == 1 and pad == 0:
        w2 = wdata.reshape(o, c)
        xf = xd.reshape(n, c, h * wd)
        out = np.matmul(w2, xf).reshape(n, o, h, wd)

        def bw(g):
            gf = g.reshape(n, o, h * wd)
            gx = np.matmul(w2.T, gf).reshape(x.shape)
            gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(w.shape)
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return (gx, gw, gb) if b is not None else (gx, gw)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # win: [N, C, Ho, Wo, k, k]
        out = np.tensordot(win, wdata, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        def bw(g):
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            dwin = np.tensordot(g, wdata, axes=([1], [0]))  # [N, Ho, Wo, C, k, k]
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for p in range(k):
                for q in range(k):
                    gxp[:, :, p : p + hs : stride, q : q + ws : stride] += dwin[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return (gx, gw, gb) if b is not None else (gx, gw)

    out = np.ascontiguousarray(out)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias shape {tuple(b.shape)} does not match {o} output channels")
        out = out + b.data.reshape(1, o, 1, 1)
        return _result(out, (x, w, b), bw)
    return _result(out, (x, w), bw)


def max_pool2d(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {tuple(x.shape)}")
    n, c, h, wd = x.shape
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"max_pool2d window {k} larger than padded input {h}x{wd}")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        for p in range(k):
            for q in range(k):
                hit = arg == p * k + q
                if hit.any():
                    gxp[:, :, p : p + hs : stride, q : q + ws : stride] += np.where(hit, g, 0.0)
        return (gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp,)

    return _result(np.ascontiguousarray(out), (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects 4-D input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return special.expit(z)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return _result(out, (x,), bw)


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _SQRT_HALF))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last extent {d} of {tuple(x.shape)} vs gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.03,
    eps: float = 1e-3,
) -> Tensor:
    """Batch normalization over ``(N, H, W)``.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the running buffers are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: input {tuple(x.shape)} vs gamma {tuple(gamma.shape)}")
    c = x.shape[1]
    shp = (1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(shp)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shp)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def bw(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gxh = g * gamma.data.reshape(shp)
            gx = inv.reshape(shp) * (
                gxh - gxh.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gxh * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv).reshape(shp)
        xhat = (x.data - running_mean.reshape(shp)) * inv.reshape(shp)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def bw(g):
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable form)."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        return (g * (_sigmoid(z) - y),)

    return _result(out.astype(logits.dtype, copy=False), (logits,), bw)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def multi_head_attention(x: Tensor, heads: int, weights: dict, return_attn: bool = False):
    """Multi-head self-attention over ``x [..., T, D]``.

    ``weights`` maps ``wq, wk, wv, wo`` to ``[D, D]`` tensors and ``bq, bk, bv,
    bo`` to ``[D]`` tensors.  With ``return_attn`` the per-head attention
    matrices ``[..., heads, T, T]`` are returned alongside the output.
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"embedding dim {d} is not divisible by {heads} heads")
    t = x.shape[-2]
    lead = x.shape[:-2]
    dh = d // heads

    def project(wn, bn):
        y = linear(x, weights[wn], weights[bn])
        y = reshape(y, lead + (t, heads, dh))
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(y, perm)  # [..., H, T, dh]

    q = project("wq", "bq")
    k = project("wk", "bk")
    v = project("wv", "bv")
    nl = len(lead)
    kt = transpose(k, tuple(range(nl)) + (nl, nl + 2, nl + 1))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # [..., H, T, dh]
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, lead + (t, d))
    out = linear(ctx, weights["wo"], weights["bo"])
    return (out, attn.data) if return_attn else out


# ---------------------------------------------------------------------------
# validation and serialization
# ---------------------------------------------------------------------------

def check_finite(t, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what} holds {bad} non-finite value(s)")


_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODES = {v: k for k, v in _DTYPES.items()}


def write_tensor(stream: io.BufferedIOBase, arr: np.ndarray) -> None:
    """Rank and extents as little-endian u32, then raw little-endian scalars."""
    arr = np.asarray(arr)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(stream: io.BufferedIOBase, dtype) -> np.ndarray:
    dtype = np.dtype(dtype).newbyteorder("<")
    head = stream.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    ext = stream.read(4 * rank)
    if len(ext) != 4 * rank:
        raise EOFError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", ext)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    raw = stream.read(nbytes)
    if len(raw) != nbytes:
        raise EOFError(f"truncated tensor payload: expected {nbytes} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
