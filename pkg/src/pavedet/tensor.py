"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything downstream (attention blocks, the detector, the loss) is built
from the primitives here.  Data lives in numpy arrays; each recorded
operation knows how to push adjoints back to its inputs.  One tape per
thread; independent threads get independent tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class AutodiffError(RuntimeError):
    """Raised on tape misuse (non-scalar backward, missing grad reset...)."""


_tls = threading.local()

_debug_finite = False


def set_debug_finite(flag: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf (slow)."""
    global _debug_finite
    _debug_finite = flag


class _OpRecord:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops, replayed in reverse for adjoints."""

    def __init__(self):
        self.records: list[_OpRecord] = []

    def record(self, out: "Tensor", inputs: tuple, backward_fn: Callable) -> None:
        self.records.append(_OpRecord(out, inputs, backward_fn))


def _current_tape() -> Tape:
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = Tape()
        _tls.tape = tape
    return tape


def _clear_tape() -> None:
    _tls.tape = None


class no_grad:
    """Context manager disabling op recording (inference paths)."""

    def __enter__(self):
        self._prev = getattr(_tls, "grad_enabled", True)
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``requires_grad`` marks optimizable leaves; intermediate results are
    tracked automatically whenever any input is tracked.  ``retain_grad``
    additionally keeps the adjoint of a non-leaf (used by Grad-CAM).
    """

    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.retain_grad = False
        self._tracked = requires_grad

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._raise_item()

    def _raise_item(self):
        raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make_out(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the tape when tracking applies."""
    out = Tensor(data)
    if _debug_finite and not np.all(np.isfinite(data)):
        raise AutodiffError("non-finite values produced by a forward op")
    if _grad_enabled() and any(t._tracked for t in inputs):
        out._tracked = True
        _current_tape().record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g, grads):
        grads[0] = _unbroadcast(g, a.shape)
        grads[1] = _unbroadcast(g, b.shape)

    return _make_out(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g, grads):
        grads[0] = _unbroadcast(g, a.shape)
        grads[1] = _unbroadcast(-g, b.shape)

    return _make_out(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g, grads):
        grads[0] = _unbroadcast(g * b.data, a.shape)
        grads[1] = _unbroadcast(g * a.data, b.shape)

    return _make_out(data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g, grads):
        grads[0] = _unbroadcast(g / b.data, a.shape)
        grads[1] = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make_out(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, grads):
        grads[0] = -g

    return _make_out(-a.data, (a,), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def bw(g, grads):
        grads[0] = g * p * a.data ** (p - 1)

    return _make_out(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g, grads):
        grads[0] = g * data

    return _make_out(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g, grads):
        grads[0] = g / a.data

    return _make_out(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g, grads):
        grads[0] = g * 0.5 / data

    return _make_out(data, (a,), bw)


def atan(a: Tensor) -> Tensor:
    def bw(g, grads):
        grads[0] = g / (1.0 + a.data * a.data)

    return _make_out(np.arctan(a.data), (a,), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    data = np.maximum(a.data, b.data)

    def bw(g, grads):
        take_a = a.data >= b.data  # ties go to the first argument
        grads[0] = _unbroadcast(g * take_a, a.shape)
        grads[1] = _unbroadcast(g * ~take_a, b.shape)

    return _make_out(data, (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    data = np.minimum(a.data, b.data)

    def bw(g, grads):
        take_a = a.data <= b.data
        grads[0] = _unbroadcast(g * take_a, a.shape)
        grads[1] = _unbroadcast(g * ~take_a, b.shape)

    return _make_out(data, (a, b), bw)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def bw(g, grads):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        grads[0] = g * mask

    return _make_out(data, (a,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g, grads):
        grads[0] = g * data * (1.0 - data)

    return _make_out(data, (a,), bw)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def bw(g, grads):
        grads[0] = g * (s + a.data * s * (1.0 - s))

    return _make_out(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bw(g, grads):
        grads[0] = g * (a.data > 0)

    return _make_out(data, (a,), bw)


_ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "relu": relu}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, grads):
        if axis is None:
            grads[0] = np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True)
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
            grads[0] = np.broadcast_to(g2, a.shape).astype(a.data.dtype, copy=True)

    return _make_out(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.data.dtype)))


def amax(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Max over one axis; gradient routed to the first argmax (row-major)."""
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bw(g, grads):
        g2 = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), g2, axis=axis)
        grads[0] = out

    return _make_out(data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(g, grads):
        grads[0] = g.reshape(a.shape)

    return _make_out(data, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def bw(g, grads):
        grads[0] = np.transpose(g, inv)

    return _make_out(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(i != axis and s[i] != base[i] for i in range(len(s))):
            raise ShapeError(f"concat shape mismatch off axis {axis}: {shapes}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, grads):
        for i, piece in enumerate(np.split(g, splits, axis=axis)):
            grads[i] = piece

    return _make_out(data, tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back as zeros."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl]

    def bw(g, grads):
        out = np.zeros_like(a.data)
        out[sl] = g
        grads[0] = out

    return _make_out(data, (a,), bw)


def index_select0(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 by integer index, with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bw(g, grads):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        grads[0] = out

    return _make_out(data, (a,), bw)


def combine(kind: str, a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Spec-level combiner: ``concat``, ``add`` or broadcast multiply."""
    if kind == "concat":
        return concat([a, b], axis=axis)
    if kind == "add":
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return add(a, b)
    if kind == "mul_broadcast":
        for da, db in zip(a.shape[::-1], b.shape[::-1]):
            if db != 1 and db != da:
                raise ShapeError(f"broadcast mismatch: {a.shape} vs {b.shape}")
        return mul(a, b)
    raise ValueError(f"unknown combine kind {kind!r}")


# ---------------------------------------------------------------------------
# linear / conv / pooling
# ---------------------------------------------------------------------------

def linear(a: Tensor, weight: Tensor) -> Tensor:
    """Matrix product over the trailing axis: out[..., j] = sum_i a[..., i] W[j, i]."""
    if a.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: trailing dim {a.shape[-1]} != D_in {weight.shape[1]}")
    data = a.data @ weight.data.T

    def bw(g, grads):
        grads[0] = g @ weight.data
        grads[1] = g.reshape(-1, g.shape[-1]).T @ a.data.reshape(-1, a.shape[-1])

    return _make_out(data, (a, weight), bw)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv window {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride))
    cols = view.reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(gcols: np.ndarray, in_shape, kh, kw, stride, padding, oh, ow):
    n, c, h, w = in_shape
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        he = ki + stride * oh
        for kj in range(kw):
            we = kj + stride * ow
            gpad[:, :, ki:he:stride, kj:we:stride] += g6[:, :, ki, kj]
    if padding:
        gpad = gpad[:, :, padding:padding + h, padding:padding + w]
    return gpad


def conv2d(a: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    if a.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {a.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    n, cin, h, w = a.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input C={cin}, weight expects {cin_w}")
    if not np.all(np.isfinite(a.data)):
        raise AutodiffError("conv2d: non-finite input")
    cols, oh, ow = _im2col(a.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)  # [N, Cout, OH*OW] via broadcasting over N
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, oh, ow)

    inputs = (a, weight) if bias is None else (a, weight, bias)

    def bw(g, grads):
        gmat = g.reshape(n, cout, oh * ow)
        grads[1] = np.einsum("nop,nkp->ok", gmat, cols).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gmat)
        grads[0] = _col2im(gcols, a.shape, kh, kw, stride, padding, oh, ow)
        if bias is not None:
            grads[2] = gmat.sum(axis=(0, 2))

    return _make_out(out, inputs, bw)


def maxpool2d(a: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {a.shape}")
    n, c, h, w = a.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"maxpool2d window {k} does not fit {h}x{w} with padding {padding}")
    x = a.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=-np.inf)
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, k, k), (sn, sc, sh * stride, sw * stride, sh, sw))
    flat = view.reshape(n, c, oh, ow, k * k)
    idx = np.argmax(flat, axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g, grads):
        gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        ki, kj = np.divmod(idx, k)
        oy = np.arange(oh)[None, None, :, None] * stride
        ox = np.arange(ow)[None, None, None, :] * stride
        rows = (oy + ki).ravel()
        cols_ = (ox + kj).ravel()
        nn = np.repeat(np.arange(n), c * oh * ow)
        cc = np.tile(np.repeat(np.arange(c), oh * ow), n)
        np.add.at(gpad, (nn, cc, rows, cols_), g.ravel())
        grads[0] = gpad[:, :, padding:padding + h, padding:padding + w] if padding else gpad

    return _make_out(out, (a,), bw)


def pool(a: Tensor, kind: str, **kwargs) -> Tensor:
    """Spec-level pooling dispatcher over a 4-D NCHW tensor."""
    if a.ndim != 4:
        raise ShapeError(f"pool expects 4-D input, got {a.shape}")
    if a.shape[2] == 0 or a.shape[3] == 0:
        raise ShapeError("pool: empty spatial extent")
    if kind == "global_avg_spatial":
        return tmean(a, axis=(2, 3), keepdims=True)
    if kind == "global_max_spatial":
        n, c, h, w = a.shape
        return reshape(amax(reshape(a, (n, c, h * w)), axis=2, keepdims=True), (n, c, 1, 1))
    if kind == "avg_over_channels":
        return tmean(a, axis=1, keepdims=True)
    if kind == "max_over_channels":
        return amax(a, axis=1, keepdims=True)
    if kind == "maxpool2d":
        return maxpool2d(a, kwargs["k"], kwargs.get("stride", 1), kwargs.get("padding", 0))
    raise ValueError(f"unknown pool kind {kind!r}")


def upsample_nearest2x(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"upsample expects 4-D input, got {a.shape}")
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g, grads):
        n, c, h2, w2 = g.shape
        grads[0] = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))

    return _make_out(data, (a,), bw)


def batchnorm2d(a: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over N, H, W.

    ``running_mean``/``running_var`` are plain arrays mutated in train mode.
    """
    if a.ndim != 4 or a.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {a.shape} inconsistent with C={gamma.shape}")
    n, c, h, w = a.shape
    if training:
        if n * h * w < 2:
            raise ShapeError("batchnorm2d train mode needs N*H*W >= 2")
        mu = a.data.mean(axis=(0, 2, 3))
        var = a.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n * h * w) / max(n * h * w - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g, grads):
        grads[1] = (g * xhat).sum(axis=(0, 2, 3))
        grads[2] = g.sum(axis=(0, 2, 3))
        gs = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
        if training:
            m = n * h * w
            gmean = g.mean(axis=(0, 2, 3))[None, :, None, None]
            gxmean = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            grads[0] = gs * (g - gmean - xhat * gxmean)
        else:
            grads[0] = gs * g

    return _make_out(out, (a, gamma, beta), bw)


def bce_with_logits(logits: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    x = logits.data
    data = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g, grads):
        grads[0] = g * (1.0 / (1.0 + np.exp(-x)) - t)

    return _make_out(data, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf reachable from ``loss``.

    Walks the thread's tape in reverse registration order; the tape is
    consumed.  Calling again on a leaf whose grad was never reset raises.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward on non-scalar tensor of shape {loss.shape}")
    tape = getattr(_tls, "tape", None)
    if tape is None or not tape.records or not loss._tracked:
        raise AutodiffError("backward: loss is not attached to the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if rec.out.retain_grad and g is not None:
            rec.out.grad = g.copy()
        if g is None:
            continue
        local: dict[int, np.ndarray] = {}
        rec.backward_fn(g, local)
        for i, gi in local.items():
            t = rec.inputs[i]
            if not t._tracked:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.requires_grad:
                leaves[key] = t
    _clear_tape()
    for key, t in leaves.items():
        if t.grad is not None:
            raise AutodiffError(
                "backward: leaf already holds a gradient; call zero_grad first")
    for key, t in leaves.items():
        t.grad = grads[key]


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor,
                   h: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued.  Runs at the tensor's dtype; use float64
    inputs for meaningful tolerances.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    y = f(x64)
    if not np.all(np.isfinite(y.data)):
        raise AutodiffError("gradient_check: non-finite function value")
    backward(y)
    analytic = x64.grad.copy()
    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h if h is not None else 1e-5 * max(1.0, abs(orig))
        flat[i] = orig + step
        with _fresh_tape():
            fp = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig - step
        with _fresh_tape():
            fm = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


class _fresh_tape:
    """Isolate forward evaluations so probe passes do not pollute the tape."""

    def __enter__(self):
        self._saved = getattr(_tls, "tape", None)
        _tls.tape = None
        return self

    def __exit__(self, *exc):
        _tls.tape = self._saved
        return False
