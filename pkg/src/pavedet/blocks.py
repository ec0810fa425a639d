"""Detector building blocks: CBS, bottleneck, C3 (plain and attention-
modified), SPPF, plus the small parameter-container machinery they share.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cbam import CbamBlock, ConfigError, cbam_forward
from .tensor import Tensor


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def iter_params(obj, prefix: str = ""):
    """Yield (name, Tensor) for every parameter reachable from ``obj``.

    Walks plain attribute dicts recursively; container classes need no
    registration beyond living in this package.
    """
    for name, val in vars(obj).items():
        full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
        if isinstance(val, Tensor):
            yield full, val
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if _is_container(item):
                    yield from iter_params(item, f"{full}.{i}")
        elif _is_container(val):
            yield from iter_params(val, full)


def iter_buffers(obj, prefix: str = ""):
    """Yield (name, ndarray) for every non-learned state array (BN stats)."""
    for name, val in vars(obj).items():
        full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
        if isinstance(val, np.ndarray):
            yield full, val
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if _is_container(item):
                    yield from iter_buffers(item, f"{full}.{i}")
        elif _is_container(val):
            yield from iter_buffers(val, full)


def _is_container(val) -> bool:
    return hasattr(val, "__dict__") and type(val).__module__.startswith("pavedet")


class Conv2dParams:
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 bias: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        self.weight = Tensor(_fan_in_uniform(rng, (c_out, c_in, k, k), fan_in).astype(dtype),
                             requires_grad=True)
        self.bias = (Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
                     if bias else None)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2dParams:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, self.momentum, self.eps)


class CBS:
    """Convolution + batch norm + SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.conv = Conv2dParams(c_in, c_out, k, stride, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2dParams(c_out, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.silu(self.bn(self.conv(x), training))


class Bottleneck:
    """1x1 then 3x3 CBS; residual add when channel counts allow it."""

    def __init__(self, c_in: int, c_out: int, rng=None, dtype=np.float32):
        self.cv1 = CBS(c_in, c_out, 1, rng=rng, dtype=dtype)
        self.cv2 = CBS(c_out, c_out, 3, rng=rng, dtype=dtype)
        self.residual = c_in == c_out

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.cv2(self.cv1(x, training), training)
        return T.add(x, y) if self.residual else y


class C3:
    """Cross-stage block: bottleneck branch and shortcut branch, merged."""

    def __init__(self, c_in: int, c_out: int, n: int = 1, rng=None, dtype=np.float32):
        c_mid = c_out // 2
        self.cv1 = CBS(c_in, c_mid, 1, rng=rng, dtype=dtype)
        self.cv2 = CBS(c_in, c_mid, 1, rng=rng, dtype=dtype)
        self.blocks = [Bottleneck(c_mid, c_mid, rng=rng, dtype=dtype) for _ in range(n)]
        self.cv3 = CBS(2 * c_mid, c_out, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        a = self.cv1(x, training)
        for blk in self.blocks:
            a = blk(a, training)
        b = self.cv2(x, training)
        return self.cv3(T.concat([a, b], axis=1), training)


class C3Cbam:
    """C3 with the first convolution replaced by an attention block.

    The attention branch keeps the input channel count, runs through the
    bottlenecks, and is concatenated with two parallel 1x1 CBS shortcuts
    before the closing projection.
    """

    def __init__(self, c_in: int, c_out: int, n: int = 1, reduction: int = 16,
                 rng=None, dtype=np.float32):
        c_mid = c_out // 2
        self.cbam = CbamBlock(c_in, reduction, rng=rng, dtype=dtype)
        self.blocks = [Bottleneck(c_in, c_in, rng=rng, dtype=dtype) for _ in range(n)]
        self.cv1 = CBS(c_in, c_mid, 1, rng=rng, dtype=dtype)
        self.cv2 = CBS(c_in, c_mid, 1, rng=rng, dtype=dtype)
        self.cv3 = CBS(c_in + 2 * c_mid, c_out, 1, rng=rng, dtype=dtype)
        self.fixed_gate: float | None = None  # debug hook: replace CBAM by a constant

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if self.fixed_gate is None:
            a = cbam_forward(x, self.cbam)
        else:
            a = T.mul(x, Tensor(np.asarray(self.fixed_gate, dtype=x.dtype)))
        for blk in self.blocks:
            a = blk(a, training)
        b1 = self.cv1(x, training)
        b2 = self.cv2(x, training)
        return self.cv3(T.concat([a, b1, b2], axis=1), training)


class SPPF:
    """Chained stride-1 max pools concatenated to widen the receptive field."""

    def __init__(self, c_in: int, c_out: int, k: int = 5, rng=None, dtype=np.float32):
        c_mid = c_in // 2
        self.cv1 = CBS(c_in, c_mid, 1, rng=rng, dtype=dtype)
        self.cv2 = CBS(4 * c_mid, c_out, 1, rng=rng, dtype=dtype)
        self.k = k

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.cv1(x, training)
        p1 = T.maxpool2d(y, self.k, 1, self.k // 2)
        p2 = T.maxpool2d(p1, self.k, 1, self.k // 2)
        p3 = T.maxpool2d(p2, self.k, 1, self.k // 2)
        return self.cv2(T.concat([y, p1, p2, p3], axis=1), training)
