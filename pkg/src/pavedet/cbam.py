"""Channel and spatial attention gating of feature maps.

A block first scales each channel by a gate computed from pooled spatial
descriptors pushed through a shared two-layer MLP, then scales each spatial
position by a gate computed from channel-pooled descriptors pushed through
a 7x7 convolution.  Both gates are sigmoids, so with all parameters at zero
the block scales its input by exactly 0.25.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised when attention parameters do not fit the feature map."""


class ChannelAttentionParams:
    """Shared bias-free MLP weights for the channel gate.

    Hidden width is C // reduction; the same weights serve the average-pool
    and max-pool branches.
    """

    def __init__(self, channels: int, reduction: int = 16, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        reduction = min(reduction, channels)  # keep hidden width >= 1
        if channels % reduction != 0:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        hidden = channels // reduction
        if rng is None:
            self.w0 = Tensor(np.zeros((hidden, channels), dtype=dtype), requires_grad=True)
            self.w1 = Tensor(np.zeros((channels, hidden), dtype=dtype), requires_grad=True)
        else:
            self.w0 = Tensor(_fan_in_uniform(rng, (hidden, channels), channels).astype(dtype),
                             requires_grad=True)
            self.w1 = Tensor(_fan_in_uniform(rng, (channels, hidden), hidden).astype(dtype),
                             requires_grad=True)


class SpatialAttentionParams:
    """7x7 convolution over the 2-channel [avg; max] descriptor stack."""

    KERNEL = 7
    PADDING = 3

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32):
        shape = (1, 2, self.KERNEL, self.KERNEL)
        if rng is None:
            self.kernel = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        else:
            fan_in = 2 * self.KERNEL * self.KERNEL
            self.kernel = Tensor(_fan_in_uniform(rng, shape, fan_in).astype(dtype),
                                 requires_grad=True)
        self.bias = None  # disabled so zero parameters give the 0.5 neutral gate


class CbamBlock:
    def __init__(self, channels: int, reduction: int = 16,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.channel = ChannelAttentionParams(channels, reduction, rng, dtype)
        self.spatial = SpatialAttentionParams(rng, dtype)


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def channel_attention(f: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0,1), shape [N, C, 1, 1]."""
    n, c = f.shape[0], f.shape[1]
    if c != p.channels:
        raise ConfigError(f"channel attention built for C={p.channels}, got C={c}")
    avg = T.reshape(T.pool(f, "global_avg_spatial"), (n, c))
    mx = T.reshape(T.pool(f, "global_max_spatial"), (n, c))
    mlp = lambda d: T.linear(T.relu(T.linear(d, p.w0)), p.w1)
    gate = T.sigmoid(mlp(avg) + mlp(mx))
    return T.reshape(gate, (n, c, 1, 1))


def spatial_attention(f_prime: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Per-position gate in (0,1), shape [N, 1, H, W]."""
    avg = T.pool(f_prime, "avg_over_channels")
    mx = T.pool(f_prime, "max_over_channels")
    stacked = T.concat([avg, mx], axis=1)
    logits = T.conv2d(stacked, p.kernel, bias=p.bias, stride=1, padding=p.PADDING)
    return T.sigmoid(logits)


def cbam_forward(f: Tensor, block: CbamBlock) -> Tensor:
    """Refined feature map: spatial gate applied after the channel gate."""
    f_prime = T.combine("mul_broadcast", f, channel_attention(f, block.channel))
    return T.combine("mul_broadcast", f_prime, spatial_attention(f_prime, block.spatial))
