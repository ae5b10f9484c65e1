"""CBAM-style channel and spatial attention.

Both blocks return ``mask * x`` with the mask squashed into (0, 1); the
residual addition that turns this into an enhancement happens in the AMS
block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Layer, as_array, conv2d_backward, conv2d_forward, max_with_argmax, sigmoid
from .errors import ConfigError, ShapeError


@dataclass
class ChannelAttentionParams:
    mlp_w1: np.ndarray  # (C // r, C)
    mlp_w2: np.ndarray  # (C, C // r)
    reduction: int = 1

    def __post_init__(self):
        self.mlp_w1 = np.asarray(self.mlp_w1)
        self.mlp_w2 = np.asarray(self.mlp_w2)
        hidden, channels = self.mlp_w1.shape
        if self.reduction < 1 or channels % self.reduction:
            raise ConfigError(f"reduction r={self.reduction} must divide C={channels}")
        if hidden != channels // self.reduction or self.mlp_w2.shape != (channels, hidden):
            raise ShapeError(f"MLP weights {self.mlp_w1.shape}/{self.mlp_w2.shape} "
                             f"inconsistent with C={channels}, r={self.reduction}")

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @classmethod
    def init(cls, channels: int, reduction: int = 16, rng=None, scale: float = 1.0):
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"reduction r={reduction} must divide C={channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        w1 = rng.normal(0.0, scale * np.sqrt(2.0 / channels), size=(hidden, channels))
        w2 = rng.normal(0.0, scale * np.sqrt(1.0 / hidden), size=(channels, hidden))
        return cls(w1, w2, reduction)


@dataclass
class SpatialAttentionParams:
    conv_kernel: np.ndarray  # (1, 2, k, k)

    def __post_init__(self):
        self.conv_kernel = np.asarray(self.conv_kernel)
        shape = self.conv_kernel.shape
        if len(shape) != 4 or shape[:2] != (1, 2) or shape[2] != shape[3]:
            raise ShapeError(f"spatial attention kernel must be (1, 2, k, k), got {shape}")
        if shape[2] % 2 == 0:
            raise ConfigError(f"kernel size k={shape[2]} must be odd")

    @property
    def k(self) -> int:
        return self.conv_kernel.shape[2]

    @classmethod
    def init(cls, k: int = 7, rng=None, scale: float = 1.0):
        if k % 2 == 0 or k < 1:
            raise ConfigError(f"kernel size k={k} must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, scale * np.sqrt(1.0 / (2 * k * k)), size=(1, 2, k, k))
        return cls(w)


def _mlp(v, w1, w2):
    h = v @ w1.T
    a = np.maximum(h, 0)
    return a @ w2.T, (v, h, a)


def channel_attention_forward(x, p: ChannelAttentionParams):
    x = as_array(x)
    B, C, H, W = x.shape
    if C != p.channels:
        raise ShapeError(f"channel attention built for C={p.channels}, input has C={C}")
    w1 = p.mlp_w1.astype(x.dtype, copy=False)
    w2 = p.mlp_w2.astype(x.dtype, copy=False)
    avg = x.mean(axis=(2, 3))
    mx, argmask = max_with_argmax(x, (2, 3))
    o_avg, c_avg = _mlp(avg, w1, w2)
    o_max, c_max = _mlp(mx.reshape(B, C), w1, w2)
    mask = sigmoid(o_avg + o_max)
    out = mask[:, :, None, None] * x
    return out, (x, w1, w2, argmask, c_avg, c_max, mask)


def channel_attention_backward(dout, cache):
    """Return ``(dx, dw1, dw2)``."""
    x, w1, w2, argmask, c_avg, c_max, mask = cache
    B, C, H, W = x.shape
    dmask = (dout * x).sum(axis=(2, 3))
    dz = dmask * mask * (1.0 - mask)
    dw1 = np.zeros_like(w1)
    dw2 = np.zeros_like(w2)
    dvs = []
    for v, h, a in (c_avg, c_max):
        dw2 += dz.T @ a
        dh = (dz @ w2) * (h > 0)
        dw1 += dh.T @ v
        dvs.append(dh @ w1)
    dx = dout * mask[:, :, None, None]
    dx = dx + dvs[0][:, :, None, None] / (H * W) + argmask * dvs[1][:, :, None, None]
    return dx, dw1, dw2


def channel_attention(x, p: ChannelAttentionParams) -> np.ndarray:
    """``sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))) * x`` with a shared bias-free MLP."""
    return channel_attention_forward(x, p)[0]


def spatial_attention_forward(x, p: SpatialAttentionParams):
    x = as_array(x)
    avg = x.mean(axis=1, keepdims=True)
    mx, argmask = max_with_argmax(x, (1,))
    pooled = np.concatenate([avg, mx], axis=1)
    z, conv_cache = conv2d_forward(pooled, p.conv_kernel.astype(x.dtype, copy=False))
    mask = sigmoid(z)
    return mask * x, (x, argmask, conv_cache, mask)


def spatial_attention_backward(dout, cache):
    """Return ``(dx, dkernel)``."""
    x, argmask, conv_cache, mask = cache
    C = x.shape[1]
    dmask = (dout * x).sum(axis=1, keepdims=True)
    dz = dmask * mask * (1.0 - mask)
    dpooled, dk, _ = conv2d_backward(dz, conv_cache)
    dx = dout * mask + dpooled[:, 0:1] / C + argmask * dpooled[:, 1:2]
    return dx, dk


def spatial_attention(x, p: SpatialAttentionParams) -> np.ndarray:
    """``sigmoid(conv([mean_C(x); max_C(x)])) * x`` with same padding."""
    return spatial_attention_forward(x, p)[0]


class ChannelAttention(Layer):
    kind = "CA"

    def __init__(self, channels: int, reduction: int = 16, rng=None,
                 params: Optional[ChannelAttentionParams] = None):
        super().__init__()
        p = params or ChannelAttentionParams.init(channels, reduction, rng)
        self.reduction = p.reduction
        self.add_param("w1", p.mlp_w1)
        self.add_param("w2", p.mlp_w2)
        self._cache = None

    @property
    def attention_params(self) -> ChannelAttentionParams:
        return ChannelAttentionParams(self.params["w1"], self.params["w2"], self.reduction)

    def forward(self, x):
        out, self._cache = channel_attention_forward(x, self.attention_params)
        return out

    def backward(self, dout):
        dx, dw1, dw2 = channel_attention_backward(dout, self._cache)
        self.grads["w1"] += dw1
        self.grads["w2"] += dw2
        return dx


class SpatialAttention(Layer):
    kind = "SA"

    def __init__(self, k: int = 7, rng=None, params: Optional[SpatialAttentionParams] = None):
        super().__init__()
        p = params or SpatialAttentionParams.init(k, rng)
        self.add_param("kernel", p.conv_kernel)
        self._cache = None

    @property
    def attention_params(self) -> SpatialAttentionParams:
        return SpatialAttentionParams(self.params["kernel"])

    def forward(self, x):
        out, self._cache = spatial_attention_forward(x, self.attention_params)
        return out

    def backward(self, dout):
        dx, dk = spatial_attention_backward(dout, self._cache)
        self.grads["kernel"] += dk
        return dx
