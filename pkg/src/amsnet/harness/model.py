"""Small bottleneck CNN with AMS insertion points, an embedding head and an identity classifier."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..ams import AmsBlock, VariantKind, insert_ams
from ..core import (Layer, avgpool2_backward, avgpool2_forward, conv2d_backward,
                    conv2d_forward)
from ..norm import WhitenConfig


def he_normal(rng, shape, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Layer):
    def __init__(self, cin, cout, k, rng, gain=1.0, bias=True):
        super().__init__()
        self.add_param("weight", he_normal(rng, (cout, cin, k, k), gain))
        if bias:
            self.add_param("bias", np.zeros(cout))
        self._cache = None

    def forward(self, x):
        y, self._cache = conv2d_forward(x, self.params["weight"], self.params.get("bias"))
        return y

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.grads["weight"] += dw
        if db is not None:
            self.grads["bias"] += db
        return dx


class BatchNorm2d(Layer):
    """Batch statistics while training, running averages in eval mode."""

    def __init__(self, channels, epsilon=1e-5, momentum=0.1):
        super().__init__()
        self.epsilon, self.momentum = epsilon, momentum
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not self.training:
            mean = self.buffers["running_mean"][None, :, None, None]
            inv = 1.0 / np.sqrt(self.buffers["running_var"][None, :, None, None] + self.epsilon)
            self._cache = (None, inv)
            return (x - mean) * inv * gamma + beta
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv
        m = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm *= 1 - m
        rm += m * mean.reshape(-1)
        rv *= 1 - m
        rv += m * var.reshape(-1) * (n / max(n - 1, 1))
        self._cache = (xhat, inv)
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv = self._cache
        gamma = self.params["gamma"][None, :, None, None]
        if xhat is None:
            return dout * gamma * inv
        self.grads["gamma"] += (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma
        return inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class AvgPool2(Layer):
    def forward(self, x):
        self._shape = x.shape
        return avgpool2_forward(x)

    def backward(self, dout):
        return avgpool2_backward(dout, self._shape)


class Bottleneck(Layer):
    """1x1 reduce -> 3x3 -> 1x1 expand (each followed by BN), identity shortcut, ReLU after the sum."""

    def __init__(self, channels, rng, ratio=4, residual_gain=0.5):
        super().__init__()
        mid = max(1, channels // ratio)
        self.out_channels = channels
        self._branch = [
            self.add("reduce", Conv2d(channels, mid, 1, rng, bias=False)),
            self.add("bn1", BatchNorm2d(mid)),
            self.add("relu1", ReLU()),
            self.add("conv", Conv2d(mid, mid, 3, rng, bias=False)),
            self.add("bn2", BatchNorm2d(mid)),
            self.add("relu2", ReLU()),
            self.add("expand", Conv2d(mid, channels, 1, rng, bias=False)),
            self.add("bn3", BatchNorm2d(channels)),
        ]
        self.children["bn3"].params["gamma"][...] = residual_gain
        self.relu_out = self.add("relu_out", ReLU())

    def forward(self, x):
        h = x
        for layer in self._branch:
            h = layer.forward(h)
        return self.relu_out(x + h)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dh = d
        for layer in reversed(self._branch):
            dh = layer.backward(dh)
        return d + dh


class BackboneStage(Layer):
    """Optional transition (2x2 average pool, 1x1 projection, BN, ReLU) then one bottleneck."""

    def __init__(self, cin, cout, rng, downsample, ratio=4):
        super().__init__()
        self.out_channels = cout
        self._seq = []
        if downsample:
            self._seq.append(self.add("pool", AvgPool2()))
        if downsample or cin != cout:
            self._seq.append(self.add("proj", Conv2d(cin, cout, 1, rng, bias=False)))
            self._seq.append(self.add("proj_bn", BatchNorm2d(cout)))
            self._seq.append(self.add("proj_relu", ReLU()))
        self._seq.append(self.add("block", Bottleneck(cout, rng, ratio)))

    def forward(self, x):
        for layer in self._seq:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self._seq):
            dout = layer.backward(dout)
        return dout


class Linear(Layer):
    def __init__(self, din, dout, rng, std=0.01):
        super().__init__()
        self.add_param("weight", rng.normal(0.0, std, size=(dout, din)))

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"].T

    def backward(self, dout):
        self.grads["weight"] += dout.T @ self._x
        return dout @ self.params["weight"]


class ReidNet(Layer):
    """Stem (conv, BN, ReLU) -> four stages (AMS after the placed ones) -> global average pool.

    ``forward`` returns ``(embedding, logits)``; ``backward`` takes the
    gradients of both and returns the input gradient.
    """

    def __init__(self, num_classes: int, widths: Sequence[int] = (32, 64, 128, 128),
                 variant: VariantKind = VariantKind("none"), placements: Sequence[int] = (1, 2, 3),
                 whiten_cfg: Optional[WhitenConfig] = None, reduction: int = 4, sa_kernel: int = 3,
                 in_epsilon: float = 1e-5, seed: int = 0, in_channels: int = 3):
        super().__init__()
        rng = np.random.default_rng([seed, 42])
        self.variant = variant
        self.widths = tuple(widths)
        self.stem = self.add("stem", Conv2d(in_channels, widths[0], 3, rng, bias=False))
        self.stem_bn = self.add("stem_bn", BatchNorm2d(widths[0]))
        self.stem_relu = self.add("stem_relu", ReLU())
        stages = []
        cin = widths[0]
        for i, w in enumerate(widths):
            stages.append(BackboneStage(cin, w, rng, downsample=i > 0))
            cin = w
        if variant.combination == "none":
            placements = ()
        whiten_cfg = whiten_cfg or WhitenConfig()
        ams_rng = np.random.default_rng([seed, 43])

        def factory(idx, channels):
            return AmsBlock.build(channels, variant, whiten_cfg, reduction, sa_kernel, in_epsilon, ams_rng)

        self.backbone = self.add("backbone", insert_ams(stages, placements, factory))
        self.classifier = self.add("classifier", Linear(widths[-1], num_classes, rng))
        self.warnings = self.backbone.warnings

    def embed(self, x):
        f = self.backbone.forward(self.stem_relu(self.stem_bn(self.stem(x))))
        self._fshape = f.shape
        return f.mean(axis=(2, 3))

    def forward(self, x):
        emb = self.embed(x)
        return emb, self.classifier.forward(emb)

    def backward(self, d_emb, d_logits):
        d = d_emb + self.classifier.backward(d_logits)
        B, C, H, W = self._fshape
        df = np.broadcast_to(d[:, :, None, None] / (H * W), self._fshape).astype(d.dtype)
        df = self.backbone.backward(df)
        return self.stem.backward(self.stem_bn.backward(self.stem_relu.backward(df)))

    def embed_batched(self, images, batch_size: int = 128, dtype=None):
        """Embeddings in eval mode (running BN statistics); restores the previous mode."""
        was_training = self.training
        self.eval()
        out = []
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            if dtype is not None:
                x = x.astype(dtype, copy=False)
            out.append(self.embed(x))
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.widths[-1]))
