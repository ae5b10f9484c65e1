"""Adam with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np


def lr_at(epoch: float, cfg) -> float:
    """Learning rate at (possibly fractional) ``epoch``.

    Linear warmup from ``base_lr / 100`` to ``base_lr`` over ``warmup_epochs``,
    then cosine decay reaching ``final_lr`` at the last epoch index
    (``epochs - 1``); clamped to ``final_lr`` afterwards.
    """
    base, final = cfg.base_lr, cfg.final_lr
    warm = cfg.warmup_epochs
    last = cfg.epochs - 1
    if warm > 0 and epoch < warm:
        start = base / 100.0
        return start + (base - start) * epoch / warm
    if epoch >= last:
        return final
    span = last - warm
    frac = (epoch - warm) / span
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * frac))


def adam_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One in-place Adam step (``t`` is the 1-based step count); decay is decoupled from the moments."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)
    return param


class Adam:
    def __init__(self, model, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=5e-4):
        self.model = model
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = OrderedDict()
        self.v = OrderedDict()
        for name, owner, local in model.named_parameters():
            self.m[name] = np.zeros_like(owner.params[local])
            self.v[name] = np.zeros_like(owner.params[local])

    def step(self, lr: float):
        self.t += 1
        for name, owner, local in self.model.named_parameters():
            adam_update(owner.params[local], owner.grads[local], self.m[name], self.v[name],
                        self.t, lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def state(self):
        out = OrderedDict()
        for name in self.m:
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        return out

    def load_state(self, tensors, t: int):
        self.t = int(t)
        for name in self.m:
            self.m[name] = np.array(tensors["adam.m." + name])
            self.v[name] = np.array(tensors["adam.v." + name])
