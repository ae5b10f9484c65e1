"""Identity cross-entropy, batch-hard triplet loss and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class LossConfig:
    margin: float = 0.3
    lambda_tri: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"triplet margin must be non-negative, got {self.margin}")
        if self.lambda_tri < 0:
            raise ConfigError(f"lambda_tri must be non-negative, got {self.lambda_tri}")


def softmax_cross_entropy(logits, labels):
    """Mean over samples of ``-log softmax(p_i)[y_i]``.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / N``.
    """
    p = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = p.shape
    if num_classes < 2:
        raise InputError(f"need at least 2 classes, got {num_classes}")
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise InputError(f"label {bad} outside [0, {num_classes})")
    shifted = p - p.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_z
    loss = -log_prob[np.arange(n), labels].mean()
    grad = np.exp(log_prob)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def pairwise_euclidean(a, b) -> np.ndarray:
    """Non-squared Euclidean distances between the rows of ``a`` and ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def exact_pairwise_euclidean(f) -> np.ndarray:
    """Self-distances with a correctly rounded sum of squares (``math.fsum``) per pair.

    Slower than :func:`pairwise_euclidean` but independent of summation order,
    so the loss value is reproducible bit for bit.
    """
    f = np.asarray(f)
    n = f.shape[0]
    sq = f[:, None, :].astype(np.float64) - f[None, :, :]
    sq = sq * sq
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = math.sqrt(math.fsum(sq[i, j].tolist()))
    return dist


def hardest_pairs(dist, ids):
    """Index of the farthest positive and nearest negative for every anchor (first on ties)."""
    ids = np.asarray(ids)
    n = len(ids)
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    lonely = ~pos.any(axis=1)
    if lonely.any():
        raise InputError(f"identity {ids[np.argmax(lonely)]} has a single sample in the batch; "
                         f"every anchor needs a positive")
    if not neg.any(axis=1).all():
        raise InputError("batch contains a single identity; every anchor needs a negative")
    hp = np.where(pos, dist, -np.inf).argmax(axis=1)
    hn = np.where(neg, dist, np.inf).argmin(axis=1)
    return hp, hn


def batch_hard_triplet(features, ids, cfg: LossConfig = LossConfig()):
    """Sum over anchors of ``[d(a, hardest pos) - d(a, hardest neg) + margin]_+``.

    Returns ``(loss, dfeatures)``. The subgradient is zero at the hinge kink
    and for coincident points.
    """
    f = np.asarray(features)
    n = f.shape[0]
    dist = exact_pairwise_euclidean(f)
    hp, hn = hardest_pairs(dist, ids)
    rows = np.arange(n)
    dp = dist[rows, hp]
    dn = dist[rows, hn]
    terms = dp - dn + cfg.margin
    loss = math.fsum(float(t) for t in terms if t > 0)
    dp, dn = dp.astype(f.dtype), dn.astype(f.dtype)

    grad = np.zeros_like(f)
    active = terms > 0
    if active.any():
        a = rows[active]
        with np.errstate(invalid="ignore", divide="ignore"):
            up = (f[a] - f[hp[a]]) / dp[a][:, None]
            un = (f[a] - f[hn[a]]) / dn[a][:, None]
        up[~(dp[a] > 0)] = 0.0
        un[~(dn[a] > 0)] = 0.0
        np.add.at(grad, a, up - un)
        np.add.at(grad, hp[a], -up)
        np.add.at(grad, hn[a], un)
    return loss, grad


def total_loss(cls: float, tri: float, cfg: LossConfig = LossConfig()) -> float:
    """``cls + lambda_tri * tri``."""
    return cls + cfg.lambda_tri * tri
