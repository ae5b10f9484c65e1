"""Instance normalization and group whitening with explicit backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .core import Layer, as_array, check_symmetric
from .errors import ConfigError, InputError, NumericalError, ShapeError

# --------------------------------------------------------------------------
# instance normalization
# --------------------------------------------------------------------------


@dataclass
class InParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        if self.gamma.dtype.kind != "f":
            self.gamma = self.gamma.astype(np.float64)
        if self.beta.dtype.kind != "f":
            self.beta = self.beta.astype(np.float64)
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(f"gamma {self.gamma.shape} and beta {self.beta.shape} must be equal-length vectors")

    @classmethod
    def identity(cls, channels: int, epsilon: float = 1e-5) -> "InParams":
        return cls(np.ones(channels), np.zeros(channels), epsilon)


@dataclass
class NormStats:
    mean: np.ndarray  # (B, C)
    std: np.ndarray   # (B, C), biased estimator


def instance_norm(x, p: InParams) -> Tuple[np.ndarray, NormStats]:
    """``gamma * (x - mu) / (sigma + eps) + beta`` with per-(sample, channel) spatial stats.

    ``sigma`` is the population standard deviation over H*W and ``eps`` is
    added to it, not to the variance.
    """
    x = as_array(x)
    B, C, H, W = x.shape
    if H * W < 1:
        raise ShapeError("instance_norm needs at least one spatial position")
    if p.gamma.shape[0] != C:
        raise ShapeError(f"InParams has {p.gamma.shape[0]} channels, input has {C}")
    mu = x.mean(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=(2, 3), keepdims=True))
    xhat = (x - mu) / (sigma + p.epsilon)
    gamma = p.gamma.astype(x.dtype, copy=False).reshape(1, C, 1, 1)
    beta = p.beta.astype(x.dtype, copy=False).reshape(1, C, 1, 1)
    y = gamma * xhat + beta
    return y, NormStats(mu.reshape(B, C), sigma.reshape(B, C))


def instance_norm_backward(dy, x, p: InParams, stats: NormStats):
    """Return ``(dx, dgamma, dbeta)``."""
    x = as_array(x)
    B, C, H, W = x.shape
    n = H * W
    mu = stats.mean.reshape(B, C, 1, 1)
    sigma = stats.std.reshape(B, C, 1, 1)
    d = sigma + p.epsilon
    xc = x - mu
    xhat = xc / d
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * p.gamma.astype(x.dtype, copy=False).reshape(1, C, 1, 1)
    # xhat = xc / (sigma + eps); sigma depends on x through the centred values only
    dd = -(dxhat * xc).sum(axis=(2, 3), keepdims=True) / d ** 2
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    dsigma_dx = np.where(sigma > 0, xc / (n * safe_sigma), 0.0)
    dx = (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)) / d + dd * dsigma_dx
    return dx, dgamma, dbeta


class InstanceNorm(Layer):
    def __init__(self, channels: int, epsilon: float = 1e-5):
        super().__init__()
        self.epsilon = epsilon
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self._cache = None

    @property
    def in_params(self) -> InParams:
        return InParams(self.params["gamma"], self.params["beta"], self.epsilon)

    def forward(self, x):
        p = self.in_params
        y, stats = instance_norm(x, p)
        self._cache = (x, p, stats)
        return y

    def backward(self, dout):
        x, p, stats = self._cache
        dx, dgamma, dbeta = instance_norm_backward(dout, x, p, stats)
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        return dx


# --------------------------------------------------------------------------
# group whitening
# --------------------------------------------------------------------------

NEWTON_SCHULZ = "newton_schulz"
EIGEN_EXACT = "eigen_exact"


@dataclass
class WhitenConfig:
    group_count: int = 8
    epsilon_w: float = 1e-3
    ns_iterations: int = 7
    mode: str = NEWTON_SCHULZ
    # None picks a mode/precision dependent threshold, see residual_threshold()
    residual_tol: Optional[float] = None

    def __post_init__(self):
        if int(self.group_count) < 1:
            raise ConfigError(f"group_count must be a positive integer, got {self.group_count}")
        if self.epsilon_w <= 0:
            raise ConfigError(f"epsilon_w must be positive, got {self.epsilon_w}")
        if int(self.ns_iterations) < 1:
            raise ConfigError(f"ns_iterations must be positive, got {self.ns_iterations}")
        if self.mode not in (NEWTON_SCHULZ, EIGEN_EXACT):
            raise ConfigError(f"unknown whitening mode {self.mode!r}")

    def residual_threshold(self, dtype) -> float:
        if self.residual_tol is not None:
            return self.residual_tol
        if self.mode == NEWTON_SCHULZ:
            # NS on a trace-normalised SPD matrix keeps every eigen-residual in [-1, 0]
            return 1.0
        return 1e-6 if np.dtype(dtype) == np.float64 else 1e-2


@dataclass
class WhitenStats:
    group_view: Tuple[int, int, int]
    mu_g: np.ndarray         # (B, g)
    sigma_g: np.ndarray      # (B, g, g), ridge included
    inv_sqrt: np.ndarray     # (B, g, g)
    residual: float
    centered: np.ndarray = field(repr=False, default=None)
    ns_cache: tuple = field(repr=False, default=None)


def check_groups(channels: int, g: int):
    if g < 1 or channels % g != 0:
        valid = [d for d in range(1, channels + 1) if channels % d == 0]
        raise ConfigError(f"group count g={g} does not divide C={channels}; valid choices: {valid}")


def group_partition(x, g: int) -> np.ndarray:
    """Reshape (B, C, H, W) into the (B, g, c*H*W) group view. No values change."""
    x = as_array(x)
    B, C, H, W = x.shape
    check_groups(C, g)
    return x.reshape(B, g, (C // g) * H * W)


def group_merge(v, dims) -> np.ndarray:
    """Inverse of :func:`group_partition`."""
    v = np.asarray(v)
    B, C, H, W = dims
    if v.ndim != 3 or v.shape[0] != B or v.shape[1] * v.shape[2] != C * H * W or C % v.shape[1]:
        raise ShapeError(f"group view {v.shape} is inconsistent with dims {tuple(dims)}")
    return v.reshape(B, C, H, W)


def _eye_like(s):
    g = s.shape[-1]
    return np.broadcast_to(np.eye(g, dtype=s.dtype), s.shape)


def newton_schulz_forward(s: np.ndarray, iterations: int):
    """Coupled Newton-Schulz iteration for ``s**-1/2`` on a (B, g, g) SPD batch.

    The matrix is divided by its trace first so the iteration converges.
    Returns ``(R, cache)``; the cache holds every intermediate so the
    unrolled iteration can be differentiated exactly.
    """
    eye = _eye_like(s)
    t = np.trace(s, axis1=1, axis2=2).reshape(-1, 1, 1)
    a = s / t
    y, z = a, eye
    steps = []
    for _ in range(iterations):
        tmat = 0.5 * (3.0 * eye - z @ y)
        steps.append((y, z, tmat))
        y, z = y @ tmat, tmat @ z
    r = z / np.sqrt(t)
    return r, (s, t, a, z, steps)


def newton_schulz_backward(dr: np.ndarray, cache) -> np.ndarray:
    s, t, a, zk, steps = cache
    sqrt_t = np.sqrt(t)
    dz = dr / sqrt_t
    dt = -0.5 * (dr * zk).sum(axis=(1, 2), keepdims=True) / (t * sqrt_t)
    dy = np.zeros_like(dz)
    for y, z, tmat in reversed(steps):
        # y' = y T, z' = T z, T = (3I - z y) / 2
        dtm = y.swapaxes(1, 2) @ dy + dz @ z.swapaxes(1, 2)
        dy_prev = dy @ tmat.swapaxes(1, 2) - 0.5 * z.swapaxes(1, 2) @ dtm
        dz_prev = tmat.swapaxes(1, 2) @ dz - 0.5 * dtm @ y.swapaxes(1, 2)
        dy, dz = dy_prev, dz_prev
    da = dy  # z_0 is the constant identity
    dt = dt - (da * s).sum(axis=(1, 2), keepdims=True) / t ** 2
    ds = da / t + dt * _eye_like(s)
    return ds


def eigen_inverse_sqrt(s: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(s)
    if np.any(lam <= 0):
        raise NumericalError(f"matrix is not positive definite (min eigenvalue {lam.min():.3e})",
                             stage="inverse_sqrt")
    return (vec * (1.0 / np.sqrt(lam))[:, None, :]) @ vec.swapaxes(1, 2)


def whitening_residual(r: np.ndarray, s: np.ndarray) -> float:
    """``max |R s R - I|`` over the batch."""
    if r.size == 0:
        return 0.0
    return float(np.max(np.abs(r @ s @ r - _eye_like(s))))


def inverse_sqrt(s, cfg: WhitenConfig, return_cache: bool = False):
    """``s**-1/2`` for each slice of a symmetric positive definite (B, g, g) batch.

    ``eigen_exact`` uses a symmetric eigendecomposition; ``newton_schulz``
    runs ``cfg.ns_iterations`` coupled Newton-Schulz steps. Raises
    NumericalError on non-finite input/output or when the whitening residual
    exceeds the configured threshold.
    """
    s = np.asarray(s)
    if not np.isfinite(s).all():
        raise NumericalError("covariance has non-finite entries", stage="inverse_sqrt")
    s = check_symmetric(s)
    cache = None
    if cfg.mode == EIGEN_EXACT:
        r = eigen_inverse_sqrt(s)
    else:
        r, cache = newton_schulz_forward(s, cfg.ns_iterations)
    if not np.isfinite(r).all():
        raise NumericalError("inverse square root is non-finite", stage="inverse_sqrt")
    res = whitening_residual(r, s)
    if not np.isfinite(res) or res > cfg.residual_threshold(s.dtype):
        raise NumericalError(f"inverse square root failed to converge ({cfg.mode})",
                             stage="inverse_sqrt", residual=res)
    if return_cache:
        return r, res, cache
    return r


def group_whiten(x, cfg: WhitenConfig) -> Tuple[np.ndarray, WhitenStats]:
    """Per-sample group whitening: centre the g group rows, decorrelate them with
    ``(cov + eps_w I)**-1/2`` and reshape back. No learnable parameters."""
    x = as_array(x)
    B, C, H, W = x.shape
    g = int(cfg.group_count)
    fg = group_partition(x, g)
    m = fg.shape[2]
    if m < 2:
        raise InputError(f"group whitening needs c*H*W >= 2 columns, got {m}")
    mu = fg.mean(axis=2, keepdims=True)
    xc = fg - mu
    sigma = xc @ xc.swapaxes(1, 2) / m
    sigma = 0.5 * (sigma + sigma.swapaxes(1, 2)) + cfg.epsilon_w * np.eye(g, dtype=x.dtype)
    r, res, cache = inverse_sqrt(sigma, cfg, return_cache=True)
    y = r @ xc
    stats = WhitenStats((B, g, m), mu[:, :, 0], sigma, r, res, centered=xc, ns_cache=cache)
    return group_merge(y, x.shape), stats


def group_whiten_backward(dy, stats: WhitenStats, cfg: WhitenConfig) -> np.ndarray:
    """Input gradient of :func:`group_whiten`.

    Gradients always flow through the Newton-Schulz composition; in eigen
    mode the iteration is run on the stored covariance just for this purpose.
    """
    B, g, m = stats.group_view
    dims = dy.shape
    dyg = np.asarray(dy).reshape(B, g, m)
    xc = stats.centered
    r = stats.inv_sqrt
    cache = stats.ns_cache
    if cache is None:
        _, cache = newton_schulz_forward(stats.sigma_g, cfg.ns_iterations)
    dr = dyg @ xc.swapaxes(1, 2)
    dxc = r.swapaxes(1, 2) @ dyg
    ds = newton_schulz_backward(dr, cache)
    dxc = dxc + (ds + ds.swapaxes(1, 2)) @ xc / m
    dfg = dxc - dxc.mean(axis=2, keepdims=True)
    return dfg.reshape(dims)


class GroupWhiten(Layer):
    def __init__(self, cfg: WhitenConfig):
        super().__init__()
        self.cfg = cfg
        self._stats = None
        self.last_residual = None

    def forward(self, x):
        y, stats = group_whiten(x, self.cfg)
        self._stats = stats
        self.last_residual = stats.residual
        return y

    def backward(self, dout):
        return group_whiten_backward(dout, self._stats, self.cfg)
