"""Rank-4 tensors, primitive ops with explicit backward functions, gradient checking.

Arrays follow the (B, C, H, W) layout throughout. Every primitive comes as a
forward/backward pair; the ``Tensor4``-level wrappers return the output
together with a closure that accumulates partials into the operands' ``grad``
buffers, while the raw array kernels (``conv2d_forward`` / ``conv2d_backward``
and friends) are what the layers call on the hot path.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError

AXIS_NAMES = {"B": 0, "C": 1, "H": 2, "W": 3}


@dataclass
class Tensor4:
    """Dense (B, C, H, W) array with an optional gradient buffer of the same shape."""

    data: np.ndarray
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {self.data.shape}")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def zeros(cls, dims, dtype=np.float64) -> "Tensor4":
        return cls(np.zeros(dims, dtype=dtype))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


def as_array(x) -> np.ndarray:
    """Unwrap a Tensor4 (or anything array-like) to an ndarray without copying."""
    if isinstance(x, Tensor4):
        return x.data
    return np.asarray(x)


def check_symmetric(m: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
    """Validate a (B, g, g) matrix batch and return its symmetrized copy."""
    m = np.asarray(m)
    if tol is None:
        tol = 1e-9 if m.dtype == np.float64 else 1e-5
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise ShapeError(f"expected a (B, g, g) matrix batch, got {m.shape}")
    sym = 0.5 * (m + m.swapaxes(1, 2))
    asym = np.max(np.abs(m - sym)) if m.size else 0.0
    if asym >= tol * max(1.0, float(np.max(np.abs(m))) if m.size else 1.0):
        raise ShapeError(f"matrix batch is not symmetric (max asymmetry {asym:.3e})")
    return sym


# --------------------------------------------------------------------------
# elementwise / reductions on Tensor4
# --------------------------------------------------------------------------

def _broadcast_kind(a_shape, b_shape):
    if a_shape == b_shape:
        return "same"
    B, C, H, W = a_shape
    if b_shape == (1, C, 1, 1):
        return "channel"
    if b_shape == (B, 1, H, W):
        return "position"
    raise ShapeError(f"cannot broadcast {b_shape} against {a_shape}; "
                     f"only (1,C,1,1) and (B,1,H,W) operands are allowed")


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def elementwise(op: str, a: Tensor4, b: Union[Tensor4, float, None] = None):
    """Apply ``op`` in {add, sub, mul, sigmoid, relu, scale}.

    Returns ``(out, backward)``; ``backward(dout)`` accumulates into ``a.grad``
    and, when ``b`` is a Tensor4, into ``b.grad``. The second operand may be a
    full-shape tensor, a per-channel (1,C,1,1) tensor or a per-position
    (B,1,H,W) tensor.
    """
    x = a.data
    if op in ("sigmoid", "relu"):
        if op == "sigmoid":
            y = sigmoid(x)
            def backward(dout):
                a.accumulate(dout * y * (1.0 - y))
        else:
            y = np.maximum(x, 0)
            def backward(dout):
                a.accumulate(dout * (x > 0))
        return Tensor4(y), backward

    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale takes a scalar second operand")
        s = float(b)
        def backward(dout):
            a.accumulate(dout * s)
        return Tensor4(x * s), backward

    if op not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise op {op!r}")

    if isinstance(b, Tensor4):
        other = b.data
        _broadcast_kind(x.shape, other.shape)
    else:
        other = float(b)

    if op == "add":
        y = x + other
    elif op == "sub":
        y = x - other
    else:
        y = x * other

    def backward(dout):
        if op == "mul":
            a.accumulate(dout * other)
            db = dout * x
        else:
            a.accumulate(dout)
            db = dout if op == "add" else -dout
        if isinstance(b, Tensor4):
            b.accumulate(_sum_to(db, b.data.shape))

    return Tensor4(y), backward


def _axes(axes) -> Tuple[int, ...]:
    out = []
    for ax in axes:
        out.append(AXIS_NAMES[ax] if isinstance(ax, str) else int(ax))
    if not out:
        raise ShapeError("reduce needs at least one axis")
    return tuple(sorted(set(out)))


def max_with_argmax(x: np.ndarray, axes: Tuple[int, ...]):
    """Max over ``axes`` (keepdims) plus a one-hot mask marking the first maximiser."""
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    mask = mask.reshape(moved.shape)
    inv = np.argsort(keep + list(axes))
    mask = np.transpose(mask, inv)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)
    shape = [1 if i in axes else s for i, s in enumerate(x.shape)]
    return out.reshape(shape), mask


def reduce(op: str, x: Tensor4, axes: Sequence):
    """Mean or max over the named axes (keepdims). Max ties go to the first index."""
    ax = _axes(axes)
    data = x.data
    extent = int(np.prod([data.shape[i] for i in ax]))
    if extent == 0:
        raise ShapeError(f"empty reduction extent over axes {ax}")
    if op == "mean":
        y = data.mean(axis=ax, keepdims=True)
        def backward(dout):
            x.accumulate(np.broadcast_to(dout / extent, data.shape).copy())
    elif op == "max":
        y, mask = max_with_argmax(data, ax)
        def backward(dout):
            x.accumulate(mask * dout)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return Tensor4(y), backward


# --------------------------------------------------------------------------
# convolution (stride 1, same padding)
# --------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None):
    """Same-padded stride-1 convolution. Returns ``(y, cache)``."""
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise ShapeError(f"kernel expects {cin} input channels, input has {C}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    k = kh
    if k == 1:
        y = np.matmul(w.reshape(cout, cin), x.reshape(B, C, H * W)).reshape(B, cout, H, W)
        cache = (x, w, None, b is not None)
    else:
        p = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H,W,k,k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)
        y = (cols @ w.reshape(cout, -1).T).reshape(B, H, W, cout).transpose(0, 3, 1, 2)
        cache = (x, w, cols, b is not None)
    if b is not None:
        y = y + b.reshape(1, cout, 1, 1)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy: np.ndarray, cache):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d_forward`; ``db`` is None without bias."""
    x, w, cols, has_bias = cache
    B, C, H, W = x.shape
    cout, cin, k, _ = w.shape
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    if k == 1:
        dyf = dy.reshape(B, cout, H * W)
        xf = x.reshape(B, C, H * W)
        dw = np.einsum("boi,bci->oc", dyf, xf).reshape(w.shape)
        dx = np.matmul(w.reshape(cout, cin).T, dyf).reshape(x.shape)
        return dx, dw, db
    p = k // 2
    dmat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dmat.T @ cols).reshape(w.shape)
    dcols = (dmat @ w.reshape(cout, -1)).reshape(B, H, W, C, k, k)
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + H, p:p + W], dw, db


def conv2d(x: Tensor4, kernel: Tensor4, bias: Optional[np.ndarray] = None):
    """Tensor4-level convolution; ``backward`` fills ``x.grad`` and ``kernel.grad``."""
    y, cache = conv2d_forward(x.data, kernel.data, bias)

    def backward(dout):
        dx, dw, _ = conv2d_backward(dout, cache)
        x.accumulate(dx)
        kernel.accumulate(dw)

    return Tensor4(y), backward


def avgpool2_forward(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2; odd trailing rows/columns are dropped."""
    B, C, H, W = x.shape
    x = x[:, :, : H - H % 2, : W - W % 2]
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    B, C, H, W = in_shape
    dx = np.zeros(in_shape, dtype=dy.dtype)
    up = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25
    dx[:, :, : up.shape[2], : up.shape[3]] = up
    return dx


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]], x, step: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` must return ``(value, grad)``. The error at a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``max_coords`` only a
    random subset of coordinates is probed.
    """
    x0 = np.array(as_array(x), dtype=np.float64)
    value, analytic = f(x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {x0.shape}")
    if not np.isfinite(value) or not np.isfinite(analytic).all():
        raise NumericalError("non-finite value or gradient at the base point", stage="grad_check")

    coords = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(x0.size, size=max_coords, replace=False)

    worst = 0.0
    flat_grad = analytic.reshape(-1)
    for i in coords:
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = f(xp.reshape(x0.shape))[0]
        fm = f(xm.reshape(x0.shape))[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite evaluation at coordinate {int(i)}", stage="grad_check")
        numeric = (fp - fm) / (2.0 * step)
        err = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return float(worst)


# --------------------------------------------------------------------------
# layer base
# --------------------------------------------------------------------------

class Layer:
    """Forward/backward pair with named parameters and cached activations.

    ``forward`` stores whatever ``backward`` needs from the most recent call,
    so a layer instance must not be invoked twice inside one forward pass.
    """

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()  # saved, not trained
        self.children: "OrderedDict[str, Layer]" = OrderedDict()
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add(self, name: str, layer: "Layer") -> "Layer":
        self.children[name] = layer
        return layer

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, "Layer", str]]:
        """Yield ``(full_name, owner, local_name)`` for every parameter in the tree."""
        for name in self.params:
            yield prefix + name, self, name
        for cname, child in self.children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, "Layer", str]]:
        for name in self.buffers:
            yield prefix + name, self, name
        for cname, child in self.children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def _named_state(self):
        for full, owner, local in self.named_parameters():
            yield full, owner.params, local
        for full, owner, local in self.named_buffers():
            yield full, owner.buffers, local

    def state_dict(self):
        """Parameters followed by buffers, keyed by dotted path."""
        return OrderedDict((full, store[local]) for full, store, local in self._named_state())

    def load_state_dict(self, state):
        names = [full for full, _, _ in self._named_state()]
        missing = set(names) - set(state)
        extra = set(state) - set(names)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for full, store, local in self._named_state():
            value = np.asarray(state[full])
            if value.shape != store[local].shape:
                raise ShapeError(f"{full}: shape {value.shape} != {store[local].shape}")
            if value.dtype == store[local].dtype:
                store[local][...] = value  # in place keeps shared references valid
            else:
                store[local] = value.copy()
        for _, owner, local in self.named_parameters():
            owner.grads[local] = np.zeros_like(owner.params[local])

    def train(self, mode: bool = True) -> "Layer":
        for layer in self.walk():
            layer.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self):
        for _, owner, local in self.named_parameters():
            owner.grads[local][...] = 0

    def astype(self, dtype):
        for _, owner, local in self.named_parameters():
            owner.params[local] = owner.params[local].astype(dtype)
            owner.grads[local] = np.zeros_like(owner.params[local])
        for _, owner, local in self.named_buffers():
            owner.buffers[local] = owner.buffers[local].astype(dtype)
        for layer in self.walk():
            layer.dtype = np.dtype(dtype)
        return self

    def walk(self) -> Iterator["Layer"]:
        yield self
        for child in self.children.values():
            yield from child.walk()


class Sequential(Layer):
    def __init__(self, layers=()):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.children.values()):
            dout = layer.backward(dout)
        return dout
