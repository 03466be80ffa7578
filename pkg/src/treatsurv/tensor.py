"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations needed by the survival network are provided. Every op
records its parents and a closure mapping the upstream gradient to one
gradient per parent; :func:`backward` replays the closures in exact reverse
topological order, so gradient accumulation is deterministic.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, ShapeError

EPS = 1e-5
DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the computation graph: a value plus an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # scalar / same-shape arithmetic; enough for small compositions in tests
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, -1.0)

    def __sub__(self, other):
        return _add(self, -other if not isinstance(other, Tensor) else _mul(other, -1.0))

    def __rsub__(self, other):
        return _add(_mul(self, -1.0), other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=DTYPE, copy=True)
            else:
                parent.grad += g


def _add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return _record(a.data + float(b), (a,), lambda g: (g,), "add")


def _mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    k = float(b)
    return _record(a.data * k, (a,), lambda g: (g * k,), "mul")


# ---------------------------------------------------------------------------
# convolution


def _check_conv_args(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int):
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [N,C,D,H,W], got shape {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be [Cout,Cin,k,k,k], got shape {w.shape}")
    cout, cin, kd, kh, kw = w.shape
    if not kd == kh == kw:
        raise ShapeError(f"conv3d kernel must be cubic, got {w.shape[2:]}")
    if kd % 2 == 0:
        raise ConfigError(f"conv3d kernel size must be odd, got {kd}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv3d input has {x.shape[1]} channels but weight {w.shape} expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv3d bias shape {b.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv3d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    for extent in x.shape[2:]:
        if extent + 2 * padding < kd:
            raise ShapeError(f"padded extent {extent + 2 * padding} smaller than kernel {kd}")
    return kd


def conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct-loop convolution; the correctness baseline for the fast kernel."""
    k = _check_conv_args(x, w, b, stride, padding)
    n, _, d, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding)))
    do, ho, wo = (conv_output_extent(e, k, stride, padding) for e in (d, h, wd))
    out = np.empty((n, cout, do, ho, wo), dtype=DTYPE)
    for s in range(n):
        for o in range(cout):
            for i in range(do):
                for j in range(ho):
                    for l in range(wo):
                        window = xp[s, :, i * stride:i * stride + k, j * stride:j * stride + k, l * stride:l * stride + k]
                        out[s, o, i, j, l] = np.sum(window * w[o]) + b[o]
    return out


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    if stride > 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    n, c, do, ho, wo = win.shape[:5]
    # rows: (n, d, h, w); columns: (c, kd, kh, kw), matching weight.reshape(Cout, -1)
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c * k ** 3), (do, ho, wo)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation with zero padding, ``[N,Cin,D,H,W] -> [N,Cout,D',H',W']``."""
    k = _check_conv_args(x.data, weight.data, bias.data, stride, padding)
    n, cin = x.shape[:2]
    cout = weight.shape[0]
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    cols, (do, ho, wo) = _im2col(xp, k, stride)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, do, ho, wo, cout).transpose(0, 4, 1, 2, 3)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, do, ho, wo, cin, k, k, k)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            span = lambda start, m: slice(start, start + stride * (m - 1) + 1, stride)  # noqa: E731
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, :, span(i, do), span(j, ho), span(l, wo)] += dcols[..., i, j, l].transpose(0, 4, 1, 2, 3)
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else gxp
        return gx, gw, gb

    return _record(np.ascontiguousarray(out), (x, weight, bias), grad_fn, "conv3d")


# ---------------------------------------------------------------------------
# dense and elementwise


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out[n, o] = sum_i weight[o, i] * x[n, i] + bias[o]``."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def grad_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), grad_fn, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _record(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the lowest linear index."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d input must be [N,C,D,H,W], got shape {x.shape}")
    n, c, d, h, w = x.shape
    if any(e % window for e in (d, h, w)):
        raise ConfigError(f"maxpool3d window {window} needs spatial extents divisible by it, got {(d, h, w)}")
    do, ho, wo = d // window, h // window, w // window
    blocks = (
        x.data.reshape(n, c, do, window, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, do, ho, wo, window ** 3)
    )
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, do, ho, wo, window, window, window)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(n, c, d, h, w)
        )
        return (gx,)

    return _record(out, (x,), grad_fn, "maxpool3d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool input must be [N,C,D,H,W], got shape {x.shape}")
    spatial = x.shape[2:]
    count = int(np.prod(spatial))
    out = x.data.mean(axis=(2, 3, 4))

    def grad_fn(g):
        return (np.broadcast_to((g / count)[:, :, None, None, None], x.shape),)

    return _record(out, (x,), grad_fn, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: ranks differ, shapes {a.shape} and {b.shape}")
    axis = axis % a.ndim
    for dim in range(a.ndim):
        if dim != axis and a.shape[dim] != b.shape[dim]:
            raise ShapeError(f"concat along axis {axis}: shapes {a.shape} and {b.shape} disagree")
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def grad_fn(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _record(out, (a, b), grad_fn, "concat")


# ---------------------------------------------------------------------------
# statistics and loss


def instance_moments(x: np.ndarray, eps: float = EPS):
    """Per-(sample, channel) spatial mean and ``sqrt(population var + eps)``."""
    mu = x.mean(axis=(2, 3, 4))
    centered = x - mu[:, :, None, None, None]
    var = np.mean(centered * centered, axis=(2, 3, 4))
    return mu, np.sqrt(var + eps), centered


def instance_stats(x: Tensor, eps: float = EPS):
    """Differentiable ``(mu, sigma)`` over the spatial axes, each ``[N, C]``."""
    if x.ndim != 5:
        raise ShapeError(f"instance_stats input must be [N,C,D,H,W], got shape {x.shape}")
    count = int(np.prod(x.shape[2:]))
    mu, sigma, centered = instance_moments(x.data, eps)

    def mu_grad(g):
        return (np.broadcast_to((g / count)[:, :, None, None, None], x.shape),)

    def sigma_grad(g):
        # the centring term sums to zero, so mu's dependence on x drops out
        return ((g / (count * sigma))[:, :, None, None, None] * centered,)

    return (
        _record(mu, (x,), mu_grad, "instance_mean"),
        _record(sigma, (x,), sigma_grad, "instance_std"),
    )


def mae(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero is zero."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mae: prediction shape {pred.shape} differs from target shape {target.shape}")
    diff = pred.data - target.data
    count = diff.size

    def grad_fn(g):
        sgn = np.sign(diff) * (g / count)
        return sgn, -sgn

    return _record(np.asarray(np.abs(diff).mean()), (pred, target), grad_fn, "mae")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: tuple) -> Tensor:
    original = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along one axis."""
    axis = axis % x.ndim
    index = tuple(slice(start, stop) if d == axis else slice(None) for d in range(x.ndim))
    piece = x.data[index]

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _record(piece, (x,), grad_fn, "narrow")


# ---------------------------------------------------------------------------
# first-layer fast path over constant inputs


class UnfoldedVolumes:
    """Per-sample im2col matrices of constant input volumes.

    Unfolding dominates the cost of a first convolution layer; training inputs
    never change, so the unfolded rows are computed once and reused by
    :func:`conv3d_unfolded` every epoch.
    """

    def __init__(self, rows: list, spatial: tuple, in_channels: int, kernel_size: int, padding: int):
        self.rows = rows
        self.spatial = spatial
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.padding = padding

    @classmethod
    def from_volumes(cls, volumes: np.ndarray, kernel_size: int, padding: int) -> "UnfoldedVolumes":
        volumes = np.asarray(volumes, dtype=DTYPE)
        if volumes.ndim != 5:
            raise ShapeError(f"expected volumes [N,C,D,H,W], got shape {volumes.shape}")
        p, k = padding, kernel_size
        rows, spatial = [], None
        for v in volumes:
            vp = np.pad(v[None], ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else v[None]
            cols, spatial = _im2col(vp, k, 1)
            rows.append(np.ascontiguousarray(cols))
        return cls(rows, spatial, volumes.shape[1], k, p)

    def __len__(self) -> int:
        return len(self.rows)

    def take(self, index) -> "UnfoldedVolumes":
        return UnfoldedVolumes([self.rows[i] for i in index], self.spatial, self.in_channels,
                               self.kernel_size, self.padding)


def conv3d_unfolded(u: UnfoldedVolumes, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 :func:`conv3d` over pre-unfolded constant inputs."""
    cout, cin, k = weight.shape[:3]
    if cin != u.in_channels or k != u.kernel_size:
        raise ShapeError(f"weight {weight.shape} incompatible with unfolded input "
                         f"({u.in_channels} channels, kernel {u.kernel_size})")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d bias shape {bias.shape} does not match {cout} output channels")
    wmat = weight.data.reshape(cout, -1)
    n = len(u.rows)
    out = np.empty((n, cout) + tuple(u.spatial), dtype=DTYPE)
    flat = out.reshape(n, cout, -1)
    for i, cols in enumerate(u.rows):
        flat[i] = wmat @ cols.T
    flat += bias.data[None, :, None]

    def grad_fn(g):
        gflat = np.ascontiguousarray(g).reshape(n, cout, -1)
        gw = None
        if weight.requires_grad:
            gw = np.zeros((cout, wmat.shape[1]), dtype=DTYPE)
            for i, cols in enumerate(u.rows):
                gw += gflat[i] @ cols
            gw = gw.reshape(weight.shape)
        gb = gflat.sum(axis=(0, 2)) if bias.requires_grad else None
        return None, gw, gb

    marker = Tensor(np.zeros(0))  # constant input stand-in so the parent tuple lines up
    return _record(out, (marker, weight, bias), grad_fn, "conv3d")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar."""
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),), "sum")
