"""Minimal dense-tensor core with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Every differentiable primitive records
its parents and a backward closure on the output tensor; ``backward`` on a
scalar loss walks that tape in reverse topological order. Frozen subgraphs
(no ``requires_grad`` leaf anywhere below) record nothing, so they cost no
tape memory and no backward time.

Conventions fixed here and relied on by the rest of the package:

- float64 everywhere; gradcheck tolerances assume it.
- at non-differentiable points the backward rule takes the left/interior
  branch (relu at 0 gives 0, clamped sample coordinates at the border keep
  a unit pass-through, integer sample coordinates use the left cell).
- leaf ``grad`` buffers accumulate across ``backward`` calls until reset.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv2d",
    "pointwise",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "log_sigmoid",
    "bilinear_sample",
    "upsample_nearest",
    "concat",
    "take",
    "backward",
    "grad_check",
    "glorot_uniform",
    "save_tensors",
    "load_tensors",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Rejected input: operand shapes violate an operation's contract."""


class FeatureMap:
    """A channels x height x width view of a Tensor with its stride
    relative to the input image (e.g. 4 for a /4 map)."""

    __slots__ = ("data", "stride")

    def __init__(self, data: "Tensor", stride: int = 1):
        if data.ndim != 3:
            raise ShapeError(f"FeatureMap needs (C,H,W) data, got {data.shape}")
        self.data = data
        self.stride = int(stride)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __repr__(self) -> str:
        return f"FeatureMap(shape={self.data.shape}, stride=/{self.stride})"


class Tensor:
    """A float64 array plus an optional gradient tape entry.

    ``requires_grad`` on a leaf marks it as a parameter; on an op output it
    is derived from the parents. ``grad`` is a same-shape numpy buffer,
    populated by ``backward`` and accumulated across calls.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        data = self.data[key]

        def bwd(g, key=key, shape=self.shape):
            gx = np.zeros(shape)
            np.add.at(gx, key, g)  # scatter-add handles repeated fancy indices
            return (gx,)

        return _from_op(data, (self,), bwd, "getitem")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...],
             backward_fn: Callable[[np.ndarray], tuple], op: str) -> Tensor:
    """Build an op output; the tape entry is recorded only if needed."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    out.op = op
    if req:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise primitives ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, sa=a.shape, sb=b.shape):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _from_op(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, da=a.data, db=b.data):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _from_op(a.data * b.data, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = a.data ** e

    def bwd(g, d=a.data):
        return (g * e * d ** (e - 1.0),)

    return _from_op(out, (a,), bwd, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g, o=out: (g * o,), "exp")


def log(a: Tensor) -> Tensor:
    return _from_op(np.log(a.data), (a,), lambda g, d=a.data: (g / d,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g, o=out: (g * 0.5 / o,), "sqrt")


def relu(a: Tensor) -> Tensor:
    # backward at exactly 0 takes the left branch (gradient 0)
    mask = a.data > 0.0
    return _from_op(np.where(mask, a.data, 0.0), (a,), lambda g, m=mask: (g * m,), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bwd(g, d=a.data, c=cdf):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return (g * (c + d * pdf),)

    return _from_op(out, (a,), bwd, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _from_op(out, (a,), lambda g, o=out: (g * o * (1.0 - o),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g, o=out: (g * (1.0 - o * o),), "tanh")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|; gradient is sigmoid(-x)."""
    d = a.data
    out = np.where(d >= 0, -np.log1p(np.exp(-np.abs(d))), d - np.log1p(np.exp(-np.abs(d))))

    def bwd(g, d=d):
        return (g * expit(-d),)

    return _from_op(out, (a,), bwd, "log_sigmoid")


_POINTWISE = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise(a: Tensor, kind: str) -> Tensor:
    """Elementwise activation dispatch over {gelu, relu, sigmoid, tanh}."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(a)


# -- shape primitives ------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bwd(g, orig=a.shape):
        return (g.reshape(orig),)

    return _from_op(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _from_op(a.data.transpose(axes), (a,), bwd, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, shape=a.shape):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _from_op(out, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), as_tensor(1.0 / n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g, shape=a.shape):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _from_op(out, (a,), bwd, "take")


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims, when present, must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g, da=a.data, db=b.data):
        return g @ db.swapaxes(-1, -2), da.swapaxes(-1, -2) @ g

    return _from_op(out, (a, b), bwd, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; slices sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, y=out):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _from_op(out, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g, y=out):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (a,), bwd, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    gain/bias extents must match the normalized axis; eps sits inside the
    square root.
    """
    ax = axis if axis >= 0 else x.ndim + axis
    if gain.shape != (x.shape[ax],) or bias.shape != (x.shape[ax],):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({x.shape[ax]},), got {gain.shape}/{bias.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    gd = gain.data.reshape(bshape)
    bd = bias.data.reshape(bshape)

    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + bd

    def bwd(g, xhat=xhat, inv=inv, gd=gd, bshape=tuple(bshape)):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=ax, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=ax, keepdims=True))
        sum_axes = tuple(i for i in range(g.ndim) if i != ax)
        ggain = (g * xhat).sum(axis=sum_axes)
        gbias = g.sum(axis=sum_axes)
        return gx, ggain, gbias

    return _from_op(out, (x, gain, bias), bwd, "layer_norm")


# -- convolution -----------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) on a C_in x H x W map.

    Output extents follow floor((H + 2p - k) / s) + 1. A 1x1 kernel with
    stride 1 is exactly a per-pixel matmul.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (Cout,Cin,k,k), got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError("conv2d kernels must be square")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[0]} vs kernel {c_in}")
    c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]            # (C, Ho, Wo, kh, kw)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ wmat.T).T.reshape(c_out, ho, wo)

    def bwd(g, cols=cols, wmat=wmat):
        gflat = g.reshape(c_out, ho * wo).T             # (Ho*Wo, Cout)
        gw = (gflat.T @ cols).reshape(c_out, c_in, kh, kw)
        gcols = (gflat @ wmat).reshape(ho, wo, c_in, kh, kw).transpose(2, 0, 1, 3, 4)
        gxp = np.zeros((c, hp, wp))
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, :, :, ki, kj]
        gx = gxp[:, padding:hp - padding, padding:wp - padding] if padding else gxp
        return gx, gw

    return _from_op(out, (x, kernel), bwd, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsample of a C x H x W map by an integer factor."""
    c, h, w = x.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def bwd(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _from_op(out, (x,), bwd, "upsample_nearest")


# -- bilinear sampling -----------------------------------------------------


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """Sample a C x H x W map at continuous (row, col) points -> (P, C).

    Out-of-range points are clamped to [0, H-1] x [0, W-1] (border
    replication); each output is a convex combination of the 4 enclosing
    grid values, differentiable w.r.t. both the map and the points. Exact
    at integer coordinates.
    """
    if x.ndim != 3:
        raise ShapeError(f"bilinear_sample expects a (C,H,W) map, got {x.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"points must be (P,2), got {points.shape}")
    c, h, w = x.shape
    raw_i = points.data[:, 0]
    raw_j = points.data[:, 1]
    pi = np.clip(raw_i, 0.0, h - 1.0)
    pj = np.clip(raw_j, 0.0, w - 1.0)
    # ceil-1 cell choice: integer coordinates land on the left cell, which
    # keeps the sampled value exact and the derivative on the left branch
    i0 = np.clip(np.ceil(pi).astype(np.int64) - 1, 0, max(h - 2, 0))
    j0 = np.clip(np.ceil(pj).astype(np.int64) - 1, 0, max(w - 2, 0))
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    di = (pi - i0)[:, None]
    dj = (pj - j0)[:, None]

    flat = x.data.reshape(c, h * w).T                   # (H*W, C)
    v00 = flat[i0 * w + j0]
    v01 = flat[i0 * w + j1]
    v10 = flat[i1 * w + j0]
    v11 = flat[i1 * w + j1]
    w00 = (1.0 - di) * (1.0 - dj)
    w01 = (1.0 - di) * dj
    w10 = di * (1.0 - dj)
    w11 = di * dj
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    inside_i = ((raw_i >= 0.0) & (raw_i <= h - 1.0)).astype(np.float64)
    inside_j = ((raw_j >= 0.0) & (raw_j <= w - 1.0)).astype(np.float64)

    def bwd(g):
        gflat = np.zeros((h * w, c))
        np.add.at(gflat, i0 * w + j0, g * w00)
        np.add.at(gflat, i0 * w + j1, g * w01)
        np.add.at(gflat, i1 * w + j0, g * w10)
        np.add.at(gflat, i1 * w + j1, g * w11)
        gx = gflat.T.reshape(c, h, w)

        dval_di = (-(1.0 - dj) * v00 - dj * v01 + (1.0 - dj) * v10 + dj * v11)
        dval_dj = (-(1.0 - di) * v00 + (1.0 - di) * v01 - di * v10 + di * v11)
        gp = np.zeros((points.shape[0], 2))
        gp[:, 0] = (g * dval_di).sum(axis=1) * inside_i
        gp[:, 1] = (g * dval_dj).sum(axis=1) * inside_j
        return gx, gp

    return _from_op(out, (x, points), bwd, "bilinear_sample")


# -- backward pass ---------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The loss must be scalar. Repeated calls without resetting leaf grads
    accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # interior grads are per-pass scratch; leaf grads persist and accumulate
    for node in order:
        if node._parents:
            node.grad = np.zeros(node.shape)
        elif node.grad is None:
            node.grad = np.zeros(node.shape)
    loss.grad = loss.grad + np.ones(loss.shape)
    for node in reversed(order):
        if not node._parents:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad:
                parent.grad += g.reshape(parent.shape)


# -- verification harness --------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
               max_entries_per_param: int = 0, seed: int = 0) -> dict[str, float]:
    """Compare analytic gradients of a scalar function against central
    finite differences.

    ``f`` must be a deterministic scalar function of the given named
    parameters. Returns a report mapping every checked parameter name to
    its max relative error, with denominator max(|analytic|, |numeric|,
    1e-8). ``max_entries_per_param`` > 0 checks a seeded subset of entries
    for large parameters; 0 checks every entry.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param and n > max_entries_per_param:
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = f().item()
            flat[k] = orig - eps
            f_minus = f().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ga[k]), abs(numeric), 1e-8)
            worst = max(worst, abs(ga[k] - numeric) / denom)
        report[name] = worst
    return report


# -- parameter initialization ----------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int],
                   fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
    """Weight init: uniform(+-sqrt(6/(fan_in+fan_out))), requires_grad."""
    shape = tuple(shape)
    if fan_in is None or fan_out is None:
        if len(shape) == 2:
            fan_in, fan_out = shape[0], shape[1]
        elif len(shape) == 4:  # conv kernels (Cout, Cin, k, k)
            rec = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rec, shape[0] * rec
        else:
            fan_in = fan_out = int(np.prod(shape))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape: Sequence[int], requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


# -- checkpoint format -----------------------------------------------------
#
# Layout: 8-byte little-endian header length, UTF-8 JSON header mapping
# name -> {"shape": [...], "offset": byte offset into the payload}, then the
# concatenated little-endian float64 payload. Round trips are bit exact.


def save_tensors(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else np.asarray(t),
                                   dtype="<f8")
        header[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for raw in chunks:
            fh.write(raw)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (hdr_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hdr_len).decode("utf-8"))
        payload = fh.read()
    out: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=meta["offset"])
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
