"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the segmentation networks and their losses are
provided. Every differentiable op records a node on the output tensor (its
parents and a closure mapping the output gradient to input gradients);
:func:`backward` walks the recorded graph once in reverse topological order.

Arrays are float32 by default. Passing ``dtype=np.float64`` when creating the
leaves runs the same code paths in double precision, which is what the
finite-difference checks use.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ._kernels import correlate, weight_grad

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense N-D array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor


@dataclass
class Graph:
    """Recorded operations reachable from one output, in topological order."""

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def build_graph(root: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Graph([Node(t._op, tuple(id(p) for p in t._parents), t) for t in order])


def backward(loss: Tensor, free_graph: bool = True):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Interior tensors do not keep their gradients. With ``free_graph`` the saved
    closures are dropped afterwards so activations can be released.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        t = node.output
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if not t._parents:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t._backward(g)
        for p, pg in zip(t._parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if free_graph:
        for node in graph.nodes:
            t = node.output
            if t._parents:
                t._parents = ()
                t._backward = None


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


# --------------------------------------------------------------------------
# pointwise ops and reductions


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data + np.asarray(b, a.dtype), (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    a = as_tensor(a, like=b)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    if not isinstance(a, Tensor):
        return scalar_mul(b, a)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scalar_mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, 1.0 / float(b))
    a = as_tensor(a, like=b)
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        gb = g / bd
        return gb, -gb * out

    return _make(out, (a, b), bw, "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor, eps: float = 0.0) -> Tensor:
    """Logistic function; ``eps > 0`` keeps outputs inside ``[eps, 1 - eps]``.

    The clamp only touches values, the derivative stays ``s * (1 - s)``.
    """
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    if eps > 0:
        s = np.clip(s, eps, 1.0 - eps).astype(xd.dtype, copy=False)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of ``(a - b)**2``."""
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=diff.dtype)

    def bw(g):
        ga = diff * (g * (2.0 / n))
        return ga, -ga

    return _make(out, (a, b), bw, "mse")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), bw, "getitem")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# --------------------------------------------------------------------------
# 3-D convolution


def _offsets(k: int, plane: int, row: int) -> list[int]:
    return [a * plane + b * row + c for a in range(k) for b in range(k) for c in range(k)]


def _pad_channels_first(x: np.ndarray, pad: int, tail: int = 0) -> np.ndarray:
    """(N,C,D,H,W) -> zero-padded (C, N*(D+2p)*(H+2p)*(W+2p) + tail)."""
    n, c, d, h, w = x.shape
    pd, ph, pw = d + 2 * pad, h + 2 * pad, w + 2 * pad
    flat = np.zeros((c, n * pd * ph * pw + tail), dtype=x.dtype)
    grid = flat[:, : n * pd * ph * pw].reshape(c, n, pd, ph, pw)
    grid[:, :, pad : pad + d, pad : pad + h, pad : pad + w] = x.transpose(1, 0, 2, 3, 4)
    return flat


def _conv3d_stride1(x, w, pad):
    # Correlation on the flattened padded grid: output voxel (d,h,w) lives at the
    # flat index of padded voxel (d,h,w) and every kernel tap is a constant shift.
    n, c, d, h, wd = x.shape
    f, _, k, _, _ = w.shape
    pd, ph, pw = d + 2 * pad, h + 2 * pad, wd + 2 * pad
    od, oh, ow = pd - k + 1, ph - k + 1, pw - k + 1
    offs = np.array(_offsets(k, ph * pw, pw), dtype=np.int64)
    length = n * pd * ph * pw
    xf = _pad_channels_first(x, pad, tail=int(offs[-1]))
    out = np.empty((f, length), dtype=x.dtype)
    correlate(xf, np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1).reshape(-1, f, c)), offs, out)
    out = out.reshape(f, n, pd, ph, pw)[:, :, :od, :oh, :ow].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out), (xf, offs, (pd, ph, pw))


def _conv3d_stride1_backward(g, w, saved, x_shape, pad, need_dx=True):
    xf, offs, (pd, ph, pw) = saved
    n, c, d, h, wd = x_shape
    f, _, k, _, _ = w.shape
    od, oh, ow = g.shape[2:]
    length = n * pd * ph * pw
    margin = int(offs[-1])
    gf = np.zeros((f, margin + length), dtype=g.dtype)
    gf[:, margin:].reshape(f, n, pd, ph, pw)[:, :, :od, :oh, :ow] = g.transpose(1, 0, 2, 3, 4)
    dw = weight_grad(xf, gf[:, margin:], offs)
    dw = np.ascontiguousarray(dw.reshape(k, k, k, f, c).transpose(3, 4, 0, 1, 2))
    if not need_dx:
        return None, dw
    # dx is the correlation of g with the spatially flipped, transposed kernel;
    # with g shifted right by the largest offset the taps reuse ``offs``.
    dxf = np.empty((c, length), dtype=g.dtype)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 1, 0).reshape(-1, c, f))
    correlate(gf, wt, offs, dxf)
    dx = dxf.reshape(c, n, pd, ph, pw)[:, :, pad : pad + d, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3, 4)), dw


def _im2col_strided(xp, k, stride, out_dims):
    c, n = xp.shape[:2]
    od, oh, ow = out_dims
    cols = np.empty((k, k, k, c, n, od, oh, ow), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                cols[a, b, cc] = xp[
                    :, :,
                    a : a + stride * (od - 1) + 1 : stride,
                    b : b + stride * (oh - 1) + 1 : stride,
                    cc : cc + stride * (ow - 1) + 1 : stride,
                ]
    return cols.reshape(k ** 3 * c, -1)


def _col2im_strided(cols, xp_shape, k, stride, out_dims):
    c, n = xp_shape[:2]
    od, oh, ow = out_dims
    cols = cols.reshape(k, k, k, c, n, od, oh, ow)
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                xp[
                    :, :,
                    a : a + stride * (od - 1) + 1 : stride,
                    b : b + stride * (oh - 1) + 1 : stride,
                    cc : cc + stride * (ow - 1) + 1 : stride,
                ] += cols[a, b, cc]
    return xp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation, input (N,C,D,H,W), weight (F,C,k,k,k), cubic odd kernel."""
    if x.ndim != 5:
        raise ValueError(f"conv3d: input must be 5-D (N,C,D,H,W), got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d: weight must be 5-D (F,C,k,k,k), got shape {weight.shape}")
    n, c, d, h, wd = x.shape
    f, wc, k, k2, k3 = weight.shape
    if wc != c:
        raise ValueError(f"conv3d: input channel dimension C={c} does not match weight in-channels {wc}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ValueError(f"conv3d: kernel must be cubic with odd size, got {weight.shape[2:]}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv3d: bias shape {bias.shape} does not match out-channels F={f}")
    if padding < 0 or stride < 1:
        raise ValueError(f"conv3d: need padding >= 0 and stride >= 1 (got {padding}, {stride})")
    for axis, size in zip("DHW", (d, h, wd)):
        if size + 2 * padding < k:
            raise ValueError(f"conv3d: spatial dim {axis}={size} with padding {padding} is smaller than kernel {k}")
    out_dims = tuple((s + 2 * padding - k) // stride + 1 for s in (d, h, wd))
    xd, wdat = x.data, weight.data.astype(x.dtype, copy=False)

    if k == 1 and stride == 1 and padding == 0:
        xm = xd.transpose(1, 0, 2, 3, 4).reshape(c, -1)
        wm = wdat.reshape(f, c)
        out = (wm @ xm).reshape(f, n, d, h, wd).transpose(1, 0, 2, 3, 4)

        def bw_core(g):
            gm = g.transpose(1, 0, 2, 3, 4).reshape(f, -1)
            dx = (wm.T @ gm).reshape(c, n, d, h, wd).transpose(1, 0, 2, 3, 4)
            dw = (gm @ xm.T).reshape(f, c, 1, 1, 1)
            return np.ascontiguousarray(dx), dw

    elif stride == 1:
        out, saved = _conv3d_stride1(xd, wdat, padding)

        def bw_core(g):
            return _conv3d_stride1_backward(g, wdat, saved, xd.shape, padding, x.requires_grad)

    else:
        p = padding
        xp = _pad_channels_first(xd, p).reshape(c, n, d + 2 * p, h + 2 * p, wd + 2 * p)
        cols = _im2col_strided(xp, k, stride, out_dims)
        wm = wdat.transpose(0, 2, 3, 4, 1).reshape(f, -1)
        out = (wm @ cols).reshape(f, n, *out_dims).transpose(1, 0, 2, 3, 4)

        def bw_core(g):
            gm = g.transpose(1, 0, 2, 3, 4).reshape(f, -1)
            dw = (gm @ cols.T).reshape(f, k, k, k, c).transpose(0, 4, 1, 2, 3)
            dxp = _col2im_strided(wm.T @ gm, xp.shape, k, stride, out_dims)
            dx = dxp[:, :, p : p + d, p : p + h, p : p + wd].transpose(1, 0, 2, 3, 4)
            return np.ascontiguousarray(dx), np.ascontiguousarray(dw)

    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False).reshape(1, f, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g = np.ascontiguousarray(g)
        dx = dw = None
        if x.requires_grad or weight.requires_grad:
            dx, dw = bw_core(g)
        grads = [dx if x.requires_grad else None, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _make(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 3-D convolution, kernel 2 and stride 2 only; weight (C,F,2,2,2)."""
    if weight.ndim != 5 or weight.shape[2:] != (2, 2, 2) or stride != 2:
        raise NotImplementedError(
            f"conv_transpose3d supports only kernel 2, stride 2 (got kernel {weight.shape[2:]}, stride {stride})"
        )
    if x.ndim != 5:
        raise ValueError(f"conv_transpose3d: input must be 5-D, got shape {x.shape}")
    n, c, d, h, wd = x.shape
    wc, f = weight.shape[:2]
    if wc != c:
        raise ValueError(f"conv_transpose3d: input channel dimension C={c} does not match weight in-channels {wc}")
    wm = weight.data.astype(x.dtype, copy=False).reshape(c, f * 8)
    xm = x.data.transpose(1, 0, 2, 3, 4).reshape(c, -1)
    y = (wm.T @ xm).reshape(f, 2, 2, 2, n, d, h, wd)
    out = np.ascontiguousarray(y.transpose(4, 0, 5, 1, 6, 2, 7, 3)).reshape(n, f, 2 * d, 2 * h, 2 * wd)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False).reshape(1, f, 1, 1, 1)

    def bw(g):
        gm = g.reshape(n, f, d, 2, h, 2, wd, 2).transpose(1, 3, 5, 7, 0, 2, 4, 6).reshape(f * 8, -1)
        dx = (wm @ gm).reshape(c, n, d, h, wd).transpose(1, 0, 2, 3, 4)
        dw = (xm @ gm.T).reshape(c, f, 2, 2, 2)
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv_transpose3d")


# --------------------------------------------------------------------------
# resampling


def linear_interp_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(factor*size, size) matrix for 1-D linear upsampling, half-pixel centres."""
    dst = np.arange(size * factor)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    a = np.zeros((size * factor, size), dtype=np.float64)
    np.add.at(a, (dst, i0), 1.0 - lam)
    np.add.at(a, (dst, i1), lam)
    return a.astype(dtype)


def _apply_along(x: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Integer-factor spatial upsampling of an (N,C,D,H,W) tensor."""
    if int(factor) != factor or factor < 2:
        raise ValueError(f"upsample: factor must be an integer >= 2, got {factor}")
    if x.ndim != 5:
        raise ValueError(f"upsample: input must be 5-D, got shape {x.shape}")
    factor = int(factor)
    n, c, d, h, w = x.shape
    if mode == "nearest":
        out = np.broadcast_to(
            x.data[:, :, :, None, :, None, :, None], (n, c, d, factor, h, factor, w, factor)
        ).reshape(n, c, d * factor, h * factor, w * factor)

        def bw(g):
            return (g.reshape(n, c, d, factor, h, factor, w, factor).sum(axis=(3, 5, 7)),)

        return _make(np.ascontiguousarray(out), (x,), bw, "upsample_nearest")
    if mode == "trilinear":
        mats = [linear_interp_matrix(s, factor, x.dtype) for s in (d, h, w)]
        out = x.data
        for axis, m in zip((2, 3, 4), mats):
            out = _apply_along(out, m, axis)

        def bw(g):
            gi = g
            for axis, m in zip((2, 3, 4), mats):
                gi = _apply_along(gi, m.T, axis)
            return (np.ascontiguousarray(gi),)

        return _make(np.ascontiguousarray(out), (x,), bw, "upsample_trilinear")
    raise ValueError(f"upsample: unknown mode {mode!r}")


# --------------------------------------------------------------------------
# normalisation


@dataclass
class NormState:
    """Mode flag and running statistics for one normalisation layer."""

    training: bool = True
    momentum: float = 0.9
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None


def _norm_view(x: np.ndarray, mode: str, groups: int):
    n, c = x.shape[:2]
    if mode == "batch":
        return x.reshape(n, c, -1), (0, 2)
    if mode == "instance":
        return x.reshape(n, c, -1), (2,)
    if mode == "group":
        if groups < 1 or c % groups:
            raise ValueError(f"group norm: channels C={c} not divisible by groups g={groups}")
        return x.reshape(n, groups, -1), (2,)
    raise ValueError(f"unknown norm mode {mode!r}")


def normalize(
    x: Tensor,
    mode: str,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    state: NormState | None = None,
    groups: int = 4,
) -> Tensor:
    """Batch / group / instance normalisation with per-channel affine."""
    if x.ndim < 3:
        raise ValueError(f"normalize: expected (N,C,...) input, got shape {x.shape}")
    n, c = x.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"normalize: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    state = state if state is not None else NormState()
    xd = x.data
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gam = gamma.data.astype(xd.dtype, copy=False).reshape(bshape)
    bet = beta.data.astype(xd.dtype, copy=False).reshape(bshape)
    red_axes = (0,) + tuple(range(2, x.ndim))

    if mode == "batch" and not state.training:
        if state.running_mean is None:
            raise ValueError("batch norm in inference mode has no running statistics")
        rm = state.running_mean.astype(xd.dtype).reshape(bshape)
        inv = (1.0 / np.sqrt(state.running_var.astype(xd.dtype) + xd.dtype.type(eps))).reshape(bshape)
        xhat = (xd - rm) * inv
        out = xhat * gam + bet

        def bw_inf(g):
            return g * gam * inv, (g * xhat).sum(axis=red_axes), g.sum(axis=red_axes)

        return _make(out, (x, gamma, beta), bw_inf, "normalize")

    xv, axes = _norm_view(xd, mode, groups)
    mu = xv.mean(axis=axes, keepdims=True)
    xc = xv - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat_v = xc * inv
    xhat = xhat_v.reshape(xd.shape)
    out = xhat * gam + bet
    m = xv.size // mu.size

    if mode == "batch" and state.training:
        bm = mu.reshape(c).astype(np.float32)
        bv = (var.reshape(c) * (m / max(m - 1, 1))).astype(np.float32)
        if state.running_mean is None:
            state.running_mean = np.zeros(c, np.float32)
            state.running_var = np.ones(c, np.float32)
        mom = np.float32(state.momentum)
        state.running_mean = mom * state.running_mean + (np.float32(1) - mom) * bm
        state.running_var = mom * state.running_var + (np.float32(1) - mom) * bv

    def bw(g):
        dgamma = (g * xhat).sum(axis=red_axes)
        dbeta = g.sum(axis=red_axes)
        dxhat, _ = _norm_view(g * gam, mode, groups)
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat_v).sum(axis=axes, keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat_v * s2)
        return dx.reshape(xd.shape), dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "normalize")


# --------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: Iterable[Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: dict | None = None,
):
    """One SGD update with heavy-ball momentum and L2 decay; clears grads.

    ``velocity`` maps parameter names to buffers and is updated in place.
    """
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or i!r} has no gradient")
    velocity = {} if velocity is None else velocity
    for i, p in enumerate(params):
        key = p.name or str(i)
        d_p = p.grad.astype(p.dtype, copy=False)
        if weight_decay:
            d_p = d_p + p.dtype.type(weight_decay) * p.data
        v = velocity.get(key)
        if momentum:
            v = d_p.copy() if v is None else p.dtype.type(momentum) * v + d_p
            velocity[key] = v
            d_p = v
        p.data = p.data - p.dtype.type(lr) * d_p
        p.grad = None
    return velocity
