"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the registration network and its losses need are
provided.  A :class:`Tape` records every node created from a forward pass;
:meth:`Tape.backward` may be called several times on the same tape with
different scalar losses, each call starting from fresh adjoint buffers.  This
is how the similarity and regularisation gradients are obtained from a single
forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# layer_id -> flat gradient vector (tensors concatenated in declaration order)
GradientSet = dict[str, np.ndarray]


class AutodiffError(ValueError):
    pass


@dataclass
class ParamGroup:
    """The tensors of one layer: conv weight, conv bias, norm scale/shift."""

    layer_id: str
    tensors: list[np.ndarray]
    names: tuple[str, ...] = ()
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self.tensors))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    def split(self, vec: np.ndarray) -> list[np.ndarray]:
        """Cut a flat vector into pieces shaped like this group's tensors."""
        if vec.shape != (self.size,):
            raise AutodiffError(f"group {self.layer_id!r}: expected {self.size} values, got {vec.shape}")
        out, i = [], 0
        for t in self.tensors:
            out.append(vec[i : i + t.size].reshape(t.shape))
            i += t.size
        return out


class Tensor:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "requires_grad", "param")

    def __init__(self, value, tape: "Tape", parents=(), vjp=None, requires_grad=False, param=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.param = param
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.groups: dict[str, ParamGroup] = {}

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def param(self, group: ParamGroup, index: int) -> Tensor:
        """Leaf node for ``group.tensors[index]`` (the array is not copied)."""
        self.groups.setdefault(group.layer_id, group)
        return Tensor(group.tensors[index], self, requires_grad=group.trainable,
                      param=(group.layer_id, index))

    def params(self, group: ParamGroup) -> list[Tensor]:
        return [self.param(group, i) for i in range(len(group.tensors))]

    def clear(self):
        """Drop recorded nodes; breaks the tape/tensor cycle so memory is freed at once."""
        self.nodes.clear()

    def backward(self, loss: Tensor, groups: Sequence[ParamGroup] | None = None) -> GradientSet:
        """Gradient of a scalar ``loss`` w.r.t. every trainable group.

        Forward values stay on the tape, so this can be called again with a
        different loss.  Groups that do not influence ``loss`` get zeros.
        """
        if loss.tape is not self:
            raise AutodiffError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if groups is None:
            groups = list(self.groups.values())
        acc = {g.layer_id: [np.zeros_like(t) for t in g.tensors] for g in groups if g.trainable}

        adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adj.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                layer_id, i = node.param
                if layer_id in acc:
                    acc[layer_id][i] = acc[layer_id][i] + g
                continue
            for parent, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not parent.requires_grad:
                    continue
                prev = adj.get(parent.index)
                adj[parent.index] = gp if prev is None else prev + gp
        return {k: np.concatenate([t.ravel() for t in ts]) for k, ts in acc.items()}


def _wrap(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise AutodiffError("at least one operand must be a Tensor")


def _node(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = parents[0].tape
    req = any(p.requires_grad for p in parents)
    return Tensor(value, tape, tuple(parents), vjp if req else None, req)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    out = a.value / b.value

    def vjp(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp)


def square(x: Tensor) -> Tensor:
    return _node(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def sum_all(x: Tensor) -> Tensor:
    return _node(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    return _node(np.asarray(x.value.mean()), (x,),
                 lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------- network ops

def _check_ndim(name, x, ndim):
    if x.value.ndim != ndim:
        raise AutodiffError(f"{name}: expected a {ndim}-D array, got shape {x.value.shape}")


def _im2col(x: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of ``(N, C, H, W)`` as a ``(k*k*C, N*ho*wo)`` matrix (offset-major rows)."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((k * k, c, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i * k + j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(k * k * c, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding ``k // 2`` (odd square kernels).

    ``x`` is ``(N, C, H, W)``, ``weight`` is ``(O, C, k, k)``.
    """
    _check_ndim("conv2d", x, 4)
    _check_ndim("conv2d", weight, 4)
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise AutodiffError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise AutodiffError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if stride < 1:
        raise AutodiffError(f"conv2d: stride must be >= 1, got {stride}")
    p = k // 2
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    cols = _im2col(x.value, k, stride, ho, wo)
    wk = weight.value.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = wk @ cols
    if bias is not None:
        out += bias.value[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        if x.requires_grad:
            if stride == 1 and o < c:
                # correlate the output gradient with the flipped kernel
                wflip = weight.value[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
                gx = (wflip @ _im2col(g, k, 1, h, w)).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                d = (wk.T @ gt).reshape(k * k, c, n, ho, wo)
                gxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[i * k + j]
                gx = gxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, vjp)


class BatchNormState:
    """Running statistics of one batch-norm layer (never gradient-updated)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, mode: str, state: BatchNormState) -> Tensor:
    """Per-channel batch norm over (N, H, W); ``mode`` is "train" or "eval"."""
    _check_ndim("batch_norm", x, 4)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise AutodiffError(f"batch_norm: input {x.shape} with scale {scale.shape} / shift {shift.shape}")
    axes = (0, 2, 3)
    if mode == "train":
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = x.value.size // c
        state.mean = (1 - state.momentum) * state.mean + state.momentum * mu
        unbiased = var * m / (m - 1) if m > 1 else var
        state.var = (1 - state.momentum) * state.var + state.momentum * unbiased
    elif mode == "eval":
        mu, var = state.mean, state.var
    else:
        raise AutodiffError(f"batch_norm: unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.value - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale.value[None, :, None, None] + shift.value[None, :, None, None]

    def vjp(g):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.value[None, :, None, None]
            if mode == "train":
                gx = inv[None, :, None, None] * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gscale, gshift

    return _node(out, (x, scale, shift), vjp)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.value > 0
    return _node(np.where(pos, x.value, slope * x.value), (x,),
                 lambda g: (np.where(pos, g, slope * g),))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""
    _check_ndim("maxpool2", x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise AutodiffError(f"maxpool2: spatial size {h}x{w} must be even")
    blocks = x.value.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _node(out, (x,), vjp)


def upsample_nearest2(x: Tensor) -> Tensor:
    _check_ndim("upsample_nearest2", x, 4)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)
    return _node(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_ndim("concat_channels", a, 4)
    _check_ndim("concat_channels", b, 4)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise AutodiffError(f"concat_channels: shapes {a.shape} and {b.shape} are incompatible")
    ca = a.shape[1]
    return _node(np.concatenate([a.value, b.value], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------- warping / filters

def warp(img: Tensor, flow: Tensor) -> Tensor:
    """Spatial transformer: bilinear sample of ``img`` at ``x + flow(x)``.

    ``img`` is ``(N, C, H, W)``, ``flow`` is ``(N, 2, H, W)`` with channel 0
    the x (column) displacement.  Coordinates are clamped to the image, so
    the displacement gradient vanishes where the sample point lies outside.
    """
    _check_ndim("warp", img, 4)
    _check_ndim("warp", flow, 4)
    n, c, h, w = img.shape
    if flow.shape != (n, 2, h, w):
        raise AutodiffError(f"warp: flow {flow.shape} does not match image {img.shape}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx + flow.value[:, 0]
    y = yy + flow.value[:, 1]
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0)[:, None]
    wy = (yc - y0)[:, None]
    bi = np.arange(n)[:, None, None]
    src = img.value.transpose(0, 2, 3, 1)  # N, H, W, C for gathering
    i00 = src[bi, y0, x0].transpose(0, 3, 1, 2)
    i01 = src[bi, y0, x1].transpose(0, 3, 1, 2)
    i10 = src[bi, y1, x0].transpose(0, 3, 1, 2)
    i11 = src[bi, y1, x1].transpose(0, 3, 1, 2)
    top = i00 + wx * (i01 - i00)
    bottom = i10 + wx * (i11 - i10)
    out = top + wy * (bottom - top)

    def vjp(g):
        gflow = None
        if flow.requires_grad:
            inx = ((x >= 0) & (x <= w - 1))
            iny = ((y >= 0) & (y <= h - 1))
            dx = ((1 - wy) * (i01 - i00) + wy * (i11 - i10)) * g
            dy = (bottom - top) * g
            gflow = np.stack([dx.sum(axis=1) * inx, dy.sum(axis=1) * iny], axis=1)
        gimg = None
        if img.requires_grad:
            base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
            gimg = np.zeros(n * c * h * w)
            for yi, xi, wgt in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                                (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
                flat = base + (yi * w + xi)[:, None]
                gimg += np.bincount(flat.ravel(), weights=(g * wgt).ravel(), minlength=gimg.size)
            gimg = gimg.reshape(n, c, h, w)
        return gimg, gflow

    return _node(out, (img, flow), vjp)


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    out = a
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r + 1, r)
        cs = np.cumsum(np.pad(out, pad), axis=axis)
        size = out.shape[axis]
        hi = np.take(cs, np.arange(k, k + size), axis=axis)
        lo = np.take(cs, np.arange(0, size), axis=axis)
        out = hi - lo
    return out


def box_sum(x: Tensor, window: int) -> Tensor:
    """Zero-padded ``window x window`` sum over the last two axes (self-adjoint)."""
    if window % 2 == 0 or window < 1:
        raise AutodiffError(f"box_sum: window must be a positive odd integer, got {window}")
    return _node(_box_sum(x.value, window), (x,), lambda g: (_box_sum(g, window),))


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """``out[i] = x[i+1] - x[i]`` along ``axis``; the last entry is 0."""
    a = x.value
    out = np.zeros_like(a)
    n = a.shape[axis]
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis], lo[axis] = slice(1, n), slice(0, n - 1)
    hi, lo = tuple(hi), tuple(lo)
    out[lo] = a[hi] - a[lo]

    def vjp(g):
        gx = np.zeros_like(g)
        gx[hi] += g[lo]
        gx[lo] -= g[lo]
        return (gx,)

    return _node(out, (x,), vjp)
