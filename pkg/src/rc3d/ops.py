"""Differentiable kernels over :class:`~rc3d.tensor.Tensor`.

Convolutions and pooling are written once for any number of spatial axes
and exposed as the 2-D and 3-D entry points the networks use.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Context, Function, InvalidArgument, Tensor, as_tensor, working_dtype

AXIS_NAMES = {2: ("H", "W"), 3: ("T", "H", "W")}


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise InvalidArgument(f"expected {n} values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Kernel, stride and zero padding of one convolution layer."""

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    in_channels: int
    out_channels: int

    @classmethod
    def make(cls, in_channels, out_channels, kernel, stride=1, padding=0, dims=3) -> "ConvSpec":
        return cls(_tuple(kernel, dims), _tuple(stride, dims), _tuple(padding, dims),
                   int(in_channels), int(out_channels))

    @property
    def dims(self) -> int:
        return len(self.kernel)

    def output_extents(self, extents: Sequence[int]) -> tuple[int, ...]:
        names = AXIS_NAMES.get(self.dims, tuple(str(i) for i in range(self.dims)))
        out = []
        for name, n, k, s, p in zip(names, extents, self.kernel, self.stride, self.padding):
            span = n + 2 * p - k
            if span < 0 or k < 1 or s < 1:
                raise InvalidArgument(
                    f"axis {name}: extent {n} with padding {p} is smaller than kernel {k}")
            out.append(span // s + 1)
        return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape plumbing

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        ga = _unbroadcast(grad * b, a.shape) if ctx.needs[0] else None
        gb = _unbroadcast(grad * a, b.shape) if ctx.needs[1] else None
        return ga, gb


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


class Sum(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x.shape)
        return np.asarray(x.sum(dtype=np.float64), dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (np.full(shape, grad, dtype=working_dtype()),)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Sum.apply(x)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.saved[0]),)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class MeanAxes(Function):
    @staticmethod
    def forward(ctx, x, axes):
        ctx.save(x.shape, axes)
        return np.asarray(x.mean(axis=axes, keepdims=True, dtype=np.float64), dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        shape, axes = ctx.saved
        n = int(np.prod([shape[a] for a in axes]))
        return (np.broadcast_to(grad / n, shape).astype(working_dtype()),)


def mean(x: Tensor, axes) -> Tensor:
    """Mean over ``axes``, keeping them as size-1 dims."""
    axes = tuple(a % x.ndim for a in ((axes,) if isinstance(axes, int) else axes))
    return MeanAxes.apply(x, axes=axes)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes):
        ctx.save(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    @staticmethod
    def backward(ctx, grad):
        return (grad.transpose(ctx.saved[0]),)


def transpose(x: Tensor, axes) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


class Concat(Function):
    @staticmethod
    def forward(ctx, *xs, axis):
        ctx.save(axis, np.cumsum([x.shape[axis] for x in xs])[:-1])
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        axis, cuts = ctx.saved
        return tuple(np.split(grad, cuts, axis=axis))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, x.shape)) if i != axis):
            raise InvalidArgument(f"cannot concatenate shapes {ref} and {x.shape} on axis {axis}")
    return Concat.apply(*xs, axis=axis)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        ga = grad @ np.swapaxes(b, -1, -2) if ctx.needs[0] else None
        gb = np.swapaxes(a, -1, -2) @ grad if ctx.needs[1] else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise InvalidArgument(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# activations

class ShiftedLeakyReLU(Function):
    @staticmethod
    def forward(ctx, x, slope, shift):
        neg = x < 0
        ctx.save(neg, slope)
        return (np.where(neg, x * slope, x) - shift).astype(working_dtype())

    @staticmethod
    def backward(ctx, grad):
        neg, slope = ctx.saved
        return (np.where(neg, grad * slope, grad),)


def shifted_leaky_relu(x: Tensor, slope: float = 0.1, shift: float = 0.1) -> Tensor:
    """``max(slope*x, x) - shift``; the derivative at 0 is taken as 1."""
    if not 0.0 < slope < 1.0:
        raise InvalidArgument(f"slope must lie in (0, 1), got {slope}")
    return ShiftedLeakyReLU.apply(x, slope=float(slope), shift=float(shift))


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * out * (1.0 - out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis):
        out = _softmax(x, axis).astype(working_dtype())
        ctx.save(out, axis)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, axis = ctx.saved
        dot = (grad * out).sum(axis=axis, keepdims=True)
        return (out * (grad - dot),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted, evaluated in float64)."""
    return Softmax.apply(x, axis=axis)


# ---------------------------------------------------------------------------
# affine

class Linear(Function):
    @staticmethod
    def forward(ctx, x, w, b):
        ctx.save(x, w)
        return x @ w.T + b

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx.saved
        gx = grad @ w if ctx.needs[0] else None
        gw = grad.T @ x if ctx.needs[1] else None
        gb = grad.sum(axis=0) if ctx.needs[2] else None
        return gx, gw, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidArgument(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise InvalidArgument(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return Linear.apply(x, weight, bias)


# ---------------------------------------------------------------------------
# convolution

def _windows(xp: np.ndarray, kernel, stride) -> np.ndarray:
    """Strided view (N, C, *out, *kernel) of a padded input."""
    d = len(kernel)
    axes = tuple(range(2, 2 + d))
    view = sliding_window_view(xp, kernel, axis=axes)
    sl = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    return view[sl]


class ConvND(Function):
    @staticmethod
    def forward(ctx, x, w, b, stride, padding):
        d = w.ndim - 2
        pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
        xp = np.pad(x, pad) if any(padding) else x
        win = _windows(xp, w.shape[2:], stride)
        sp = tuple(range(2, 2 + d))
        ker = tuple(range(2 + d, 2 + 2 * d))
        # (N, *out, C') after contracting channels and kernel taps
        out = np.tensordot(win, w, axes=((1,) + ker, (1,) + tuple(range(2, 2 + d))))
        out = np.moveaxis(out, -1, 1)
        out += b.reshape((1, -1) + (1,) * d)
        ctx.save(xp, w, stride, padding, x.shape)
        return np.ascontiguousarray(out, dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        xp, w, stride, padding, xshape = ctx.saved
        d = w.ndim - 2
        sp = tuple(range(2, 2 + d))
        gx = gw = gb = None
        if ctx.needs[2]:
            gb = grad.sum(axis=(0,) + sp)
        if ctx.needs[1]:
            win = _windows(xp, w.shape[2:], stride)
            gw = np.tensordot(grad, win, axes=((0,) + sp, (0,) + sp)).astype(working_dtype())
        if ctx.needs[0]:
            # cols: (N, *out, C, *kernel)
            cols = np.tensordot(np.moveaxis(grad, 1, -1), w, axes=((d + 1,), (0,)))
            gxp = np.zeros(xp.shape, dtype=working_dtype())
            out_ext = grad.shape[2:]
            for tap in product(*(range(k) for k in w.shape[2:])):
                sl = (slice(None), slice(None)) + tuple(
                    slice(t, t + s * (n - 1) + 1, s) for t, s, n in zip(tap, stride, out_ext))
                piece = cols[(Ellipsis,) + tap]  # (N, *out, C)
                gxp[sl] += np.moveaxis(piece, -1, 1)
            inner = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, xshape[2:]))
            gx = np.ascontiguousarray(gxp[inner])
        return gx, gw, gb


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec, dims: int) -> None:
    names = ("N", "C") + AXIS_NAMES[dims]
    if x.ndim != dims + 2:
        raise InvalidArgument(f"expected input of rank {dims + 2} ({''.join(names)}), got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise InvalidArgument(f"axis C: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    expect = (spec.out_channels, spec.in_channels) + spec.kernel
    if weight.shape != expect:
        bad = next(i for i, (a, b) in enumerate(zip(weight.shape, expect)) if a != b) \
            if weight.ndim == len(expect) else None
        where = "rank" if bad is None else ("C'", "C", *AXIS_NAMES[dims])[bad]
        raise InvalidArgument(f"weight axis {where}: got shape {weight.shape}, expected {expect}")
    if bias.shape != (spec.out_channels,):
        raise InvalidArgument(f"bias axis C': got {bias.shape}, expected ({spec.out_channels},)")
    spec.output_extents(x.shape[2:])


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded 3-D cross-correlation over (N, C, T, H, W)."""
    _check_conv(x, weight, bias, spec, 3)
    return ConvND.apply(x, weight, bias, stride=spec.stride, padding=spec.padding)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded 2-D cross-correlation over (N, C, H, W)."""
    _check_conv(x, weight, bias, spec, 2)
    return ConvND.apply(x, weight, bias, stride=spec.stride, padding=spec.padding)


# ---------------------------------------------------------------------------
# pooling

class PoolND(Function):
    @staticmethod
    def forward(ctx, x, window, stride, mode):
        d = len(window)
        win = _windows(x, window, stride)
        flat = win.reshape(win.shape[: 2 + d] + (-1,))
        if mode == "max":
            arg = flat.argmax(axis=-1)  # first occurrence on ties
            out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        else:
            arg = None
            out = flat.mean(axis=-1, dtype=np.float64)
        ctx.save(x.shape, window, stride, mode, arg)
        return np.ascontiguousarray(out, dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        shape, window, stride, mode, arg = ctx.saved
        gx = np.zeros(shape, dtype=working_dtype())
        out_ext = grad.shape[2:]
        scale = 1.0 / float(np.prod(window))
        for flat_idx, tap in enumerate(product(*(range(k) for k in window))):
            sl = (slice(None), slice(None)) + tuple(
                slice(t, t + s * (n - 1) + 1, s) for t, s, n in zip(tap, stride, out_ext))
            if mode == "max":
                gx[sl] += np.where(arg == flat_idx, grad, 0.0)
            else:
                gx[sl] += grad * scale
        return (gx,)


def _pool(x: Tensor, mode: str, window, stride, dims: int) -> Tensor:
    if mode not in ("max", "avg"):
        raise InvalidArgument(f"pool mode must be 'max' or 'avg', got {mode!r}")
    window = _tuple(window, dims)
    stride = window if stride is None else _tuple(stride, dims)
    if x.ndim != dims + 2:
        raise InvalidArgument(f"expected rank-{dims + 2} input, got {x.shape}")
    for name, n, k, s in zip(AXIS_NAMES[dims], x.shape[2:], window, stride):
        if k < 1 or s < 1 or k > n:
            raise InvalidArgument(f"axis {name}: window {k} exceeds extent {n}")
    return PoolND.apply(x, window=window, stride=stride, mode=mode)


def pool3d(x: Tensor, mode: str, window, stride=None) -> Tensor:
    return _pool(x, mode, window, stride, 3)


def pool2d(x: Tensor, mode: str, window, stride=None) -> Tensor:
    return _pool(x, mode, window, stride, 2)


def adaptive_bins(length: int, out: int) -> list[tuple[int, int]]:
    return [((i * length) // out, ((i + 1) * length) // out) for i in range(out)]


class AdaptivePoolND(Function):
    @staticmethod
    def forward(ctx, x, out, mode):
        d = len(out)
        bins = [adaptive_bins(n, o) for n, o in zip(x.shape[2:], out)]
        res = np.empty(x.shape[:2] + tuple(out), dtype=working_dtype())
        routes = {}
        for idx in product(*(range(o) for o in out)):
            sl = (slice(None), slice(None)) + tuple(slice(*bins[a][i]) for a, i in enumerate(idx))
            block = x[sl]
            flat = block.reshape(block.shape[:2] + (-1,))
            if mode == "max":
                arg = flat.argmax(axis=-1)
                res[(slice(None), slice(None)) + idx] = np.take_along_axis(flat, arg[..., None], -1)[..., 0]
                routes[idx] = (sl, block.shape, arg)
            else:
                res[(slice(None), slice(None)) + idx] = flat.mean(axis=-1, dtype=np.float64)
                routes[idx] = (sl, block.shape, None)
        ctx.save(x.shape, routes, mode, d)
        return res

    @staticmethod
    def backward(ctx, grad):
        shape, routes, mode, d = ctx.saved
        gx = np.zeros(shape, dtype=working_dtype())
        for idx, (sl, bshape, arg) in routes.items():
            g = grad[(slice(None), slice(None)) + idx]
            n_el = int(np.prod(bshape[2:]))
            if mode == "max":
                local = np.zeros(bshape[:2] + (n_el,), dtype=working_dtype())
                np.put_along_axis(local, arg[..., None], g[..., None], axis=-1)
                gx[sl] += local.reshape(bshape)
            else:
                gx[sl] += (g / n_el).reshape(bshape[:2] + (1,) * d)
        return (gx,)


def adaptive_pool3d(x: Tensor, mode: str, out) -> Tensor:
    """Reduce each axis to ``out`` contiguous bins ``[floor(iL/o), floor((i+1)L/o))``."""
    if mode not in ("max", "avg"):
        raise InvalidArgument(f"pool mode must be 'max' or 'avg', got {mode!r}")
    out = _tuple(out, 3)
    if x.ndim != 5:
        raise InvalidArgument(f"expected (N, C, T, H, W) input, got {x.shape}")
    for name, n, o in zip(AXIS_NAMES[3], x.shape[2:], out):
        if o < 1:
            raise InvalidArgument(f"axis {name}: output extent must be positive, got {o}")
        if o > n:
            raise InvalidArgument(f"axis {name}: output extent {o} exceeds input extent {n}")
    return AdaptivePoolND.apply(x, out=out, mode=mode)


# ---------------------------------------------------------------------------
# regularization and resampling

class MaskScale(Function):
    @staticmethod
    def forward(ctx, x, mask):
        ctx.save(mask)
        return x * mask

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.saved[0],)


def dropout2d(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Drop whole channels with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise InvalidArgument(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise InvalidArgument("dropout2d in training mode needs an explicit rng")
    keep = rng.random(x.shape[:2]) >= p
    mask = (keep / (1.0 - p)).astype(working_dtype()).reshape(x.shape[:2] + (1,) * (x.ndim - 2))
    return MaskScale.apply(x, mask=mask)


class PixelShuffle(Function):
    @staticmethod
    def forward(ctx, x, r):
        n, c, h, w = x.shape
        ctx.save(r)
        out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(out.reshape(n, c // (r * r), h * r, w * r))

    @staticmethod
    def backward(ctx, grad):
        (r,) = ctx.saved
        n, c, hr, wr = grad.shape
        g = grad.reshape(n, c, hr // r, r, wr // r, r).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(g.reshape(n, c * r * r, hr // r, wr // r)),)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Move channel groups of size r*r into r-by-r spatial cells."""
    if x.ndim != 4:
        raise InvalidArgument(f"pixel_shuffle expects (N, C, H, W), got {x.shape}")
    if r < 1 or x.shape[1] % (r * r):
        raise InvalidArgument(f"axis C: {x.shape[1]} channels not divisible by r^2 = {r * r}")
    return PixelShuffle.apply(x, r=int(r))


class GatherAxes(Function):
    """Index each trailing spatial axis by an integer map (replicate padding)."""

    @staticmethod
    def forward(ctx, x, indices):
        ctx.save(x.shape, indices)
        out = x
        first = x.ndim - len(indices)
        for a, idx in enumerate(indices):
            out = np.take(out, idx, axis=first + a)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, grad):
        shape, indices = ctx.saved
        first = len(shape) - len(indices)
        g = grad
        for a in reversed(range(len(indices))):
            axis = first + a
            idx = indices[a]
            acc_shape = list(g.shape)
            acc_shape[axis] = shape[axis]
            acc = np.zeros(acc_shape, dtype=working_dtype())
            moved = np.moveaxis(acc, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            g = acc
        return (g,)


def pad_replicate(x: Tensor, pad) -> Tensor:
    """Replicate border values outward.

    ``pad`` holds one ``(before, after)`` pair (or a single int) per trailing
    spatial axis.
    """
    pairs = [(p, p) if isinstance(p, (int, np.integer)) else tuple(p) for p in pad]
    if len(pairs) > x.ndim:
        raise InvalidArgument(f"{len(pairs)} pad pairs for a rank-{x.ndim} tensor")
    first = x.ndim - len(pairs)
    indices = tuple(
        np.clip(np.arange(-lo, n + hi), 0, n - 1)
        for (lo, hi), n in zip(pairs, x.shape[first:])
    )
    return GatherAxes.apply(x, indices=indices)


def resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, align-corners-false."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    i = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor((i + 0.5) * scale).astype(int), n_in - 1)
        m[i, src] = 1.0
    elif mode == "bilinear":
        src = np.maximum((i + 0.5) * scale - 0.5, 0.0)
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        np.add.at(m, (i, lo), 1.0 - frac)
        np.add.at(m, (i, hi), frac)
    else:
        raise InvalidArgument(f"interpolation mode must be 'nearest' or 'bilinear', got {mode!r}")
    return m.astype(working_dtype())


class Resample2D(Function):
    @staticmethod
    def forward(ctx, x, mh, mw):
        ctx.save(mh, mw)
        return np.ascontiguousarray(np.einsum("ah,nchw,bw->ncab", mh, x, mw, optimize=True), dtype=working_dtype())

    @staticmethod
    def backward(ctx, grad):
        mh, mw = ctx.saved
        return (np.ascontiguousarray(np.einsum("ah,ncab,bw->nchw", mh, grad, mw, optimize=True), dtype=working_dtype()),)


def interpolate(x: Tensor, out, mode: str = "nearest") -> Tensor:
    if x.ndim != 4:
        raise InvalidArgument(f"interpolate expects (N, C, H, W), got {x.shape}")
    oh, ow = _tuple(out, 2)
    if oh < 1 or ow < 1:
        raise InvalidArgument(f"output extents must be positive, got {(oh, ow)}")
    h, w = x.shape[2:]
    if (oh, ow) == (h, w):
        return x
    return Resample2D.apply(x, mh=resample_matrix(h, oh, mode), mw=resample_matrix(w, ow, mode))
