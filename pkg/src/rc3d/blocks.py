"""Residual 3-D blocks, pooling heads and the 2-D blocks of the depth GAN."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ops
from .nn import Activation, ConvLayer, Module
from .tensor import DTYPE, InvalidArgument, Parameter, Tensor


def default_mid(out_ch: int) -> int:
    return max(out_ch // 4, 1)


def _check_channels(in_ch: int, out_ch: int, mid: int) -> None:
    if min(in_ch, out_ch, mid) < 1:
        raise InvalidArgument(f"channel counts must be positive, got in={in_ch} out={out_ch} mid={mid}")


class P3DBlockA(Module):
    """Pseudo-3D block A: 1x1x1 -> 1x3x3 spatial -> 3x1x1 temporal -> 1x1x1, plus identity."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, mid: int | None = None,
                 act: Activation = Activation()):
        super().__init__()
        mid = out_ch if mid is None else mid
        _check_channels(in_ch, out_ch, mid)
        self.act = act
        s = act.slope
        self.expand = ConvLayer(in_ch, mid, 1, rng, slope=s)
        self.spatial = ConvLayer(mid, mid, (1, 3, 3), rng, padding=(0, 1, 1), slope=s)
        self.temporal = ConvLayer(mid, mid, (3, 1, 1), rng, padding=(1, 0, 0), slope=s)
        self.project = ConvLayer(mid, out_ch, 1, rng, slope=s)
        if in_ch != out_ch:
            self.resize = ConvLayer(in_ch, out_ch, 1, rng, slope=s)
        self.in_ch, self.out_ch, self.mid = in_ch, out_ch, mid

    def terminal(self) -> ConvLayer:
        return self.project

    def forward(self, x: Tensor) -> Tensor:
        a = self.act
        y = a(self.expand(x))
        y = a(self.spatial(y))
        y = a(self.temporal(y))
        y = self.project(y)
        skip = self.resize(x) if self.in_ch != self.out_ch else x
        return a(skip + y)


class RC3DBlock(Module):
    """Bottleneck residual block with a joint 3x3x3 spatio-temporal filter.

    ``pool=True`` appends a spatial-only (1, 2, 2) max pool, keeping T intact.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, c_mid: int | None = None,
                 act: Activation = Activation(), pool: bool = False):
        super().__init__()
        c_mid = default_mid(out_ch) if c_mid is None else c_mid
        _check_channels(in_ch, out_ch, c_mid)
        self.act = act
        s = act.slope
        self.compress = ConvLayer(in_ch, c_mid, 1, rng, slope=s)
        self.conv_mid = ConvLayer(c_mid, c_mid, 3, rng, padding=1, slope=s)
        self.decompress = ConvLayer(c_mid, out_ch, 1, rng, slope=s)
        if in_ch != out_ch:
            self.resize = ConvLayer(in_ch, out_ch, 1, rng, slope=s)
        self.in_ch, self.out_ch, self.c_mid, self.pool = in_ch, out_ch, c_mid, pool

    def terminal(self) -> ConvLayer:
        return self.decompress

    def forward(self, x: Tensor) -> Tensor:
        a = self.act
        y = a(self.compress(x))
        y = a(self.conv_mid(y))
        y = self.decompress(y)
        skip = self.resize(x) if self.in_ch != self.out_ch else x
        out = a(skip + y)
        if self.pool:
            out = ops.pool3d(out, "max", (1, 2, 2), (1, 2, 2))
        return out


def rc3d_mp_block(in_ch: int, out_ch: int, rng: np.random.Generator, c_mid: int | None = None,
                  act: Activation = Activation()) -> RC3DBlock:
    return RC3DBlock(in_ch, out_ch, rng, c_mid, act, pool=True)


def stack_pool(x: Tensor) -> Tensor:
    """Concatenate global max and global average pooling: (N, C, ...) -> (N, 2C, 1, 1, 1)."""
    return ops.concat([ops.adaptive_pool3d(x, "max", 1), ops.adaptive_pool3d(x, "avg", 1)], axis=1)


def stack_pool_streams(xs: Sequence[Tensor]) -> Tensor:
    """StackPool over the channel concatenation of several streams.

    Streams may differ in (T, H, W); the result is laid out as
    ``[max of each stream..., avg of each stream...]``, which is exactly
    ``stack_pool(concat(xs))`` whenever the extents agree.
    """
    maxes = [ops.adaptive_pool3d(x, "max", 1) for x in xs]
    avgs = [ops.adaptive_pool3d(x, "avg", 1) for x in xs]
    return ops.concat(maxes + avgs, axis=1)


class SelfAttention2d(Module):
    """Key/query/value self-attention with a learned residual gate starting at 0."""

    def __init__(self, ch: int, rng: np.random.Generator, slope: float = 0.1):
        super().__init__()
        inner = max(ch // 8, 1)
        self.query = ConvLayer(ch, inner, 1, rng, dims=2, slope=slope)
        self.key = ConvLayer(ch, inner, 1, rng, dims=2, slope=slope)
        self.value = ConvLayer(ch, ch, 1, rng, dims=2, slope=slope)
        self.gamma = Parameter(np.zeros(1, dtype=DTYPE))
        self.ch = ch

    def forward(self, x: Tensor, return_attention: bool = False):
        n, c, h, w = x.shape
        q = ops.reshape(self.query(x), (n, -1, h * w))
        k = ops.reshape(self.key(x), (n, -1, h * w))
        v = ops.reshape(self.value(x), (n, c, h * w))
        scores = ops.matmul(ops.transpose(q, (0, 2, 1)), k)       # (n, hw, hw)
        attn = ops.softmax(scores, axis=-1)
        o = ops.matmul(v, ops.transpose(attn, (0, 2, 1)))          # (n, c, hw)
        out = x + ops.reshape(self.gamma, (1, 1, 1, 1)) * ops.reshape(o, (n, c, h, w))
        return (out, attn) if return_attention else out


class DeconvBlock(Module):
    """Pixel-shuffle upsampling decoder stage with skip concatenation.

    conv (ICNR) -> shuffle x2 -> replicate pad right/bottom -> 2x2 stride-1
    average blur -> nearest resize to the skip -> concat -> 3x3 conv
    (-> self-attention when enabled).
    """

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, rng: np.random.Generator,
                 with_attention: bool = False, act: Activation = Activation()):
        super().__init__()
        self.up_ch = max(in_ch // 2, 1)
        self.act = act
        self.shuffle_conv = ConvLayer(in_ch, self.up_ch * 4, 1, rng, dims=2, slope=act.slope,
                                      init="icnr", icnr_r=2)
        self.fuse = ConvLayer(self.up_ch + skip_ch, out_ch, 3, rng, padding=1, dims=2, slope=act.slope)
        if with_attention:
            self.attention = SelfAttention2d(out_ch, rng, slope=act.slope)
        self.with_attention = with_attention

    def upsample(self, x: Tensor, size) -> Tensor:
        y = self.act(self.shuffle_conv(x))
        y = ops.pixel_shuffle(y, 2)
        if size[0] < y.shape[2] or size[1] < y.shape[3]:
            raise InvalidArgument(f"skip extents {tuple(size)} smaller than upsampled {y.shape[2:]}")
        y = ops.pad_replicate(y, ((0, 1), (0, 1)))
        y = ops.pool2d(y, "avg", 2, 1)
        return ops.interpolate(y, size, "nearest")

    def forward(self, x: Tensor, skip: Tensor, pre_attention: bool = False) -> Tensor:
        y = self.upsample(x, skip.shape[2:])
        if y.shape[2:] != skip.shape[2:]:
            raise RuntimeError(f"deconv block produced {y.shape[2:]} for skip {skip.shape[2:]}")
        out = self.act(self.fuse(ops.concat([y, skip], axis=1)))
        if self.with_attention and not pre_attention:
            out = self.attention(out)
        return out


class DOConv(Module):
    """Channel dropout followed by a 2-D convolution and activation."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, p: float = 0.1,
                 kernel: int = 3, stride: int = 1, act: Activation = Activation()):
        super().__init__()
        self.p = p
        self.act = act
        self.conv = ConvLayer(in_ch, out_ch, kernel, rng, stride=stride, padding=kernel // 2,
                              dims=2, slope=act.slope)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = ops.dropout2d(x, self.p, self.training, rng)
        return self.act(self.conv(x))
