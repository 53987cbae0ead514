"""Weight initializers."""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, InvalidArgument


def kaiming_std(fan_in: int, slope: float = 0.1) -> float:
    return float(np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in)))


def kaiming_normal(shape, fan_in: int, slope: float, rng: np.random.Generator) -> np.ndarray:
    """Draw N(0, 2 / ((1 + slope^2) * fan_in)) samples of the given shape."""
    if fan_in < 1:
        raise InvalidArgument(f"fan_in must be positive, got {fan_in}")
    return (rng.standard_normal(shape) * kaiming_std(fan_in, slope)).astype(DTYPE)


def fan_in_of(weight_shape) -> int:
    return int(np.prod(weight_shape[1:]))


def icnr_init(shape, r: int, rng: np.random.Generator, slope: float = 0.1) -> np.ndarray:
    """Kaiming-initialize a sub-kernel and repeat each output channel r*r times.

    After ``pixel_shuffle`` by ``r`` the layer then reproduces nearest-neighbour
    upsampling of a convolution with ``shape[0] // r**2`` outputs.
    """
    if r < 1 or shape[0] % (r * r):
        raise InvalidArgument(f"output channels {shape[0]} not divisible by r^2 = {r * r}")
    sub_shape = (shape[0] // (r * r),) + tuple(shape[1:])
    sub = kaiming_normal(sub_shape, fan_in_of(shape), slope, rng)
    return np.repeat(sub, r * r, axis=0)
