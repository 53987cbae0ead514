"""Dense optical flow by polynomial expansion (Farneback) and motion images.

Frames are 2-D float arrays in [0, 1] indexed ``[y, x]``. Flow ``(u, v)`` at
pixel ``p`` means ``prev[p] ~ next[p + (u, v)]`` with ``u`` along x (columns)
and ``v`` along y (rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import InvalidArgument

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FrameGradients:
    fx: np.ndarray
    fy: np.ndarray
    ft: np.ndarray


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def stack(self) -> np.ndarray:
        """(2, H, W) array, the layout used for RC3D tensor files."""
        return np.stack([self.u, self.v]).astype(np.float32)

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FarnebackParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    # weight of the zeroth-order (brightness) matching row relative to the
    # quadratic-coefficient rows
    constant_weight: float = 1.0
    regularization: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise InvalidArgument(f"pyramid_scale must lie in (0, 1), got {self.pyramid_scale}")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise InvalidArgument(f"window_size must be odd, got {self.window_size}")
        _check_poly_n(self.poly_n)
        if self.pyramid_levels < 1 or self.iterations < 1:
            raise InvalidArgument("pyramid_levels and iterations must be at least 1")


@dataclass(frozen=True)
class PolyExpansion:
    """Per-pixel fit ``f(p + z) ~ z^T A z + b^T z + c`` with z = (x, y)."""

    A: np.ndarray  # (H, W, 2, 2)
    b: np.ndarray  # (H, W, 2)
    c: np.ndarray  # (H, W)


def _check_poly_n(poly_n: int) -> None:
    if poly_n < 3 or poly_n % 2 == 0:
        raise InvalidArgument(f"poly_n must be odd and at least 3, got {poly_n}")


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0, 1] to luma."""
    return np.tensordot(GRAY_WEIGHTS, np.asarray(rgb, dtype=np.float64), axes=(0, 0))


def _check_frame(name: str, frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise InvalidArgument(f"{name}: expected a 2-D intensity frame, got shape {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise InvalidArgument(f"{name}: frame contains non-finite values")
    return frame


def image_gradients(prev: np.ndarray, next: np.ndarray) -> FrameGradients:  # noqa: A002
    """Spatial gradients of the mean frame and the temporal difference."""
    prev = _check_frame("prev", prev)
    next = _check_frame("next", next)
    if prev.shape != next.shape:
        raise InvalidArgument(f"frame extents differ: {prev.shape} vs {next.shape}")
    avg = 0.5 * (prev + next)
    fy, fx = np.gradient(avg)
    return FrameGradients(fx=fx, fy=fy, ft=next - prev)


def _applicability(poly_n: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    r = poly_n // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    return t, np.exp(-t * t / (2.0 * sigma * sigma))


def polynomial_expansion(frame: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyExpansion:
    """Gaussian-weighted least-squares quadratic fit around every pixel."""
    _check_poly_n(poly_n)
    f = _check_frame("frame", frame)
    t, g = _applicability(poly_n, poly_sigma)
    # basis order: 1, x, y, x^2, y^2, xy  as (x power, y power)
    powers = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    moment = lambda k: float(np.sum(g * t ** k))  # noqa: E731
    gram = np.empty((6, 6))
    for i, (xi, yi) in enumerate(powers):
        for j, (xj, yj) in enumerate(powers):
            gram[i, j] = moment(xi + xj) * moment(yi + yj)
    # correlate along x (axis 1) with g*x^px, then along y (axis 0) with g*y^py
    by_x = {p: ndimage.correlate1d(f, g * t ** p, axis=1, mode="reflect") for p in range(3)}
    proj = np.stack([
        ndimage.correlate1d(by_x[px], g * t ** py, axis=0, mode="reflect") for px, py in powers
    ], axis=-1)
    r = proj @ np.linalg.inv(gram).T
    A = np.empty(f.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * r[..., 5]
    return PolyExpansion(A=A, b=r[..., 1:3].copy(), c=r[..., 0].copy())


def _resample(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre (align-corners-false) alignment."""
    h, w = img.shape[:2]
    ys = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    xs = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _pyramid(frame: np.ndarray, params: FarnebackParams) -> list[np.ndarray]:
    levels = [frame]
    min_side = max(params.poly_n, 8)
    for k in range(1, params.pyramid_levels):
        scale = params.pyramid_scale ** k
        shape = (int(round(frame.shape[0] * scale)), int(round(frame.shape[1] * scale)))
        if min(shape) < min_side:
            break
        sigma = (1.0 / scale - 1.0) * 0.5
        levels.append(_resample(ndimage.gaussian_filter(frame, sigma, mode="reflect"), shape))
    return levels


def _warp(arr: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``arr[..., y + v, x + u]`` bilinearly for each trailing component."""
    h, w = u.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = [yy + v, xx + u]
    flat = arr.reshape(h, w, -1)
    out = np.empty_like(flat)
    for k in range(flat.shape[-1]):
        out[..., k] = ndimage.map_coordinates(flat[..., k], coords, order=1, mode="nearest")
    return out.reshape(arr.shape)


def _update_flow(e1: PolyExpansion, e2: PolyExpansion, u: np.ndarray, v: np.ndarray,
                 params: FarnebackParams) -> tuple[np.ndarray, np.ndarray]:
    A2 = _warp(e2.A, u, v)
    b2 = _warp(e2.b, u, v)
    c2 = _warp(e2.c, u, v)
    A = 0.5 * (e1.A + A2)
    d0 = np.stack([u, v], axis=-1)
    delta_b = -0.5 * (b2 - e1.b) + np.einsum("...ij,...j->...i", A, d0)
    # zeroth-order row: brightness constancy linearised about the prior flow
    grad = 0.5 * (e1.b + b2)
    rhs_c = e1.c - c2 + np.einsum("...i,...i->...", grad, d0)

    wc = params.constant_weight
    g11 = A[..., 0, 0] ** 2 + A[..., 1, 0] ** 2 + wc * grad[..., 0] ** 2
    g12 = A[..., 0, 0] * A[..., 0, 1] + A[..., 1, 0] * A[..., 1, 1] + wc * grad[..., 0] * grad[..., 1]
    g22 = A[..., 0, 1] ** 2 + A[..., 1, 1] ** 2 + wc * grad[..., 1] ** 2
    h1 = A[..., 0, 0] * delta_b[..., 0] + A[..., 1, 0] * delta_b[..., 1] + wc * grad[..., 0] * rhs_c
    h2 = A[..., 0, 1] * delta_b[..., 0] + A[..., 1, 1] * delta_b[..., 1] + wc * grad[..., 1] * rhs_c

    box = lambda a: ndimage.uniform_filter(a, params.window_size, mode="reflect")  # noqa: E731
    g11, g12, g22, h1, h2 = (box(a) for a in (g11, g12, g22, h1, h2))
    lam = params.regularization
    g11 = g11 + lam
    g22 = g22 + lam
    det = g11 * g22 - g12 * g12
    return (g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det


def farneback_flow(prev: np.ndarray, next: np.ndarray,  # noqa: A002
                   params: FarnebackParams = FarnebackParams()) -> FlowField:
    """Coarse-to-fine dense flow from ``prev`` to ``next``."""
    prev = _check_frame("prev", prev)
    next = _check_frame("next", next)
    if prev.shape != next.shape:
        raise InvalidArgument(f"frame extents differ: {prev.shape} vs {next.shape}")
    if min(prev.shape) < 8:
        raise InvalidArgument(f"flow needs frames of at least 8x8, got {prev.shape}")
    pyr1 = _pyramid(prev, params)
    pyr2 = _pyramid(next, params)
    u = v = None
    for f1, f2 in zip(reversed(pyr1), reversed(pyr2)):
        h, w = f1.shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            ph, pw = u.shape
            u = _resample(u, (h, w)) * (w / pw)
            v = _resample(v, (h, w)) * (h / ph)
        e1 = polynomial_expansion(f1, params.poly_n, params.poly_sigma)
        e2 = polynomial_expansion(f2, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            u, v = _update_flow(e1, e2, u, v, params)
    return FlowField(u=u, v=v)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV -> RGB, all channels in [0, 1]; returns (3, ...)."""
    h6 = (np.asarray(h) % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ]
    out = np.zeros((3,) + np.shape(h))
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        out[0][m] = np.broadcast_to(r, m.shape)[m]
        out[1][m] = np.broadcast_to(g, m.shape)[m]
        out[2][m] = np.broadcast_to(b, m.shape)[m]
    return out


# magnitudes are normalized by max(peak, MOTION_FLOOR) so sub-pixel jitter stays dark
MOTION_FLOOR = 0.5


def flow_to_motion_image(flow: FlowField, floor: float = MOTION_FLOOR) -> np.ndarray:
    """Render flow as (3, H, W) RGB: hue = direction, value = relative magnitude."""
    mag = flow.magnitude
    peak = max(float(mag.max()), floor)
    value = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = (np.arctan2(flow.v, flow.u) / (2.0 * np.pi)) % 1.0
    rgb = hsv_to_rgb(hue, np.ones_like(mag), value)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def motion_image(frame_a: np.ndarray, frame_b: np.ndarray,
                 params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """Motion image between two (3, H, W) RGB frames."""
    return flow_to_motion_image(farneback_flow(to_gray(frame_a), to_gray(frame_b), params))
