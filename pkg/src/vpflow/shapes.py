"""Initial sets rasterised on a grid (a cell is inside when its centre is)."""

from __future__ import annotations

import math

import numpy as np

from .grid import GridGeometry, GridSet


def ball_volume(radius: float, ndim: int) -> float:
    return unit_ball_volume(ndim) * radius**ndim


def unit_ball_volume(ndim: int) -> float:
    return math.pi ** (ndim / 2) / math.gamma(ndim / 2 + 1)


def radius_for_volume(volume: float, ndim: int) -> float:
    """Radius of the ball with the given volume."""
    return (volume / unit_ball_volume(ndim)) ** (1.0 / ndim)


def _center(geometry: GridGeometry, center):
    if center is None:
        return np.zeros(geometry.ndim)
    center = np.asarray(center, dtype=float)
    if center.shape != (geometry.ndim,):
        raise ValueError("center needs one coordinate per axis")
    return center


def ellipsoid_mask(geometry: GridGeometry, semi_axes, center=None) -> np.ndarray:
    semi_axes = np.asarray(semi_axes, dtype=float)
    if semi_axes.shape != (geometry.ndim,) or np.any(semi_axes <= 0):
        raise ValueError("semi_axes must be positive, one per axis")
    x = geometry.centers() - _center(geometry, center)
    return ((x / semi_axes) ** 2).sum(axis=-1) <= 1.0


def ball(geometry: GridGeometry, radius: float, center=None) -> GridSet:
    if not radius > 0:
        raise ValueError("radius must be positive")
    return GridSet(geometry, ellipsoid_mask(geometry, [radius] * geometry.ndim, center))


def ellipse(geometry: GridGeometry, semi_axes, center=None) -> GridSet:
    """Ellipse (or ellipsoid in 3D) with the given semi-axes."""
    return GridSet(geometry, ellipsoid_mask(geometry, semi_axes, center))


def two_balls(geometry: GridGeometry, radius: float, gap: float, axis: int = 0) -> GridSet:
    """Two equal balls on ``axis``, symmetric about the origin, ``gap`` apart.

    ``gap = 0`` gives tangent balls.
    """
    if gap < 0:
        raise ValueError("gap must be non-negative")
    offset = np.zeros(geometry.ndim)
    offset[axis] = radius + 0.5 * gap
    r = [radius] * geometry.ndim
    mask = ellipsoid_mask(geometry, r, -offset) | ellipsoid_mask(geometry, r, offset)
    return GridSet(geometry, mask)


def dumbbell(geometry: GridGeometry, radius: float, separation: float, neck_width: float) -> GridSet:
    """Two balls with centres ``separation`` apart joined by a straight bar."""
    if neck_width <= 0 or neck_width > 2 * radius:
        raise ValueError("neck_width must lie in (0, 2*radius]")
    offset = np.zeros(geometry.ndim)
    offset[0] = 0.5 * separation
    r = [radius] * geometry.ndim
    mask = ellipsoid_mask(geometry, r, -offset) | ellipsoid_mask(geometry, r, offset)
    x = geometry.centers()
    across = np.sqrt((x[..., 1:] ** 2).sum(axis=-1))
    mask |= (np.abs(x[..., 0]) <= 0.5 * separation) & (across <= 0.5 * neck_width)
    return GridSet(geometry, mask)


def annulus(geometry: GridGeometry, r_in: float, r_out: float, center=None) -> GridSet:
    """Spherical shell ``r_in < |x| <= r_out``."""
    if not 0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    x = geometry.centers() - _center(geometry, center)
    rr = np.sqrt((x**2).sum(axis=-1))
    return GridSet(geometry, (rr > r_in) & (rr <= r_out))
