"""
Interaction Bisector Surface extraction and importance sampling.

The bisector of objects A and B is the zero set of s(x) = d_A(x) - d_B(x).
s is evaluated on a regular grid filling the truncation sphere (the
smallest sphere enclosing both bounding spheres); grid edges with a sign
change are bisected until the points are equidistant to tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from bvh import penetration_depth
from errors import IbsError
from geometry import Geometry, RigidTransform, RngLike, as_rng, nearest_distances, write_point_ply
from logging_config import get_logger
from models import IbsConfig, ImportanceConfig

logger = get_logger(__name__)

_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class IbsPointSet:
    points: np.ndarray
    d_a: np.ndarray
    d_b: np.ndarray
    weights: np.ndarray
    center: np.ndarray
    radius: float

    def __len__(self) -> int:
        return len(self.points)

    @property
    def scene_diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def relative_equidistance(self) -> np.ndarray:
        return relative_equidistance(self.d_a, self.d_b)

    def subset(self, index: np.ndarray) -> "IbsPointSet":
        w = self.weights[index]
        return IbsPointSet(self.points[index], self.d_a[index], self.d_b[index],
                           w / w.sum() if len(w) else w, self.center, self.radius)

    def transformed(self, transform: RigidTransform) -> "IbsPointSet":
        return IbsPointSet(transform.apply(self.points), self.d_a, self.d_b, self.weights,
                           transform.apply(self.center), self.radius)


def relative_equidistance(d_a: np.ndarray, d_b: np.ndarray) -> np.ndarray:
    return np.abs(d_a - d_b) / np.maximum(np.maximum(d_a, d_b), _EPS)


def truncation_sphere(geom_a: Geometry, geom_b: Geometry) -> Tuple[np.ndarray, float]:
    """Smallest sphere enclosing both objects' bounding spheres."""
    c1, r1 = geom_a.bounding_sphere
    c2, r2 = geom_b.bounding_sphere
    gap = float(np.linalg.norm(c2 - c1))
    if gap + r2 <= r1:
        return c1.copy(), r1
    if gap + r1 <= r2:
        return c2.copy(), r2
    radius = 0.5 * (gap + r1 + r2)
    return c1 + (c2 - c1) / gap * (radius - r1), radius


def interpenetration(geom_a: Geometry, geom_b: Geometry, samples: int = 512) -> float:
    """Penetration depth in either direction; 0 when neither side admits an inside test."""
    depth = 0.0
    if geom_b.is_watertight():
        depth = max(depth, penetration_depth(geom_a, geom_b, samples))
    if geom_a.is_watertight():
        depth = max(depth, penetration_depth(geom_b, geom_a, samples))
    return depth


def importance_weights(
    d_a: np.ndarray,
    config: Optional[ImportanceConfig] = None,
    scene_diameter: float = 1.0,
) -> np.ndarray:
    """w ∝ 1 / (d_A + δ)^p, normalized to sum 1."""
    config = config or ImportanceConfig()
    delta = config.delta if config.delta is not None else config.delta_fraction * scene_diameter
    w = 1.0 / (np.asarray(d_a, dtype=float) + delta) ** config.exponent
    return w / w.sum()


def _grid(center: np.ndarray, radius: float, res: int) -> Tuple[np.ndarray, float]:
    axis = np.linspace(-radius, radius, res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1) + center
    return pts, float(axis[1] - axis[0])


def compute_ibs(
    geom_a: Geometry,
    geom_b: Geometry,
    config: Optional[IbsConfig] = None,
    importance: Optional[ImportanceConfig] = None,
) -> IbsPointSet:
    config = config or IbsConfig()
    center, base_radius = truncation_sphere(geom_a, geom_b)
    radius = base_radius * config.truncation

    depth = interpenetration(geom_a, geom_b, config.penetration_samples)
    if depth > config.contact_tolerance * 2.0 * base_radius:
        raise IbsError(f"objects interpenetrate (depth {depth:.4g}); no consistent bisector")

    res = config.grid_res
    pts, spacing = _grid(center, radius, res)
    flat = pts.reshape(-1, 3)
    near = np.linalg.norm(flat - center, axis=1) <= radius + spacing * np.sqrt(3.0)
    s = np.full(len(flat), np.nan)
    s[near] = nearest_distances(geom_a, flat[near]) - nearest_distances(geom_b, flat[near])
    s = s.reshape(res, res, res)

    lo_pts, hi_pts, lo_s = [], [], []
    for axis in range(3):
        first = [slice(None)] * 3
        second = [slice(None)] * 3
        first[axis] = slice(0, res - 1)
        second[axis] = slice(1, res)
        s0, s1 = s[tuple(first)], s[tuple(second)]
        crossing = np.isfinite(s0) & np.isfinite(s1) & ((s0 < 0) != (s1 < 0))
        lo_pts.append(pts[tuple(first)][crossing])
        hi_pts.append(pts[tuple(second)][crossing])
        lo_s.append(s0[crossing])
    lo = np.concatenate(lo_pts)
    hi = np.concatenate(hi_pts)
    lo_negative = np.concatenate(lo_s) < 0
    if len(lo) == 0:
        raise IbsError("empty bisector: no sign change inside the truncation sphere")

    points, d_a, d_b = _bisect(geom_a, geom_b, lo, hi, lo_negative, config, radius)

    keep = (relative_equidistance(d_a, d_b) < config.equidistance_tol) & (
        np.linalg.norm(points - center, axis=1) <= radius
    )
    if not keep.any():
        raise IbsError("empty bisector: objects too far apart for the truncation sphere")
    points, d_a, d_b = points[keep], d_a[keep], d_b[keep]
    logger.debug("IBS: %d sign-change edges, %d points kept", len(lo), len(points))
    return IbsPointSet(points, d_a, d_b, importance_weights(d_a, importance, 2.0 * base_radius), center, radius)


def _bisect(geom_a, geom_b, lo, hi, lo_negative, config: IbsConfig, radius: float):
    """Vectorized bisection over all bracketing edges."""
    lo, hi = lo.copy(), hi.copy()
    n = len(lo)
    mid = 0.5 * (lo + hi)
    d_a = nearest_distances(geom_a, mid)
    d_b = nearest_distances(geom_b, mid)
    active = np.ones(n, dtype=bool)
    target = 1e-2 * config.equidistance_tol
    width_floor = 1e-12 * max(radius, 1.0)
    for _ in range(config.max_bisection_iters):
        done = (relative_equidistance(d_a, d_b) < target) | (np.linalg.norm(hi - lo, axis=1) < width_floor)
        active &= ~done
        if not active.any():
            break
        idx = np.flatnonzero(active)
        negative = (d_a[idx] - d_b[idx]) < 0
        move_lo = negative == lo_negative[idx]
        lo[idx[move_lo]] = mid[idx[move_lo]]
        hi[idx[~move_lo]] = mid[idx[~move_lo]]
        mid[idx] = 0.5 * (lo[idx] + hi[idx])
        d_a[idx] = nearest_distances(geom_a, mid[idx])
        d_b[idx] = nearest_distances(geom_b, mid[idx])
    return mid, d_a, d_b


def importance_indices(ibs: IbsPointSet, count: int, seed: RngLike = 0) -> np.ndarray:
    if len(ibs) == 0:
        raise IbsError("cannot sample an empty bisector")
    if count > len(ibs):
        raise IbsError(f"requested {count} samples from a bisector of {len(ibs)} points")
    return as_rng(seed).choice(len(ibs), size=count, replace=False, p=ibs.weights)


def importance_sample(
    ibs: IbsPointSet,
    count: int,
    config: Optional[ImportanceConfig] = None,
    seed: RngLike = 0,
) -> np.ndarray:
    """Weighted sampling without replacement; weights favour points close to the anchor."""
    if config is not None:
        ibs = IbsPointSet(ibs.points, ibs.d_a, ibs.d_b,
                          importance_weights(ibs.d_a, config, ibs.scene_diameter), ibs.center, ibs.radius)
    return ibs.points[importance_indices(ibs, count, seed)]


def save_ibs(ibs: IbsPointSet, path: Union[str, Path]) -> Path:
    return write_point_ply(path, ibs.points, scalars={"d_a": ibs.d_a, "d_b": ibs.d_b, "weight": ibs.weights})
