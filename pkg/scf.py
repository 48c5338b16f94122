"""
Space Coverage Feature (SCF) of a point relative to an object.

Rays are cast from the point in a quadrature set of directions; the hit
distances are normalized into F = (d_min + d_avg) / (d + d_avg), expanded
in real orthonormal spherical harmonics, and reduced to per-band powers,
which are invariant to rotations of the object/point pair.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from bvh import RayAccelerator
from errors import ScfError
from geometry import Geometry
from logging_config import get_logger
from models import DirectionScheme, ScfConfig

logger = get_logger(__name__)

FOUR_PI = 4.0 * np.pi
MAX_ORDER = 10
_POINTS_PER_CHUNK = 32
DOMAIN_TOLERANCE = 1e-9  # fraction of the domain box diagonal


# ============ Directions ============

@dataclass(frozen=True, eq=False)
class DirectionSet:
    directions: np.ndarray
    weights: np.ndarray
    scheme: DirectionScheme

    def __post_init__(self):
        if np.abs(np.linalg.norm(self.directions, axis=1) - 1.0).max() > 1e-12:
            raise ScfError("directions must be unit vectors")
        if np.any(self.weights <= 0):
            raise ScfError("quadrature weights must be positive")
        if abs(self.weights.sum() - FOUR_PI) > 1e-9:
            raise ScfError("quadrature weights must sum to 4π")
        self.directions.setflags(write=False)
        self.weights.setflags(write=False)

    def __len__(self) -> int:
        return len(self.directions)


def quadrature_floor(max_order: int) -> int:
    return (max_order + 1) ** 2 * 4


def make_direction_set(
    count: int,
    scheme: DirectionScheme = DirectionScheme.FIBONACCI,
    max_order: int = 5,
) -> DirectionSet:
    """
    Fibonacci: `count` quasi-uniform directions with weights 4π/count.
    Equiangular: a θ×φ midpoint grid with at most `count` nodes and sin θ
    weights rescaled to sum to 4π.
    """
    scheme = DirectionScheme(scheme)
    floor = quadrature_floor(max_order)
    if count < floor:
        raise ScfError(f"direction count {count} is below the quadrature floor {floor} for order {max_order}")

    if scheme == DirectionScheme.FIBONACCI:
        idx = np.arange(count, dtype=float) + 0.5
        polar = np.arccos(1.0 - 2.0 * idx / count)
        azimuth = 2.0 * np.pi * idx / ((1.0 + 5.0 ** 0.5) / 2.0)
        dirs = np.column_stack([
            np.cos(azimuth) * np.sin(polar),
            np.sin(azimuth) * np.sin(polar),
            np.cos(polar),
        ])
        weights = np.full(count, FOUR_PI / count)
    else:
        n_theta = max(2, int(np.sqrt(count / 2.0)))
        n_phi = max(4, count // n_theta)
        if n_theta * n_phi < floor:
            raise ScfError(f"equiangular grid {n_theta}x{n_phi} is below the quadrature floor {floor}")
        theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
        phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
        tt, pp = np.meshgrid(theta, phi, indexing="ij")
        tt, pp = tt.ravel(), pp.ravel()
        dirs = np.column_stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)])
        weights = np.sin(tt)
        weights = weights * (FOUR_PI / weights.sum())
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return DirectionSet(dirs, weights, scheme)


@lru_cache(maxsize=16)
def cached_direction_set(count: int, scheme: DirectionScheme, max_order: int) -> DirectionSet:
    return make_direction_set(count, scheme, max_order)


# ============ Spherical distance function ============

@dataclass(frozen=True, eq=False)
class SphericalSamples:
    values: np.ndarray
    raw_distances: np.ndarray  # inf marks a miss
    d_min: float
    d_avg: float


def normalize_distances(raw_distances: Sequence[float]) -> SphericalSamples:
    """F = (d_min + d_avg) / (d + d_avg) over hits, 0 on misses."""
    raw = np.asarray(raw_distances, dtype=float)
    hit = np.isfinite(raw)
    if not hit.any():
        raise ScfError("point sees no object")
    d_min = float(raw[hit].min())
    d_avg = float(raw[hit].mean())
    values = np.zeros_like(raw)
    values[hit] = (d_min + d_avg) / (raw[hit] + d_avg)
    return SphericalSamples(values, raw, d_min, d_avg)


def _normalize_rows(raw: np.ndarray) -> np.ndarray:
    hit = np.isfinite(raw)
    if not hit.any(axis=1).all():
        raise ScfError("point sees no object")
    masked = np.where(hit, raw, np.nan)
    d_min = np.nanmin(masked, axis=1, keepdims=True)
    d_avg = np.nanmean(masked, axis=1, keepdims=True)
    return np.where(hit, (d_min + d_avg) / (np.where(hit, raw, 0.0) + d_avg), 0.0)


def spherical_distance_function(accel: RayAccelerator, point: Sequence[float], dirs: DirectionSet) -> SphericalSamples:
    p = np.asarray(point, dtype=float).reshape(1, 3)
    raw = accel.cast(np.repeat(p, len(dirs), axis=0), dirs.directions)
    return normalize_distances(raw)


# ============ Spherical harmonics ============

def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def sh_basis_matrix(order: int, directions: np.ndarray) -> np.ndarray:
    """
    Real orthonormal spherical harmonics Y_l^m at each direction, columns
    ordered by sh_index. No Condon–Shortley phase; m > 0 uses √2·cos(mφ),
    m < 0 uses √2·sin(|m|φ).
    """
    if order > MAX_ORDER:
        raise ScfError(f"order {order} exceeds the supported maximum {MAX_ORDER}")
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    x = np.clip(d[:, 2], -1.0, 1.0)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    phi = np.arctan2(d[:, 1], d[:, 0])

    out = np.zeros((len(d), (order + 1) ** 2))
    for m in range(order + 1):
        # P_m^m, then upward in l for fixed m.
        pmm = np.ones_like(x)
        for i in range(1, m + 1):
            pmm = pmm * (2 * i - 1) * s
        legendre = {m: pmm}
        if m + 1 <= order:
            legendre[m + 1] = x * (2 * m + 1) * pmm
        for l in range(m + 2, order + 1):
            legendre[l] = ((2 * l - 1) * x * legendre[l - 1] - (l + m - 1) * legendre[l - 2]) / (l - m)
        for l in range(m, order + 1):
            norm = np.sqrt((2 * l + 1) / FOUR_PI * np.exp(gammaln(l - m + 1) - gammaln(l + m + 1)))
            if m == 0:
                out[:, sh_index(l, 0)] = norm * legendre[l]
            else:
                out[:, sh_index(l, m)] = np.sqrt(2.0) * norm * legendre[l] * np.cos(m * phi)
                out[:, sh_index(l, -m)] = np.sqrt(2.0) * norm * legendre[l] * np.sin(m * phi)
    return out


def sh_basis(l: int, m: int, direction: Sequence[float]) -> float:
    if abs(m) > l:
        raise ScfError(f"|m| must not exceed l (l={l}, m={m})")
    if l > MAX_ORDER:
        raise ScfError(f"band {l} exceeds the supported maximum {MAX_ORDER}")
    d = np.asarray(direction, dtype=float).reshape(1, 3)
    return float(sh_basis_matrix(l, d)[0, sh_index(l, m)])


@lru_cache(maxsize=16)
def _cached_basis(count: int, scheme: DirectionScheme, order: int) -> np.ndarray:
    dirs = cached_direction_set(count, scheme, order)
    basis = sh_basis_matrix(order, dirs.directions) * dirs.weights[:, None]
    basis.setflags(write=False)
    return basis


def sh_expand(samples, dirs: DirectionSet, order: int) -> np.ndarray:
    """
    Coefficients c_l^m = Σ_i w_i F(dir_i) Y_l^m(dir_i), indexed by sh_index.
    `samples` is a SphericalSamples or an array of F values (one row per function).
    """
    values = samples.values if isinstance(samples, SphericalSamples) else np.asarray(samples, dtype=float)
    if values.shape[-1] != len(dirs):
        raise ScfError("samples and directions are not aligned")
    if quadrature_floor(order) > len(dirs):
        raise ScfError(f"order {order} exceeds the quadrature capability of {len(dirs)} directions")
    basis = sh_basis_matrix(order, dirs.directions) * dirs.weights[:, None]
    return values @ basis


# ============ Descriptor ============

@dataclass(frozen=True, eq=False)
class ScfDescriptor:
    powers: np.ndarray
    order: int

    def __post_init__(self):
        if len(self.powers) != self.order + 1:
            raise ScfError("descriptor length must be order + 1")

    def to_list(self) -> list:
        return self.powers.tolist()


def band_powers(coefficients: np.ndarray, order: int) -> np.ndarray:
    """Per-band L2 norms; works row-wise on a (k, (order+1)^2) array."""
    coeffs = np.asarray(coefficients, dtype=float)
    if coeffs.shape[-1] < (order + 1) ** 2:
        raise ScfError("coefficients are incomplete for the requested order")
    return np.stack(
        [np.sqrt(np.sum(coeffs[..., l * l:(l + 1) ** 2] ** 2, axis=-1)) for l in range(order + 1)],
        axis=-1,
    )


def scf_descriptor(coefficients: np.ndarray, order: int = 5) -> ScfDescriptor:
    return ScfDescriptor(band_powers(np.asarray(coefficients).reshape(-1), order), order)


def _require_in_domain(geom: Geometry, points: np.ndarray, scale: float) -> None:
    lo, hi = geom.domain_box(scale)
    tol = DOMAIN_TOLERANCE * float(np.linalg.norm(hi - lo))
    outside = np.any((points < lo - tol) | (points > hi + tol), axis=1)
    if outside.any():
        first = points[np.argmax(outside)]
        raise ScfError(f"{int(outside.sum())} query point(s) outside the SCF domain, e.g. {first.tolist()}")


def scf_batch(
    geom: Geometry,
    points: np.ndarray,
    config: Optional[ScfConfig] = None,
    threads: int = 1,
    check_domain: bool = True,
) -> np.ndarray:
    """
    SCF powers for many points, shape (P, order + 1).

    Points must lie in the object's domain box (bbox grown by
    `config.domain_scale`). Descriptor fields clamp or check against their
    own domain and pass `check_domain=False`.
    """
    config = config or ScfConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if check_domain:
        _require_in_domain(geom, pts, config.domain_scale)
    dirs = cached_direction_set(config.dir_count, config.scheme, config.order)
    basis = _cached_basis(config.dir_count, config.scheme, config.order)
    accel = geom.accelerator

    def run(chunk: np.ndarray) -> np.ndarray:
        origins = np.repeat(chunk, len(dirs), axis=0)
        directions = np.tile(dirs.directions, (len(chunk), 1))
        raw = accel.cast(origins, directions).reshape(len(chunk), len(dirs))
        return band_powers(_normalize_rows(raw) @ basis, config.order)

    chunks = [pts[s:s + _POINTS_PER_CHUNK] for s in range(0, len(pts), _POINTS_PER_CHUNK)]
    if not chunks:
        return np.zeros((0, config.order + 1))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return np.concatenate(results, axis=0)


def scf_at(geom: Geometry, point: Sequence[float], config: Optional[ScfConfig] = None) -> ScfDescriptor:
    config = config or ScfConfig()
    powers = scf_batch(geom, np.asarray(point, dtype=float).reshape(1, 3), config)[0]
    return ScfDescriptor(powers, config.order)
