"""
Bounding-volume hierarchy over triangles or splat spheres.

Traversal is breadth-first over batches of rays: each round tests every
live (ray, node) pair against its box at once, expands interior nodes and
tests leaf primitives, so the per-ray Python overhead is a handful of
numpy calls per tree level.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import GeometryError
from geometry import Geometry, nearest_distances, sample_surface
from logging_config import get_logger

logger = get_logger(__name__)

LEAF_SIZE = 4
HIT_EPS = 1e-12
DIRECTION_TOL = 1e-9
_RAY_CHUNK = 65536

# Irrational-looking directions so parity rays avoid grazing edges of axis-aligned meshes.
_PARITY_DIRECTIONS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
    [0.8164965809277260, -0.4082482904638630, 0.4082482904638630],
])
_PARITY_DIRECTIONS = _PARITY_DIRECTIONS + np.array([1e-3, -2e-3, 3e-3])
_PARITY_DIRECTIONS /= np.linalg.norm(_PARITY_DIRECTIONS, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class RayAccelerator:
    """Flattened BVH; a node with count > 0 is a leaf over order[start:start+count]."""
    is_mesh: bool
    node_lo: np.ndarray
    node_hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    # mesh primitives: v0, edge1, edge2; splat primitives: centers + radius
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    radius: float
    center: np.ndarray
    sphere_radius: float

    @property
    def bounding_sphere(self) -> Tuple[np.ndarray, float]:
        return self.center, self.sphere_radius

    @property
    def primitive_count(self) -> int:
        return len(self.order)

    @classmethod
    def build(cls, geom: Geometry, leaf_size: int = LEAF_SIZE) -> "RayAccelerator":
        if geom.is_mesh:
            tv = geom.triangle_vertices
            prim_lo, prim_hi = tv.min(axis=1), tv.max(axis=1)
            v0, e1, e2 = tv[:, 0], tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]
            radius = 0.0
        else:
            v0 = geom.vertices
            radius = geom.splat_radius
            prim_lo, prim_hi = v0 - radius, v0 + radius
            e1 = e2 = np.zeros((0, 3))
        centers = 0.5 * (prim_lo + prim_hi)
        pad = 1e-9 * max(float(np.abs(prim_hi).max()), float(np.abs(prim_lo).max()), 1.0)

        lo_list, hi_list, left, right, start, count = [], [], [], [], [], []
        order = []
        stack = [(np.arange(len(centers)), -1, 0)]  # (prims, parent, which child)
        while stack:
            prims, parent, side = stack.pop()
            node = len(lo_list)
            lo_list.append(prim_lo[prims].min(axis=0) - pad)
            hi_list.append(prim_hi[prims].max(axis=0) + pad)
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            if parent >= 0:
                if side == 0:
                    left[parent] = node
                else:
                    right[parent] = node

            c = centers[prims]
            extent = c.max(axis=0) - c.min(axis=0)
            if len(prims) <= leaf_size or extent.max() <= 0.0:
                start[node] = len(order)
                count[node] = len(prims)
                order.extend(prims.tolist())
                continue
            axis = int(np.argmax(extent))
            half = len(prims) // 2
            split = np.argpartition(c[:, axis], half)
            stack.append((prims[split[half:]], node, 1))
            stack.append((prims[split[:half]], node, 0))

        accel = cls(
            is_mesh=geom.is_mesh,
            node_lo=np.asarray(lo_list),
            node_hi=np.asarray(hi_list),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            start=np.asarray(start, dtype=np.int64),
            count=np.asarray(count, dtype=np.int64),
            order=np.asarray(order, dtype=np.int64),
            v0=v0, e1=e1, e2=e2, radius=radius,
            center=geom.bounding_sphere[0],
            sphere_radius=geom.bounding_sphere[1],
        )
        logger.debug("Built BVH: %d primitives, %d nodes", len(order), len(lo_list))
        return accel

    # ---- primitive tests ----

    def _hit_primitives(self, origins: np.ndarray, dirs: np.ndarray, prims: np.ndarray) -> np.ndarray:
        """Smallest positive hit parameter per (ray, primitive) pair, inf on miss."""
        return self._primitive_hits(origins, dirs, prims)[0]

    def _primitive_hits(self, origins, dirs, prims):
        if self.is_mesh:
            t = _ray_triangle(origins, dirs, self.v0[prims], self.e1[prims], self.e2[prims])
            return t, t
        return _ray_sphere(origins, dirs, self.v0[prims], self.radius)

    # ---- traversal ----

    def _traverse(self, origins: np.ndarray, dirs: np.ndarray, count_hits: bool = False) -> np.ndarray:
        n = len(origins)
        best = np.full(n, np.inf)
        hits = np.zeros(n, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        ray = np.arange(n)
        node = np.zeros(n, dtype=np.int64)
        while ray.size:
            o, inv_d = origins[ray], inv[ray]
            with np.errstate(invalid="ignore"):
                t1 = (self.node_lo[node] - o) * inv_d
                t2 = (self.node_hi[node] - o) * inv_d
            t_near = np.fmax.reduce(np.fmin(t1, t2), axis=1)
            t_far = np.fmin.reduce(np.fmax(t1, t2), axis=1)
            keep = t_far >= np.maximum(t_near, 0.0)
            if not count_hits:
                keep &= t_near <= best[ray] * (1.0 + 1e-9) + 1e-12
            ray, node = ray[keep], node[keep]

            leaf = self.count[node] > 0
            if leaf.any():
                leaf_ray, leaf_node = ray[leaf], node[leaf]
                counts = self.count[leaf_node]
                pair_ray = np.repeat(leaf_ray, counts)
                offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                prims = self.order[np.repeat(self.start[leaf_node], counts) + offsets]
                if count_hits:
                    near, far = self._primitive_hits(origins[pair_ray], dirs[pair_ray], prims)
                    np.add.at(hits, pair_ray, np.isfinite(near).astype(np.int64))
                    if not self.is_mesh:
                        np.add.at(hits, pair_ray, (np.isfinite(far) & (far != near)).astype(np.int64))
                else:
                    t = self._hit_primitives(origins[pair_ray], dirs[pair_ray], prims)
                    np.minimum.at(best, pair_ray, t)

            inner = ~leaf
            ray = np.concatenate([ray[inner], ray[inner]])
            node = np.concatenate([self.left[node[inner]], self.right[node[inner]]])
        return hits if count_hits else best

    def cast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """First-hit distances for a batch of rays (inf on miss); directions must be unit."""
        origins, dirs = _check_rays(origins, dirs)
        out = np.empty(len(origins))
        for s in range(0, len(origins), _RAY_CHUNK):
            out[s:s + _RAY_CHUNK] = self._traverse(origins[s:s + _RAY_CHUNK], dirs[s:s + _RAY_CHUNK])
        return out

    def cast_brute(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Reference first-hit distances testing every primitive."""
        origins, dirs = _check_rays(origins, dirs)
        out = np.full(len(origins), np.inf)
        prims = np.arange(self.primitive_count)
        for i in range(len(origins)):
            o = np.repeat(origins[i:i + 1], len(prims), axis=0)
            d = np.repeat(dirs[i:i + 1], len(prims), axis=0)
            out[i] = self._hit_primitives(o, d, prims).min()
        return out

    def count_crossings(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        origins, dirs = _check_rays(origins, dirs)
        return self._traverse(origins, dirs, count_hits=True)


def _check_rays(origins, dirs) -> Tuple[np.ndarray, np.ndarray]:
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    if len(origins) != len(dirs):
        raise GeometryError("origins and directions must have equal length")
    if len(dirs) and np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() > DIRECTION_TOL:
        raise GeometryError("unnormalized direction")
    return origins, dirs


def _ray_triangle(o, d, v0, e1, e2) -> np.ndarray:
    """Möller–Trumbore; returns t > HIT_EPS or inf."""
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-300
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv_det
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv_det
    t = np.einsum("ij,ij->i", e2, q) * inv_det
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > HIT_EPS)
    return np.where(hit, t, np.inf)


def _ray_sphere(o, d, centers, radius) -> Tuple[np.ndarray, np.ndarray]:
    """(first positive hit, exit hit) against spheres of one radius; inf on miss."""
    oc = o - centers
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    valid = disc >= 0.0
    near = np.where(valid & (t0 > HIT_EPS), t0, np.where(valid & (t1 > HIT_EPS), t1, np.inf))
    far = np.where(valid & (t1 > HIT_EPS), t1, np.inf)
    return near, far


def cast_ray(accel: RayAccelerator, origin: Sequence[float], direction: Sequence[float]) -> Optional[float]:
    """Hit distance of a single ray, or None on miss."""
    t = accel.cast(np.asarray(origin, dtype=float).reshape(1, 3), np.asarray(direction, dtype=float).reshape(1, 3))[0]
    return float(t) if np.isfinite(t) else None


def cast_rays(accel: RayAccelerator, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    return accel.cast(origins, directions)


def contains(geom: Geometry, points: np.ndarray) -> np.ndarray:
    """
    Inside test by ray parity, majority vote over three directions.
    Requires a watertight mesh.
    """
    if not geom.is_mesh:
        raise GeometryError("inside test needs a mesh")
    if not geom.is_watertight():
        raise GeometryError("inside test needs a watertight mesh")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    votes = np.zeros(len(pts), dtype=np.int64)
    accel = geom.accelerator
    for d in _PARITY_DIRECTIONS:
        dirs = np.repeat(d[None, :], len(pts), axis=0)
        crossings = np.empty(len(pts), dtype=np.int64)
        for s in range(0, len(pts), _RAY_CHUNK):
            crossings[s:s + _RAY_CHUNK] = accel.count_crossings(pts[s:s + _RAY_CHUNK], dirs[s:s + _RAY_CHUNK])
        votes += crossings % 2
    return votes >= 2


def penetration_depth(geom_a: Geometry, geom_b: Geometry, samples: int = 1024, seed: int = 0) -> float:
    """
    Deepest penetration of A's surface into B: the largest distance to B's
    surface over sampled A points (and A's vertices) that lie inside B.
    """
    pts = np.concatenate([sample_surface(geom_a, samples, seed), geom_a.vertices])
    inside = contains(geom_b, pts)
    if not inside.any():
        return 0.0
    return float(nearest_distances(geom_b, pts[inside]).max())
