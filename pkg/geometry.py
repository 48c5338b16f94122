"""
Geometry primitives shared by every stage of the pipeline.

Objects are either triangle meshes or splat clouds (points treated as
spheres of radius `splat_radius` so that they can be ray cast). All
structures are immutable after construction; derived data (bounding
sphere, ray accelerator, distance index) is computed lazily and cached.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from errors import GeometryError
from logging_config import get_logger
from models import GeometryKind

logger = get_logger(__name__)

ORTHONORMAL_TOL = 1e-9
_KNN_SEED = 8
_CHUNK = 4096

RngLike = Union[None, int, np.random.Generator]


def as_rng(seed: RngLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ============ Rigid Transforms ============

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise GeometryError("rigid transform has non-finite entries")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("rotation determinant is not +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: np.ndarray, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from an approximately orthonormal matrix, projecting it onto SO(3)."""
        return cls(orthonormalize(rotation), translation)

    @classmethod
    def from_matrix(cls, matrix: Sequence[Sequence[float]]) -> "RigidTransform":
        m = np.asarray(matrix, dtype=float)
        if m.shape != (4, 4):
            raise GeometryError(f"expected a 4x4 matrix, got shape {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-12:
            raise GeometryError("last row of a rigid transform must be (0, 0, 0, 1)")
        return cls.from_rotation(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_list(self) -> list:
        return self.matrix().tolist()

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first."""
        return RigidTransform.from_rotation(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle(self) -> float:
        """Geodesic angle of the rotation part, in radians."""
        cos = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=float).reshape(3, 3))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    return t1.compose(t2)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def haar_random_rotation(seed: RngLike = None) -> np.ndarray:
    """Rotation matrix drawn uniformly (Haar measure) from SO(3)."""
    rng = as_rng(seed)
    return orthonormalize(Rotation.random(random_state=rng).as_matrix())


# ============ Geometry ============

@dataclass(frozen=True, eq=False)
class Geometry:
    kind: GeometryKind
    vertices: np.ndarray
    triangles: Optional[np.ndarray] = None
    splat_radius: Optional[float] = None

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(vertices) == 0:
            raise GeometryError("empty geometry")
        if not np.all(np.isfinite(vertices)):
            raise GeometryError("geometry has non-finite coordinates")
        triangles = None
        if self.kind == GeometryKind.MESH:
            if self.triangles is None or len(self.triangles) == 0:
                raise GeometryError("mesh has no triangles")
            triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise GeometryError("triangle index out of range")
            triangles.setflags(write=False)
        else:
            if self.splat_radius is None or not self.splat_radius > 0:
                raise GeometryError("splat cloud requires splat_radius > 0")
        if len(vertices) < 4 or _is_coplanar(vertices):
            raise GeometryError("degenerate geometry: need at least 4 non-coplanar points")
        vertices.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if self.splat_radius is not None:
            object.__setattr__(self, "splat_radius", float(self.splat_radius))

    # ---- constructors ----

    @classmethod
    def mesh(cls, vertices: np.ndarray, triangles: np.ndarray) -> "Geometry":
        return cls(GeometryKind.MESH, vertices, triangles)

    @classmethod
    def splat_cloud(cls, points: np.ndarray, splat_radius: Optional[float] = None) -> "Geometry":
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("empty geometry")
        if splat_radius is None:
            splat_radius = auto_splat_radius(pts)
        return cls(GeometryKind.SPLAT_CLOUD, pts, None, splat_radius)

    @property
    def is_mesh(self) -> bool:
        return self.kind == GeometryKind.MESH

    # ---- derived data ----

    @cached_property
    def triangle_vertices(self) -> np.ndarray:
        """(M, 3, 3) corner coordinates."""
        if not self.is_mesh:
            raise GeometryError("splat clouds have no triangles")
        return self.vertices[self.triangles]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        tv = self.triangle_vertices
        return 0.5 * np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)

    @cached_property
    def bounding_sphere(self) -> Tuple[np.ndarray, float]:
        center, radius = ritter_sphere(self.vertices)
        if not self.is_mesh:
            radius += self.splat_radius
        return center, radius

    @property
    def diameter(self) -> float:
        return 2.0 * self.bounding_sphere[1]

    @cached_property
    def bbox(self) -> Tuple[np.ndarray, np.ndarray]:
        pad = 0.0 if self.is_mesh else self.splat_radius
        return self.vertices.min(axis=0) - pad, self.vertices.max(axis=0) + pad

    def domain_box(self, scale: float = 1.5) -> Tuple[np.ndarray, np.ndarray]:
        """Bounding box grown by `scale` about its center."""
        lo, hi = self.bbox
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * scale
        return center - half, center + half

    @cached_property
    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid (mean point for splat clouds)."""
        if not self.is_mesh:
            return self.vertices.mean(axis=0)
        areas = self.triangle_areas
        if areas.sum() <= 0:
            return self.vertices.mean(axis=0)
        centers = self.triangle_vertices.mean(axis=1)
        return (centers * areas[:, None]).sum(axis=0) / areas.sum()

    @cached_property
    def accelerator(self):
        from bvh import RayAccelerator
        return RayAccelerator.build(self)

    @cached_property
    def _distance_index(self):
        if self.is_mesh:
            tv = self.triangle_vertices
            centers = tv.mean(axis=1)
            radii = np.linalg.norm(tv - centers[:, None, :], axis=2).max(axis=1)
            return cKDTree(centers), float(radii.max())
        return cKDTree(self.vertices), 0.0

    def edge_counts(self) -> np.ndarray:
        """How many triangles share each undirected edge."""
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return self.is_mesh and bool(np.all(self.edge_counts() == 2))

    def euler_characteristic(self) -> int:
        if not self.is_mesh:
            raise GeometryError("euler characteristic needs a mesh")
        used = np.unique(self.triangles).size
        return int(used - len(self.edge_counts()) + len(self.triangles))

    def transformed(self, transform: RigidTransform) -> "Geometry":
        return Geometry(self.kind, transform.apply(self.vertices), self.triangles, self.splat_radius)

    def scaled(self, factor: float, about: Optional[np.ndarray] = None) -> "Geometry":
        origin = np.zeros(3) if about is None else np.asarray(about, dtype=float)
        radius = None if self.splat_radius is None else self.splat_radius * factor
        return Geometry(self.kind, (self.vertices - origin) * factor + origin, self.triangles, radius)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)


def _is_coplanar(points: np.ndarray) -> bool:
    centered = points - points.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    scale = max(singular[0], 1e-300)
    return len(singular) < 3 or singular[2] <= 1e-9 * scale


def auto_splat_radius(points: np.ndarray) -> float:
    """Half the median nearest-neighbour spacing."""
    if len(points) < 2:
        raise GeometryError("auto splat radius needs at least two points")
    dist, _ = cKDTree(points).query(points, k=2)
    spacing = float(np.median(dist[:, 1]))
    if spacing <= 0:
        raise GeometryError("degenerate geometry: duplicated points")
    return 0.5 * spacing


def ritter_sphere(points: np.ndarray) -> Tuple[np.ndarray, float]:
    """Ritter's bounding sphere, then kept only if tighter than the bbox-centered sphere."""
    pts = np.asarray(points, dtype=float)
    x = pts[0]
    y = pts[np.argmax(np.linalg.norm(pts - x, axis=1))]
    z = pts[np.argmax(np.linalg.norm(pts - y, axis=1))]
    center = 0.5 * (y + z)
    radius = 0.5 * float(np.linalg.norm(z - y))
    for p in pts:
        d = float(np.linalg.norm(p - center))
        if d > radius:
            new_radius = 0.5 * (radius + d)
            center = center + (d - new_radius) / d * (p - center)
            radius = new_radius
    radius = float(np.linalg.norm(pts - center, axis=1).max())

    box_center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    box_radius = float(np.linalg.norm(pts - box_center, axis=1).max())
    if box_radius < radius:
        return box_center, box_radius
    return center, radius


def apply_transform(target: Union[Geometry, np.ndarray], transform: RigidTransform):
    """Transformed copy of a geometry or a point array."""
    if isinstance(target, Geometry):
        return target.transformed(transform)
    return transform.apply(target)


# ============ I/O ============

def load_geometry(
    path: Union[str, Path],
    format: Optional[str] = None,
    splat_radius: Optional[float] = None,
) -> Geometry:
    """
    Load an OBJ or PLY file.

    Files with faces become meshes; point-only files become splat clouds
    with the given radius, or half the median nearest-neighbour spacing
    when no radius is given.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Geometry file not found: {path}")
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply"):
        raise GeometryError(f"unsupported geometry format: {fmt}")
    if not path.read_bytes().strip():
        raise GeometryError("empty geometry")

    try:
        loaded = trimesh.load(str(path), file_type=fmt, process=False)
    except Exception as exc:
        raise GeometryError(f"failed to parse {path}: {exc}") from exc

    if isinstance(loaded, trimesh.Scene):
        meshes = [g for g in loaded.geometry.values() if isinstance(g, trimesh.Trimesh)]
        loaded = trimesh.util.concatenate(meshes) if meshes else None
    if loaded is None:
        raise GeometryError("empty geometry")

    vertices = np.asarray(getattr(loaded, "vertices", []), dtype=float)
    if len(vertices) == 0:
        raise GeometryError("empty geometry")
    faces = np.asarray(getattr(loaded, "faces", []), dtype=np.int64)
    if faces.size:
        geom = Geometry.mesh(vertices, faces)
    else:
        geom = Geometry.splat_cloud(vertices, splat_radius)
    logger.debug("Loaded %s: %s with %d vertices", path, geom.kind.value, len(geom.vertices))
    return geom


def save_geometry(geom: Geometry, path: Union[str, Path], colors: Optional[np.ndarray] = None) -> Path:
    """Write a mesh (OBJ/PLY) or a splat cloud (PLY), optionally with per-vertex RGB."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if geom.is_mesh:
        mesh = geom.to_trimesh()
        if colors is not None:
            mesh.visual.vertex_colors = _rgba(colors, len(geom.vertices))
        mesh.export(str(path))
    else:
        write_point_ply(path, geom.vertices, colors=colors)
    return path


def write_point_ply(
    path: Union[str, Path],
    points: np.ndarray,
    colors: Optional[np.ndarray] = None,
    scalars: Optional[dict] = None,
) -> Path:
    """
    Binary little-endian PLY point cloud with optional RGB and named float
    properties (trimesh point-cloud export has no per-vertex scalar support).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    scalars = scalars or {}
    fields += [(name, "<f4") for name in scalars]

    data = np.zeros(len(pts), dtype=fields)
    data["x"], data["y"], data["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if colors is not None:
        rgb = _rgba(colors, len(pts))
        data["red"], data["green"], data["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    for name, values in scalars.items():
        data[name] = np.asarray(values, dtype=float).reshape(-1)

    type_names = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    header += [f"property {type_names[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
    return path


def _rgba(colors: np.ndarray, count: int) -> np.ndarray:
    rgb = np.asarray(colors)
    if rgb.shape != (count, 3) and rgb.shape != (count, 4):
        raise GeometryError(f"expected {count} RGB colors, got shape {rgb.shape}")
    if rgb.dtype.kind == "f":
        rgb = np.clip(np.round(rgb * 255.0), 0, 255)
    rgb = rgb.astype(np.uint8)
    if rgb.shape[1] == 3:
        rgb = np.concatenate([rgb, np.full((count, 1), 255, dtype=np.uint8)], axis=1)
    return rgb


# ============ Sampling ============

def sample_surface(geom: Geometry, count: int, seed: RngLike = 0) -> np.ndarray:
    """Area-weighted uniform samples on a mesh, or a uniform subsample of a splat cloud."""
    if count < 1:
        raise GeometryError("sample count must be >= 1")
    rng = as_rng(seed)
    if not geom.is_mesh:
        replace = count > len(geom.vertices)
        idx = rng.choice(len(geom.vertices), size=count, replace=replace)
        return geom.vertices[idx].copy()

    areas = geom.triangle_areas
    total = areas.sum()
    if total <= 0:
        raise GeometryError("zero-area mesh")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tv = geom.triangle_vertices[tri]
    return (
        (1.0 - r1)[:, None] * tv[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tv[:, 1]
        + (r1 * r2)[:, None] * tv[:, 2]
    )


# ============ Distances ============

def closest_points_on_triangles(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """
    Closest point on each triangle for paired rows.

    points: (K, 3); tri: (K, 3, 3). Voronoi-region classification of the
    query against the triangle's vertices, edges and face.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    ap, bp, cp = points - a, points - b, points - c

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe_div(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    denom = safe_div(np.ones_like(va), va + vb + vc)
    v = vb * denom
    w = vc * denom
    result = a + ab * v[:, None] + ac * w[:, None]

    # Later assignments take precedence (reverse of the region test order).
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    region = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    result = np.where(region[:, None], b + (c - b) * w_bc[:, None], result)

    w_ac = safe_div(d2, d2 - d6)
    region = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result = np.where(region[:, None], a + ac * w_ac[:, None], result)

    region = (d6 >= 0) & (d5 <= d6)
    result = np.where(region[:, None], c, result)

    v_ab = safe_div(d1, d1 - d3)
    region = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result = np.where(region[:, None], a + ab * v_ab[:, None], result)

    region = (d3 >= 0) & (d4 <= d3)
    result = np.where(region[:, None], b, result)

    region = (d1 <= 0) & (d2 <= 0)
    result = np.where(region[:, None], a, result)
    return result


def point_triangle_distances(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    return np.linalg.norm(points - closest_points_on_triangles(points, tri), axis=1)


def nearest_distances(geom: Geometry, points: np.ndarray) -> np.ndarray:
    """
    Exact distance from each point to the geometry.

    Meshes: a KD-tree over triangle centroids gives an upper bound from the
    nearest few triangles; every triangle that could beat the bound has its
    centroid within bound + max circumradius, so the exact minimum is taken
    over that candidate set. Splat clouds: max(0, NN distance - radius).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    tree, max_radius = geom._distance_index
    if not geom.is_mesh:
        dist, _ = tree.query(pts)
        return np.maximum(0.0, dist - geom.splat_radius)

    tv = geom.triangle_vertices
    out = np.empty(len(pts))
    k = min(_KNN_SEED, len(tv))
    for start in range(0, len(pts), _CHUNK):
        chunk = pts[start:start + _CHUNK]
        _, seed_idx = tree.query(chunk, k=k)
        seed_idx = np.asarray(seed_idx).reshape(len(chunk), k)
        rows = np.repeat(np.arange(len(chunk)), k)
        seed_d = point_triangle_distances(chunk[rows], tv[seed_idx.reshape(-1)])
        bound = seed_d.reshape(len(chunk), k).min(axis=1)

        radii = bound + max_radius + 1e-12 * (1.0 + bound)
        candidates = tree.query_ball_point(chunk, r=radii)
        lengths = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(chunk))
        best = bound.copy()
        if lengths.sum():
            cand = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])
            rows = np.repeat(np.arange(len(chunk)), lengths)
            d = point_triangle_distances(chunk[rows], tv[cand])
            np.minimum.at(best, rows, d)
        out[start:start + len(chunk)] = best
    return out


def nearest_distance(geom: Geometry, point: Sequence[float]) -> float:
    return float(nearest_distances(geom, np.asarray(point, dtype=float).reshape(1, 3))[0])


def nearest_distance_brute(geom: Geometry, point: Sequence[float]) -> float:
    """Reference implementation iterating over every primitive."""
    p = np.asarray(point, dtype=float).reshape(1, 3)
    if not geom.is_mesh:
        return float(max(0.0, np.linalg.norm(geom.vertices - p, axis=1).min() - geom.splat_radius))
    tv = geom.triangle_vertices
    return float(point_triangle_distances(np.repeat(p, len(tv), axis=0), tv).min())
