"""
Descriptor fields: object-conditioned maps from a 3D point to a feature vector.

Two backends share one interface:
- analytic: the SCF of the point relative to a bound geometry;
- learned: the concatenated decoder activations of a trained regressor
  conditioned on an object cloud.

Both are defined over the object's 1.5x bounding box; callers that may
leave it (pose optimization) use `clamp_to_domain`.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from bvh import contains
from errors import FieldError
from geometry import Geometry, RigidTransform, RngLike, as_rng, haar_random_rotation, sample_surface, write_point_ply
from logging_config import get_logger
from models import (
    FieldBackend,
    GridSpec,
    RegressorConfig,
    ScfConfig,
    TargetKind,
    TrainConfig,
    TrainingSetConfig,
)
from regressor import (
    RegressorWeights,
    TrainingSet,
    cloud_frame,
    decoder_forward,
    descriptor_from_forward,
    descriptor_vjp,
    encoder_forward,
    train_regressor,
)
from scf import scf_batch

logger = get_logger(__name__)

DOMAIN_SCALE = 1.5
_QUERY_CHUNK = 8192
_JACOBIAN_ROWS = 65536

ShapeSampler = Callable[[np.random.Generator], Geometry]


class DescriptorField(ABC):
    backend: FieldBackend
    # False: pose gradients come from finite differences of the objective.
    exact_gradients: bool = True

    @property
    @abstractmethod
    def descriptor_dim(self) -> int: ...

    @property
    @abstractmethod
    def fingerprint(self) -> str:
        """Identifies the feature definition (not the bound object); templates carry it."""

    @property
    @abstractmethod
    def domain(self) -> Tuple[np.ndarray, np.ndarray]: ...

    @property
    @abstractmethod
    def diameter(self) -> float: ...

    @abstractmethod
    def descriptors(self, points: np.ndarray) -> np.ndarray:
        """(N, descriptor_dim) features."""

    @abstractmethod
    def descriptor_gradients(self, points: np.ndarray) -> np.ndarray:
        """(N, 3, descriptor_dim) input Jacobians."""

    def descriptor_at(self, point: Sequence[float]) -> np.ndarray:
        return self.descriptors(np.asarray(point, dtype=float).reshape(1, 3))[0]

    def descriptor_gradient_at(self, point: Sequence[float]) -> np.ndarray:
        return self.descriptor_gradients(np.asarray(point, dtype=float).reshape(1, 3))[0]

    def vector_jacobian(self, points: np.ndarray, cotangents: np.ndarray) -> np.ndarray:
        """Σ_j cotangent_j ∂f_j/∂x per point, shape (N, 3)."""
        return np.einsum("nkd,nd->nk", self.descriptor_gradients(points), cotangents)

    def in_domain(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.domain
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def clamp_to_domain(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Move outside points onto the domain box along the ray from the box
        center. Returns the clamped points and the distance each one moved.
        """
        lo, hi = self.domain
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        offset = pts - center
        with np.errstate(divide="ignore"):
            ratio = np.where(offset != 0.0, half / np.abs(offset), np.inf)
        t = np.minimum(1.0, ratio.min(axis=1))
        clamped = center + offset * t[:, None]
        return clamped, np.linalg.norm(pts - clamped, axis=1)

    def _check_domain(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if not self.in_domain(pts).all():
            raise FieldError("out-of-domain query")
        return pts


# ============ Analytic backend ============

class AnalyticField(DescriptorField):
    backend = FieldBackend.ANALYTIC
    exact_gradients = False

    def __init__(self, geom: Geometry, config: Optional[ScfConfig] = None, threads: int = 1):
        self.geom = geom
        self.config = config or ScfConfig()
        self.threads = threads
        self._domain = geom.domain_box(self.config.domain_scale)

    @property
    def descriptor_dim(self) -> int:
        return self.config.order + 1

    @property
    def fingerprint(self) -> str:
        c = self.config
        return f"analytic:scf:n{c.order}:d{c.dir_count}:{c.scheme.value}"

    @property
    def domain(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._domain

    @property
    def diameter(self) -> float:
        return self.geom.diameter

    def descriptors(self, points: np.ndarray) -> np.ndarray:
        return scf_batch(self.geom, points, self.config, self.threads, check_domain=False)

    def descriptor_gradients(self, points: np.ndarray) -> np.ndarray:
        """Central differences with step 1e-3 of the object diameter."""
        pts = self._check_domain(points)
        h = 1e-3 * self.geom.diameter
        steps = np.eye(3) * h
        offsets = np.concatenate([pts[:, None, :] + steps, pts[:, None, :] - steps], axis=1)
        values = self.descriptors(offsets.reshape(-1, 3)).reshape(len(pts), 6, -1)
        return (values[:, :3] - values[:, 3:]) / (2.0 * h)


def analytic_field(geom: Geometry, config: Optional[ScfConfig] = None, threads: int = 1) -> AnalyticField:
    return AnalyticField(geom, config, threads)


# ============ Learned backend ============

class LearnedField(DescriptorField):
    """A regressor bound to one object cloud; the embedding is computed once."""
    backend = FieldBackend.LEARNED

    def __init__(self, weights: RegressorWeights, cloud: np.ndarray):
        cloud = np.asarray(cloud, dtype=float)
        if cloud.ndim != 2 or cloud.shape[1] != 3:
            raise FieldError(f"object cloud must be (P, 3), got {cloud.shape}")
        if len(cloud) < 4:
            raise FieldError("object cloud needs at least 4 points")
        self.weights = weights
        self.cloud = cloud
        self.center, self.scale = cloud_frame(cloud)
        embedding, _ = encoder_forward(weights, ((cloud - self.center) / self.scale)[None])
        self.embedding = embedding[0]
        lo, hi = cloud.min(axis=0), cloud.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * DOMAIN_SCALE
        self._domain = (mid - half, mid + half)

    @property
    def descriptor_dim(self) -> int:
        return self.weights.descriptor_dim

    @cached_property
    def fingerprint(self) -> str:
        return self.weights.fingerprint()

    @property
    def domain(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._domain

    @property
    def diameter(self) -> float:
        return 2.0 * self.scale

    @property
    def target_kind(self) -> TargetKind:
        return self.weights.metadata.target_kind

    def _inputs(self, points: np.ndarray) -> np.ndarray:
        q = (np.asarray(points, dtype=float).reshape(-1, 3) - self.center) / self.scale
        return np.concatenate([q, np.broadcast_to(self.embedding, (len(q), len(self.embedding)))], axis=1)

    def _forward(self, points: np.ndarray):
        return decoder_forward(self.weights, self._inputs(points))

    def descriptors(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.empty((len(pts), self.descriptor_dim))
        for s in range(0, len(pts), _QUERY_CHUNK):
            zs, acts = self._forward(pts[s:s + _QUERY_CHUNK])
            out[s:s + _QUERY_CHUNK] = descriptor_from_forward(self.weights, zs, acts)
        return out

    def predict(self, points: np.ndarray) -> np.ndarray:
        """Raw regressor output: SCF powers, or an occupancy logit."""
        _, acts = self._forward(points)
        return acts[-1]

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        if self.target_kind != TargetKind.OCCUPANCY:
            raise FieldError("field was not trained for occupancy")
        return expit(self.predict(points)[:, 0])

    def vector_jacobian(self, points: np.ndarray, cotangents: np.ndarray) -> np.ndarray:
        zs, _ = self._forward(points)
        return descriptor_vjp(self.weights, zs, np.asarray(cotangents, dtype=float))[:, :3] / self.scale

    def descriptor_gradients(self, points: np.ndarray) -> np.ndarray:
        """Reverse accumulation with one unit cotangent per descriptor entry."""
        pts = self._check_domain(points)
        dim = self.descriptor_dim
        out = np.empty((len(pts), 3, dim))
        eye = np.eye(dim)
        step = max(1, _JACOBIAN_ROWS // dim)
        for s in range(0, len(pts), step):
            chunk = pts[s:s + step]
            zs, _ = decoder_forward(self.weights, np.repeat(self._inputs(chunk), dim, axis=0))
            g = descriptor_vjp(self.weights, zs, np.tile(eye, (len(chunk), 1)))[:, :3] / self.scale
            out[s:s + len(chunk)] = g.reshape(len(chunk), dim, 3).transpose(0, 2, 1)
        return out


def learned_field(weights: RegressorWeights, object_cloud: np.ndarray) -> LearnedField:
    return LearnedField(weights, object_cloud)


def load_field(
    spec: str,
    geom: Geometry,
    scf_config: Optional[ScfConfig] = None,
    threads: int = 1,
    cloud_seed: int = 0,
) -> DescriptorField:
    """
    Bind a field to an object. `spec` is "analytic" or a path to a weight
    container; learned fields sample their cloud from the geometry.
    """
    if spec == FieldBackend.ANALYTIC.value:
        return analytic_field(geom, scf_config, threads)
    weights = RegressorWeights.load(spec)
    return learned_field(weights, object_cloud(geom, weights.cloud_points, cloud_seed))


def object_cloud(geom: Geometry, count: int, seed: RngLike = 0) -> np.ndarray:
    return sample_surface(geom, count, seed)


# ============ Training ============

def generate_training_set(
    shape_sampler: ShapeSampler,
    num_objects: int,
    queries_per_object: int,
    seed: int = 0,
    config: Optional[TrainingSetConfig] = None,
    target_kind: TargetKind = TargetKind.SCF,
    threads: int = 1,
) -> TrainingSet:
    """
    Randomly scaled and Haar-rotated objects from `shape_sampler`, each with
    a surface cloud and queries uniform in its 1.5x box. Targets are analytic
    SCF powers, or 0/1 occupancy from the parity inside test.
    """
    config = config or TrainingSetConfig()
    rng = as_rng(seed)
    clouds, queries, targets = [], [], []
    for i in range(num_objects):
        geom = shape_sampler(rng)
        scale = rng.uniform(*config.scale_range)
        pose = RigidTransform(haar_random_rotation(rng), np.zeros(3))
        geom = geom.scaled(scale, about=geom.centroid).transformed(pose)
        lo, hi = geom.domain_box(config.scf.domain_scale)
        q = rng.uniform(lo, hi, size=(queries_per_object, 3))
        clouds.append(sample_surface(geom, config.cloud_points, rng))
        queries.append(q)
        if target_kind == TargetKind.SCF:
            targets.append(scf_batch(geom, q, config.scf, threads))
        else:
            targets.append(contains(geom, q).astype(float)[:, None])
        logger.debug("Training object %d/%d generated", i + 1, num_objects)
    logger.info("Generated %d training objects x %d queries (%s targets)",
                num_objects, queries_per_object, target_kind.value)
    return TrainingSet(
        clouds=np.asarray(clouds),
        queries=np.asarray(queries),
        targets=np.asarray(targets),
        target_kind=target_kind,
        scf=config.scf if target_kind == TargetKind.SCF else None,
        seed=int(seed) if isinstance(seed, (int, np.integer)) else 0,
    )


def train_field(
    train: TrainingSet,
    reg_config: Optional[RegressorConfig] = None,
    train_config: Optional[TrainConfig] = None,
) -> RegressorWeights:
    return train_regressor(train, reg_config, train_config)


# ============ Heatmaps ============

@dataclass(frozen=True, eq=False)
class Heatmap:
    points: np.ndarray
    values: np.ndarray
    colors: np.ndarray

    @property
    def argmin(self) -> np.ndarray:
        return self.points[int(np.argmin(self.values))]


def grid_points(spec: GridSpec, domain: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    lo = np.asarray(spec.lo if spec.lo is not None else domain[0], dtype=float)
    hi = np.asarray(spec.hi if spec.hi is not None else domain[1], dtype=float)
    axes = [np.linspace(lo[k], hi[k], spec.resolution) for k in range(3)]
    if spec.slice_axis is not None:
        k = spec.slice_axis
        offset = spec.slice_offset if spec.slice_offset is not None else 0.5 * (lo[k] + hi[k])
        axes[k] = np.array([offset])
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def difference_colors(values: np.ndarray) -> np.ndarray:
    """Blue (smallest) to red (largest); a constant input maps to blue."""
    span = float(values.max() - values.min()) if len(values) else 0.0
    t = (values - values.min()) / span if span > 0 else np.zeros_like(values)
    return np.column_stack([t, np.zeros_like(t), 1.0 - t])


def export_heatmap(
    field_a: DescriptorField,
    point_x: Sequence[float],
    field_b: DescriptorField,
    grid: Optional[GridSpec] = None,
    path: Optional[Union[str, Path]] = None,
) -> Heatmap:
    """L1 feature difference between f_A(x) and f_B over a grid around object B."""
    grid = grid or GridSpec()
    x = np.asarray(point_x, dtype=float).reshape(1, 3)
    if not field_a.in_domain(x)[0]:
        raise FieldError("heatmap query point is outside the source field domain")
    reference = field_a.descriptors(x)[0]
    pts = grid_points(grid, field_b.domain)
    values = np.abs(field_b.descriptors(pts) - reference).sum(axis=1)
    heatmap = Heatmap(pts, values, difference_colors(values))
    if path is not None:
        write_point_ply(path, pts, colors=heatmap.colors, scalars={"difference": values})
        logger.info("Wrote heatmap with %d points to %s", len(pts), path)
    return heatmap
