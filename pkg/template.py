"""
Interaction templates: bisector query points carrying descriptor-field
features of the demonstrated source object.

Template points live in the template frame, which is the source frame of
the first demonstration; `anchor_pose_ref` places the anchor in that
frame. Bisectors are extracted in each demo's anchor frame so that moving
a whole demonstration rigidly leaves the anchor-frame points unchanged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from errors import FingerprintMismatchError, TemplateError
from field import DescriptorField
from geometry import Geometry, RigidTransform, RngLike, as_rng, load_geometry
from ibs import IbsPointSet, compute_ibs, importance_indices
from logging_config import get_logger
from models import DemoDocument, TemplateConfig, TemplateDocument

logger = get_logger(__name__)

MIN_TEMPLATE_POINTS = 32
TEMPLATE_VERSION = 1


@dataclass(frozen=True, eq=False)
class DemoInteraction:
    anchor: Geometry
    source: Geometry
    anchor_pose: RigidTransform  # anchor model -> source frame

    @property
    def posed_anchor(self) -> Geometry:
        return self.anchor.transformed(self.anchor_pose)

    @property
    def source_in_anchor_frame(self) -> Geometry:
        return self.source.transformed(self.anchor_pose.inverse())

    def transformed(self, transform: RigidTransform) -> "DemoInteraction":
        """The same interaction with the whole scene moved by `transform`."""
        return DemoInteraction(self.anchor, self.source.transformed(transform), transform.compose(self.anchor_pose))


def load_demo(path: Union[str, Path]) -> DemoInteraction:
    """Read a demo JSON document; geometry paths are relative to the document."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Demo file not found: {path}")
    doc = DemoDocument.model_validate_json(path.read_text(encoding="utf-8"))
    base = path.parent
    return DemoInteraction(
        anchor=load_geometry(base / doc.anchor, splat_radius=doc.splat_radius),
        source=load_geometry(base / doc.source, splat_radius=doc.splat_radius),
        anchor_pose=RigidTransform.from_matrix(doc.anchor_pose),
    )


@dataclass(frozen=True, eq=False)
class InteractionTemplate:
    query_points: np.ndarray
    descriptors: np.ndarray
    anchor_pose_ref: RigidTransform
    field_fingerprint: str
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.query_points, dtype=float).reshape(-1, 3)
        desc = np.asarray(self.descriptors, dtype=float)
        if desc.ndim != 2 or len(desc) != len(pts):
            raise TemplateError("one descriptor per query point is required")
        if len(pts) == 0:
            raise TemplateError("template has no points")
        object.__setattr__(self, "query_points", pts)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.query_points)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def centroid(self) -> np.ndarray:
        return self.query_points.mean(axis=0)

    def anchor_frame_points(self) -> np.ndarray:
        return self.anchor_pose_ref.inverse().apply(self.query_points)

    def check_field(self, target: DescriptorField) -> None:
        if target.fingerprint != self.field_fingerprint:
            raise FingerprintMismatchError(self.field_fingerprint, target.fingerprint)
        if target.descriptor_dim != self.descriptor_dim:
            raise TemplateError(
                f"descriptor dimension {self.descriptor_dim} does not match field dimension {target.descriptor_dim}"
            )

    def to_document(self) -> TemplateDocument:
        return TemplateDocument(
            version=TEMPLATE_VERSION,
            query_points=self.query_points.tolist(),
            descriptors=self.descriptors.tolist(),
            anchor_pose_ref=self.anchor_pose_ref.to_list(),
            field_fingerprint=self.field_fingerprint,
            config=self.config,
        )

    @classmethod
    def from_document(cls, doc: TemplateDocument) -> "InteractionTemplate":
        if doc.version != TEMPLATE_VERSION:
            raise TemplateError(f"unsupported template version {doc.version}")
        return cls(
            query_points=np.asarray(doc.query_points, dtype=float),
            descriptors=np.asarray(doc.descriptors, dtype=float),
            anchor_pose_ref=RigidTransform.from_matrix(doc.anchor_pose_ref),
            field_fingerprint=doc.field_fingerprint,
            config=doc.config,
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_document().model_dump_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "InteractionTemplate":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Template file not found: {path}")
        return cls.from_document(TemplateDocument.model_validate_json(path.read_text(encoding="utf-8")))


# ============ Construction ============

def demo_ibs(demo: DemoInteraction, config: Optional[TemplateConfig] = None) -> IbsPointSet:
    """Bisector between anchor and source, in the anchor frame."""
    config = config or TemplateConfig()
    return compute_ibs(demo.anchor, demo.source_in_anchor_frame, config.ibs, config.importance)


def _sample_demo(
    demo: DemoInteraction,
    source_field: DescriptorField,
    ibs: IbsPointSet,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Importance-sampled anchor-frame bisector points inside the source field's domain."""
    in_domain = source_field.in_domain(demo.anchor_pose.apply(ibs.points))
    usable = ibs.subset(np.flatnonzero(in_domain))
    if len(usable) == 0:
        raise TemplateError("no bisector point lies inside the source field domain")
    if len(usable) < count:
        raise TemplateError(f"bisector has {len(usable)} usable points, {count} requested")
    return usable.points[importance_indices(usable, count, rng)]


def _config_echo(config: TemplateConfig, **extra) -> Dict[str, Any]:
    echo = json.loads(config.model_dump_json())
    echo.update(extra)
    return echo


def build_template(
    demo: DemoInteraction,
    source_field: DescriptorField,
    config: Optional[TemplateConfig] = None,
    seed: RngLike = 0,
    ibs: Optional[IbsPointSet] = None,
) -> InteractionTemplate:
    config = config or TemplateConfig()
    if config.samples < MIN_TEMPLATE_POINTS:
        raise TemplateError(f"templates need at least {MIN_TEMPLATE_POINTS} points, got {config.samples}")
    ibs = ibs if ibs is not None else demo_ibs(demo, config)
    anchor_points = _sample_demo(demo, source_field, ibs, config.samples, as_rng(seed))
    points = demo.anchor_pose.apply(anchor_points)
    logger.info("Built template with %d points from %d bisector points", len(points), len(ibs))
    return InteractionTemplate(
        query_points=points,
        descriptors=source_field.descriptors(points),
        anchor_pose_ref=demo.anchor_pose,
        field_fingerprint=source_field.fingerprint,
        config=_config_echo(config, demos=1, query_scheme="ibs"),
    )


def _check_demos(demos: Sequence[DemoInteraction], fields: Sequence[DescriptorField]) -> None:
    if not demos:
        raise TemplateError("at least one demonstration is required")
    if len(fields) != len(demos):
        raise TemplateError("one descriptor field per demonstration is required")
    ref = demos[0].anchor
    for demo in demos[1:]:
        same = (
            demo.anchor.kind == ref.kind
            and demo.anchor.vertices.shape == ref.vertices.shape
            and np.array_equal(demo.anchor.vertices, ref.vertices)
            and (ref.triangles is None or np.array_equal(demo.anchor.triangles, ref.triangles))
        )
        if not same:
            raise TemplateError("anchor geometry differs between demonstrations")
    for f in fields[1:]:
        if f.fingerprint != fields[0].fingerprint:
            raise FingerprintMismatchError(fields[0].fingerprint, f.fingerprint)


def template_from_points(
    demos: Sequence[DemoInteraction],
    fields: Sequence[DescriptorField],
    anchor_points: np.ndarray,
    config: Optional[Dict[str, Any]] = None,
) -> InteractionTemplate:
    """
    Template at fixed anchor-frame points: each descriptor is the mean over
    demos of that demo's field at the point mapped into its source frame.
    """
    _check_demos(demos, fields)
    anchor_points = np.asarray(anchor_points, dtype=float).reshape(-1, 3)
    total = np.zeros((len(anchor_points), fields[0].descriptor_dim))
    for demo, f in zip(demos, fields):
        total += f.descriptors(demo.anchor_pose.apply(anchor_points))
    return InteractionTemplate(
        query_points=demos[0].anchor_pose.apply(anchor_points),
        descriptors=total / len(demos),
        anchor_pose_ref=demos[0].anchor_pose,
        field_fingerprint=fields[0].fingerprint,
        config=config or {},
    )


def density_weights(points: np.ndarray, k: int, delta: float, prefer_sparse: bool = False) -> np.ndarray:
    """Normalized 1/(mean distance to k nearest other points + delta)."""
    k = max(1, min(k, len(points) - 1))
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean_knn = np.asarray(dist).reshape(len(points), k + 1)[:, 1:].mean(axis=1)
    w = mean_knn + delta if prefer_sparse else 1.0 / (mean_knn + delta)
    return w / w.sum()


def aggregate_templates(
    demos: Sequence[DemoInteraction],
    fields: Sequence[DescriptorField],
    k: Optional[int] = None,
    config: Optional[TemplateConfig] = None,
    seed: RngLike = 0,
    ibs_sets: Optional[Sequence[IbsPointSet]] = None,
) -> InteractionTemplate:
    """
    Few-shot template: per-demo bisector samples pooled in the anchor frame,
    resampled by cross-demo density, with descriptors averaged over demos.
    """
    config = config or TemplateConfig()
    _check_demos(demos, fields)
    if config.samples < MIN_TEMPLATE_POINTS:
        raise TemplateError(f"templates need at least {MIN_TEMPLATE_POINTS} points, got {config.samples}")
    k = len(demos) if k is None else k
    rng = as_rng(seed)

    pools, diameters = [], []
    for i, (demo, f) in enumerate(zip(demos, fields)):
        ibs = ibs_sets[i] if ibs_sets is not None else demo_ibs(demo, config)
        pools.append(_sample_demo(demo, f, ibs, config.samples, rng))
        diameters.append(ibs.scene_diameter)
    pool = np.concatenate(pools)

    if len(pool) < 2:
        raise TemplateError("not enough bisector points to aggregate")
    delta = config.density_delta_fraction * float(np.mean(diameters))
    weights = density_weights(pool, k, delta, config.prefer_sparse)
    keep = rng.choice(len(pool), size=config.samples, replace=False, p=weights)
    logger.info("Aggregated %d demos: %d pooled points -> %d template points", len(demos), len(pool), len(keep))
    return template_from_points(
        demos, fields, pool[keep],
        config=_config_echo(config, demos=len(demos), k=k, query_scheme="ibs"),
    )
