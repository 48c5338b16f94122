"""
Desk-scale benchmark: builds templates from procedural demonstrations,
imitates them on held-out instances with each method of the matrix
(query points x features, plus CPD and an oracle control), and scores the
results with geometric proxies.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from bvh import penetration_depth
from cpd import cpd_rigid_register
from errors import HarnessError, TemplateError
from field import DescriptorField, analytic_field, learned_field, object_cloud
from geometry import Geometry, RigidTransform, RngLike, as_rng, haar_random_rotation, sample_surface, save_geometry
from imitate import optimize_pose
from logging_config import get_logger
from models import (
    BenchmarkReport,
    FeatureKind,
    HarnessConfig,
    PoseRegime,
    QueryScheme,
    ScfConfig,
    ShapeSpec,
    SuiteConfig,
    SuiteEntry,
    SymmetryKind,
    TargetKind,
    TaskKind,
    TrialRecord,
    TrialReport,
)
from regressor import RegressorWeights
from shapes import TASKS, anchor_kind, demo_anchor_pose, gen_shape, random_spec, symmetry_axis
from template import MIN_TEMPLATE_POINTS, DemoInteraction, InteractionTemplate, aggregate_templates, template_from_points

logger = get_logger(__name__)

__all__ = [
    "Symmetry",
    "bps_points",
    "cpd_rigid_register",
    "gen_shape",
    "occupancy_stub_field",
    "penetration_depth",
    "pose_error",
    "run_benchmark",
    "score_pose",
]

SELF_METHOD = "self"
CPD_METHOD = "cpd"


# ============ Query points and baseline fields ============

def unit_ball_points(count: int, seed: RngLike = 0) -> np.ndarray:
    """The object-independent basis set: uniform points in the unit ball."""
    if count < 1:
        raise HarnessError("basis point count must be >= 1")
    rng = as_rng(seed)
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * rng.random(count)[:, None] ** (1.0 / 3.0)


def bps_points(geom: Geometry, count: int, seed: RngLike = 0) -> np.ndarray:
    """The fixed basis set scaled into the object's bounding sphere."""
    center, radius = geom.bounding_sphere
    return center + radius * unit_ball_points(count, seed)


def occupancy_stub_field(geom: Geometry, weights: RegressorWeights, cloud_seed: RngLike = 0) -> DescriptorField:
    """A learned field over an occupancy-trained regressor, bound to a watertight mesh."""
    if not geom.is_mesh or not geom.is_watertight():
        raise HarnessError("occupancy field needs a watertight mesh")
    if weights.metadata.target_kind != TargetKind.OCCUPANCY:
        raise HarnessError("weights were not trained for occupancy")
    return learned_field(weights, object_cloud(geom, weights.cloud_points, cloud_seed))


# ============ Scoring ============

@dataclass(frozen=True)
class Symmetry:
    """Rotational symmetry about an axis through `origin`; fold 0 is continuous."""
    kind: SymmetryKind = SymmetryKind.NONE
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    fold: int = 0

    @classmethod
    def none(cls) -> "Symmetry":
        return cls()

    @classmethod
    def about_axis(cls, origin: Sequence[float], axis: Sequence[float], fold: int = 0) -> "Symmetry":
        a = np.asarray(axis, dtype=float)
        a = a / np.linalg.norm(a)
        return cls(SymmetryKind.AXIS, tuple(a.tolist()), tuple(float(v) for v in origin), fold)


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _geodesic_deg(r: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))))


def _best_symmetry_angle(m: np.ndarray, symmetry: Symmetry) -> float:
    """Angle φ maximizing tr(S(φ) M) over the symmetry group."""
    a = np.asarray(symmetry.axis, dtype=float)
    if symmetry.fold == 0:
        k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        cos_term = np.trace(m) - a @ m @ a
        sin_term = np.trace(k @ m)
        return float(np.arctan2(sin_term, cos_term))
    angles = 2.0 * np.pi * np.arange(symmetry.fold) / symmetry.fold
    scores = [np.trace(_axis_rotation(a, phi) @ m) for phi in angles]
    return float(angles[int(np.argmax(scores))])


def pose_error(
    estimate: RigidTransform,
    truth: RigidTransform,
    symmetry: Optional[Symmetry] = None,
) -> Tuple[float, float]:
    """
    (rotation degrees, translation distance) between the estimate and the
    closest symmetric copy of the ground truth.
    """
    symmetry = symmetry or Symmetry.none()
    if symmetry.kind == SymmetryKind.NONE:
        rel = estimate.rotation @ truth.rotation.T
        return _geodesic_deg(rel), float(np.linalg.norm(estimate.translation - truth.translation))
    a = np.asarray(symmetry.axis, dtype=float)
    o = np.asarray(symmetry.origin, dtype=float)
    phi = _best_symmetry_angle(truth.rotation @ estimate.rotation.T, symmetry)
    s = _axis_rotation(a, phi)
    rotation = s @ truth.rotation
    translation = s @ (truth.translation - o) + o
    return (_geodesic_deg(estimate.rotation @ rotation.T),
            float(np.linalg.norm(estimate.translation - translation)))


@dataclass(frozen=True)
class PoseScore:
    penetration: float
    rotation_error_deg: Optional[float]
    translation_error_fraction: Optional[float]
    penetration_ok: bool
    pose_ok: Optional[bool]

    @property
    def success(self) -> bool:
        return self.penetration_ok and self.pose_ok is not False


def score_pose(
    anchor: Geometry,
    anchor_transform: RigidTransform,
    target: Geometry,
    truth: Optional[RigidTransform],
    symmetry: Optional[Symmetry],
    config: HarnessConfig,
    seed: int = 0,
) -> PoseScore:
    """The same scoring for every method: penetration both ways, then pose error where ground truth exists."""
    posed = anchor.transformed(anchor_transform)
    depth = max(
        penetration_depth(posed, target, config.penetration_samples, seed),
        penetration_depth(target, posed, config.penetration_samples, seed),
    )
    diameter = target.diameter
    penetration_ok = depth < config.penetration_fraction * diameter
    if truth is None:
        return PoseScore(depth, None, None, penetration_ok, None)
    rot_deg, trans = pose_error(anchor_transform, truth, symmetry)
    fraction = trans / diameter
    pose_ok = rot_deg < config.rotation_threshold_deg and fraction < config.translation_fraction
    return PoseScore(depth, rot_deg, fraction, penetration_ok, pose_ok)


# ============ Benchmark ============

def _method_parts(method: str) -> Optional[Tuple[QueryScheme, FeatureKind]]:
    if method in (SELF_METHOD, CPD_METHOD):
        return None
    scheme, feature = method.split("+")
    return QueryScheme(scheme), FeatureKind(feature)


def _orders(entry: SuiteEntry, method: str, default_order: int) -> List[int]:
    parts = _method_parts(method)
    if parts is not None and parts[1] == FeatureKind.SCF:
        return list(entry.scf_orders)
    return [default_order]


def _resolve_weights(path: Optional[str], base_dir: Optional[Path], name: str) -> RegressorWeights:
    if path is None:
        raise HarnessError(f"suite uses {name} methods but names no {name} weights")
    resolved = Path(path)
    if not resolved.is_absolute() and base_dir is not None:
        resolved = base_dir / resolved
    if not resolved.exists():
        raise HarnessError(f"missing field artifact for {name} methods: {resolved}")
    return RegressorWeights.load(resolved)


def _validate_suite(suite: SuiteConfig) -> None:
    for i, entry in enumerate(suite.entries):
        demo_category = entry.demo_category or entry.category
        if entry.task not in TASKS.get(demo_category, ()) or entry.task not in TASKS.get(entry.category, ()):
            raise HarnessError(f"entry {i}: task {entry.task.value} is not defined for "
                               f"{demo_category.value} -> {entry.category.value}")
        if anchor_kind(entry.task, demo_category) != anchor_kind(entry.task, entry.category):
            raise HarnessError(f"entry {i}: {demo_category.value} and {entry.category.value} use different "
                               f"anchors for {entry.task.value}")
        if SELF_METHOD in entry.methods and demo_category != entry.category:
            raise HarnessError(f"entry {i}: the self control needs demos of the target category")


class _FieldFactory:
    """Binds the configured feature of a method to an object."""

    def __init__(self, suite: SuiteConfig, nif: Optional[RegressorWeights], ndf: Optional[RegressorWeights]):
        self.suite = suite
        self.nif = nif
        self.ndf = ndf

    def __call__(self, feature: FeatureKind, order: int, geom: Geometry, cloud_seed: int) -> DescriptorField:
        if feature == FeatureKind.SCF:
            config = ScfConfig(**{**self.suite.scf.model_dump(), "order": order})
            return analytic_field(geom, config)
        if feature == FeatureKind.NIF:
            return learned_field(self.nif, object_cloud(geom, self.nif.cloud_points, cloud_seed))
        return occupancy_stub_field(geom, self.ndf, cloud_seed)


def make_demos(entry: SuiteEntry, seed: int) -> List[DemoInteraction]:
    """Upright demonstrations on random instances of the demo category, with the default anchor."""
    demo_category = entry.demo_category or entry.category
    rng = np.random.default_rng(seed)
    anchor = gen_shape(ShapeSpec(kind=anchor_kind(entry.task, demo_category)))
    demos = []
    for _ in range(entry.demos):
        spec = random_spec(demo_category, rng)
        demos.append(DemoInteraction(anchor, gen_shape(spec), demo_anchor_pose(spec, entry.task)))
    return demos


def build_method_template(
    scheme: QueryScheme,
    demos: Sequence[DemoInteraction],
    fields: Sequence[DescriptorField],
    suite: SuiteConfig,
    seed: int,
) -> InteractionTemplate:
    if scheme == QueryScheme.IBS:
        return aggregate_templates(demos, fields, config=suite.template, seed=seed)
    points = bps_points(demos[0].anchor, suite.harness.bps_count, seed)
    usable = np.ones(len(points), dtype=bool)
    for demo, f in zip(demos, fields):
        usable &= f.in_domain(demo.anchor_pose.apply(points))
    if usable.sum() < MIN_TEMPLATE_POINTS:
        raise TemplateError(f"only {int(usable.sum())} basis points fall inside every demo field domain")
    return template_from_points(demos, fields, points[usable], config={"query_scheme": "bps", "demos": len(demos)})


@dataclass(frozen=True)
class _Trial:
    index: int
    seed: int
    target: Geometry
    truth: Optional[RigidTransform]
    symmetry: Optional[Symmetry]


def make_trial(entry: SuiteEntry, regime: PoseRegime, index: int, seed: int, harness: HarnessConfig) -> _Trial:
    """Target instance for one trial; everything derives from `seed`."""
    rng = np.random.default_rng(seed)
    if regime == PoseRegime.ARBITRARY:
        scale = float(rng.uniform(*harness.arbitrary_scale_range))
        pose = RigidTransform(haar_random_rotation(rng), np.zeros(3))
    else:
        scale, pose = 1.0, RigidTransform.identity()
    spec = random_spec(entry.category, rng, scale=scale, pose=pose)
    demo_category = entry.demo_category or entry.category
    truth = demo_anchor_pose(spec, entry.task) if demo_category == entry.category else None
    axis = symmetry_axis(spec)
    symmetry = Symmetry.about_axis(*axis) if axis is not None else None
    return _Trial(index, seed, gen_shape(spec), truth, symmetry)


def _entry_seed(suite_seed: int, entry_index: int) -> int:
    return int(np.random.SeedSequence([suite_seed, entry_index]).generate_state(1)[0])


def _trial_seed(suite_seed: int, entry_index: int, trial_index: int) -> int:
    return int(np.random.SeedSequence([suite_seed, entry_index, trial_index]).generate_state(1)[0])


def run_benchmark(
    suite: SuiteConfig,
    out_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    base_dir: Optional[Union[str, Path]] = None,
) -> BenchmarkReport:
    """
    Run every (entry, regime, method, order) cell of the suite. Writes
    report.json and report.csv (and failure dumps) when `out_dir` is set.
    Weight paths are resolved against `base_dir`.
    """
    base = Path(base_dir) if base_dir is not None else None
    methods = {m for e in suite.entries if e.trials > 0 for m in e.methods}
    features = {p[1] for p in map(_method_parts, methods) if p is not None}
    nif = _resolve_weights(suite.nif_weights, base, "nif") if FeatureKind.NIF in features else None
    ndf = _resolve_weights(suite.ndf_weights, base, "ndf") if FeatureKind.NDF in features else None
    _validate_suite(suite)
    make_field = _FieldFactory(suite, nif, ndf)
    out = Path(out_dir) if out_dir is not None else None

    reports: List[TrialReport] = []
    for e_idx, entry in enumerate(suite.entries):
        demo_category = entry.demo_category or entry.category
        demos = make_demos(entry, _entry_seed(suite.seed, e_idx)) if entry.trials > 0 else []
        templates: Dict[Tuple[str, int], InteractionTemplate] = {}
        for regime in entry.regimes:
            trials = [make_trial(entry, regime, t, _trial_seed(suite.seed, e_idx, t), suite.harness)
                      for t in range(entry.trials)]
            for method in entry.methods:
                for order in _orders(entry, method, suite.scf.order):
                    key = (method, order)
                    parts = _method_parts(method)
                    if parts is not None and trials and key not in templates:
                        fields = [make_field(parts[1], order, d.source, i) for i, d in enumerate(demos)]
                        templates[key] = build_method_template(parts[0], demos, fields, suite, suite.seed + e_idx)

                    def run(trial: _Trial) -> TrialRecord:
                        return _run_trial(suite, entry, regime, method, order, trial, demos,
                                          templates.get(key), make_field, out)

                    if threads > 1 and len(trials) > 1:
                        with ThreadPoolExecutor(max_workers=threads) as pool:
                            records = list(pool.map(run, trials))
                    else:
                        records = [run(t) for t in trials]
                    reports.append(_aggregate(method, entry, demo_category, regime, order, records))
                    logger.info("%s %s/%s %s n=%d: success %.2f", method, entry.category.value, regime.value,
                                entry.task.value, order, reports[-1].success_rate)

    nif_r2 = nif.metadata.heldout_mean_r2 if nif is not None else None
    report = BenchmarkReport(suite=suite.name, seed=suite.seed, nif_heldout_mean_r2=nif_r2,
                             reports=reports, checks=_checks(reports))
    if out is not None:
        write_report(report, out)
    return report


def _run_trial(
    suite: SuiteConfig,
    entry: SuiteEntry,
    regime: PoseRegime,
    method: str,
    order: int,
    trial: _Trial,
    demos: Sequence[DemoInteraction],
    template: Optional[InteractionTemplate],
    make_field: _FieldFactory,
    out: Optional[Path],
) -> TrialRecord:
    anchor = demos[0].anchor
    if method == SELF_METHOD:
        anchor_transform, residual = trial.truth, 0.0
    elif method == CPD_METHOD:
        target_cloud = sample_surface(trial.target, suite.cpd.points, trial.seed)
        best = None
        for i, demo in enumerate(demos):
            source_cloud = sample_surface(demo.source, suite.cpd.points, i)
            result = cpd_rigid_register(source_cloud, target_cloud, suite.cpd)
            if best is None or result.log_likelihood > best[0].log_likelihood:
                best = (result, demo)
        anchor_transform = best[0].transform.compose(best[1].anchor_pose)
        residual = -best[0].log_likelihood
    else:
        target_field = make_field(_method_parts(method)[1], order, trial.target, trial.seed)
        optimize = suite.optimize.model_copy(update={"seed": trial.seed})
        pose = optimize_pose(template, target_field, trial.target, optimize)
        anchor_transform, residual = pose.anchor_transform, pose.best_residual

    score = score_pose(anchor, anchor_transform, trial.target, trial.truth, trial.symmetry, suite.harness, trial.seed)
    record = TrialRecord(
        index=trial.index,
        seed=trial.seed,
        method=method,
        category=entry.category,
        demo_category=entry.demo_category or entry.category,
        task=entry.task,
        regime=regime,
        scf_order=order,
        residual=float(residual),
        penetration=score.penetration,
        rotation_error_deg=score.rotation_error_deg,
        translation_error_fraction=score.translation_error_fraction,
        penetration_ok=score.penetration_ok,
        pose_ok=score.pose_ok,
        success=score.success,
    )
    if out is not None and suite.dump_failures and not record.success:
        stem = f"{method.replace('+', '_')}_{entry.category.value}_{regime.value}_n{order}_t{trial.index}"
        save_geometry(trial.target, out / "failures" / f"{stem}_target.ply")
        save_geometry(anchor.transformed(anchor_transform), out / "failures" / f"{stem}_anchor.ply")
    return record


def _rate(flags: Sequence[bool]) -> float:
    return float(np.mean(flags)) if len(flags) else 0.0


def _aggregate(method, entry: SuiteEntry, demo_category, regime, order, records: List[TrialRecord]) -> TrialReport:
    rate = _rate([r.success for r in records])
    return TrialReport(
        method=method,
        category=entry.category,
        demo_category=demo_category,
        task=entry.task,
        regime=regime,
        scf_order=order,
        trials=records,
        success_rate=rate,
        grasp_rate=rate if entry.task == TaskKind.GRASP else None,
        place_rate=rate if entry.task == TaskKind.PLACE else None,
        overall_rate=_rate([r.penetration_ok and r.pose_ok is not False for r in records]),
    )


def _checks(reports: Sequence[TrialReport]) -> Dict[str, Optional[bool]]:
    """Qualitative expectations; None when the suite lacks the rows to decide."""
    controls = [r for r in reports if r.method == SELF_METHOD and r.trials]
    self_ok = all(r.success_rate == 1.0 for r in controls) if controls else None

    def mean_rate(method: str) -> Optional[float]:
        rows = [r.overall_rate for r in reports if r.method == method and r.trials]
        return float(np.mean(rows)) if rows else None

    nif, scf = mean_rate("ibs+nif"), mean_rate("ibs+scf")
    ordering = None if nif is None or scf is None else nif >= scf
    return {"self_control_success": self_ok, "ibs_nif_ge_ibs_scf": ordering}


def report_frame(report: BenchmarkReport) -> pd.DataFrame:
    rows = [t.model_dump(mode="json") for r in report.reports for t in r.trials]
    columns = list(TrialRecord.model_fields)
    return pd.DataFrame(rows, columns=columns)


def write_report(report: BenchmarkReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    csv_path = out / "report.csv"
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    report_frame(report).to_csv(csv_path, index=False, float_format="%.6f")
    logger.info("Wrote %s and %s", json_path, csv_path)
    return json_path, csv_path
