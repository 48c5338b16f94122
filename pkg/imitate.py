"""
Interaction imitation by pose optimization.

A pose T is scored by the L1 distance between the template descriptors and
the target field's descriptors at the transformed template points. Poses
are updated with Adam on local increments: a rotation vector applied on the
left about the current image of the template centroid, and a translation
expressed in units of the target diameter.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from errors import ImitationError
from field import DescriptorField, difference_colors
from geometry import Geometry, RigidTransform, haar_random_rotation, orthonormalize, write_point_ply
from logging_config import get_logger
from models import OptimizeConfig, PoseDocument, RestartSummary
from optim import AdamState, adam_step
from template import InteractionTemplate

logger = get_logger(__name__)

PoseLike = Union[RigidTransform, Sequence[float], np.ndarray]

__all__ = [
    "PoseResult",
    "RestartResult",
    "adam_step",
    "objective",
    "objective_gradient",
    "optimize_pose",
    "perturb",
    "point_residuals",
    "save_trace",
]


# ============ Objective ============

def as_transform(pose: PoseLike) -> RigidTransform:
    """A RigidTransform, or a 6-vector (rotation vector, translation)."""
    if isinstance(pose, RigidTransform):
        return pose
    p = np.asarray(pose, dtype=float).reshape(-1)
    if p.shape != (6,):
        raise ImitationError(f"pose parameters must be a 6-vector, got shape {p.shape}")
    return RigidTransform.from_rotation(Rotation.from_rotvec(p[:3]).as_matrix(), p[3:])


def perturb(transform: RigidTransform, delta: Sequence[float], center: Sequence[float]) -> RigidTransform:
    """
    Apply a local increment: rotate by delta[:3] about T(center), then
    translate by delta[3:].
    """
    d = np.asarray(delta, dtype=float).reshape(6)
    pivot = transform.apply(np.asarray(center, dtype=float))
    rot = Rotation.from_rotvec(d[:3]).as_matrix()
    rotation = orthonormalize(rot @ transform.rotation)
    translation = rot @ (transform.translation - pivot) + pivot + d[3:]
    return RigidTransform(rotation, translation)


def _domain_diagonal(target_field: DescriptorField) -> float:
    lo, hi = target_field.domain
    return float(np.linalg.norm(hi - lo))


def _evaluate(
    template: InteractionTemplate,
    target_field: DescriptorField,
    transform: RigidTransform,
    weight: float,
):
    moved = transform.apply(template.query_points)
    clamped, outside = target_field.clamp_to_domain(moved)
    diff = template.descriptors - target_field.descriptors(clamped)
    per_point = np.abs(diff).sum(axis=1) + weight * outside / _domain_diagonal(target_field)
    return per_point, moved, clamped, outside, diff


def point_residuals(
    template: InteractionTemplate,
    target_field: DescriptorField,
    transform: PoseLike,
    out_of_domain_weight: float = OptimizeConfig().out_of_domain_weight,
) -> np.ndarray:
    """Per-point contributions to the objective."""
    template.check_field(target_field)
    return _evaluate(template, target_field, as_transform(transform), out_of_domain_weight)[0]


def objective(
    template: InteractionTemplate,
    target_field: DescriptorField,
    transform: PoseLike,
    out_of_domain_weight: float = OptimizeConfig().out_of_domain_weight,
) -> float:
    """
    Σ_i ‖d_i − f(T x_i)‖₁. Points leaving the field domain are evaluated at
    the boundary and pay `out_of_domain_weight` times the clamped distance
    over the domain diagonal.
    """
    return float(point_residuals(template, target_field, transform, out_of_domain_weight).sum())


def _chain_rule_gradient(template, target_field, transform, weight) -> Tuple[float, np.ndarray]:
    per_point, moved, clamped, outside, diff = _evaluate(template, target_field, transform, weight)
    g = np.zeros_like(moved)
    inside = outside == 0.0
    if inside.any():
        g[inside] = target_field.vector_jacobian(moved[inside], -np.sign(diff[inside]))
    if (~inside).any():
        away = moved[~inside] - clamped[~inside]
        g[~inside] = weight / _domain_diagonal(target_field) * away / outside[~inside, None]
    arm = moved - transform.apply(template.centroid)
    grad = np.concatenate([np.cross(arm, g).sum(axis=0), g.sum(axis=0)])
    return float(per_point.sum()), grad


def _finite_difference_gradient(template, target_field, transform, weight, config: OptimizeConfig):
    value = float(_evaluate(template, target_field, transform, weight)[0].sum())
    steps = np.array([config.fd_rotation_step] * 3 + [config.fd_translation_step * target_field.diameter] * 3)
    grad = np.zeros(6)
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = steps[k]
        plus = _evaluate(template, target_field, perturb(transform, delta, template.centroid), weight)[0].sum()
        minus = _evaluate(template, target_field, perturb(transform, -delta, template.centroid), weight)[0].sum()
        grad[k] = (plus - minus) / (2.0 * steps[k])
    return value, grad


def _value_and_gradient(template, target_field, transform, config: OptimizeConfig) -> Tuple[float, np.ndarray]:
    if target_field.exact_gradients:
        return _chain_rule_gradient(template, target_field, transform, config.out_of_domain_weight)
    return _finite_difference_gradient(template, target_field, transform, config.out_of_domain_weight, config)


def objective_gradient(
    template: InteractionTemplate,
    target_field: DescriptorField,
    transform: PoseLike,
    config: Optional[OptimizeConfig] = None,
) -> np.ndarray:
    """
    Gradient with respect to the local increment of `perturb`: rotation
    about the transformed template centroid, then translation in model units.
    """
    config = config or OptimizeConfig()
    template.check_field(target_field)
    return _value_and_gradient(template, target_field, as_transform(transform), config)[1]


# ============ Results ============

@dataclass(frozen=True, eq=False)
class RestartResult:
    index: int
    seed: int
    transform: RigidTransform  # best iterate
    final_residual: float
    best_residual: float
    iterations: int
    converged: bool
    diverged: bool
    trace: List[float] = field(default_factory=list)

    @property
    def best_trace(self) -> np.ndarray:
        """Running best-so-far residual."""
        return np.minimum.accumulate(np.asarray(self.trace)) if self.trace else np.zeros(0)

    def summary(self) -> RestartSummary:
        return RestartSummary(
            index=self.index,
            seed=self.seed,
            final_residual=self.final_residual,
            best_residual=self.best_residual,
            iterations=self.iterations,
            converged=self.converged,
            diverged=self.diverged,
            trace=list(self.trace),
        )


@dataclass(frozen=True, eq=False)
class PoseResult:
    best_transform: RigidTransform
    best_residual: float
    anchor_transform: RigidTransform
    restarts: List[RestartResult]
    field_fingerprint: str
    seed: int

    def to_document(self) -> PoseDocument:
        return PoseDocument(
            matrix=self.best_transform.to_list(),
            anchor_matrix=self.anchor_transform.to_list(),
            residual=self.best_residual,
            field_fingerprint=self.field_fingerprint,
            seed=self.seed,
            restarts=[r.summary() for r in self.restarts],
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_document().model_dump_json(indent=2), encoding="utf-8")
        return path


# ============ Optimization ============

def initial_pose(
    template: InteractionTemplate,
    target_geom: Geometry,
    rng: np.random.Generator,
    translation_scale: float,
) -> RigidTransform:
    """Template centroid onto the target centroid, Haar rotation, offset uniform in a ball."""
    rotation = haar_random_rotation(rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * translation_scale * target_geom.diameter * rng.random() ** (1.0 / 3.0)
    translation = target_geom.centroid + offset - rotation @ template.centroid
    return RigidTransform(rotation, translation)


def _run_restart(
    index: int,
    seed: int,
    start: Optional[RigidTransform],
    template: InteractionTemplate,
    target_field: DescriptorField,
    target_geom: Geometry,
    config: OptimizeConfig,
) -> RestartResult:
    rng = np.random.default_rng(seed)
    transform = start if start is not None else initial_pose(template, target_geom, rng, config.init_translation_scale)
    scale = target_field.diameter
    state = AdamState.zeros(6)
    trace: List[float] = []
    best_history: List[float] = []
    best_value, best_transform = np.inf, transform
    converged = diverged = False

    for it in range(config.max_iters):
        value, grad = _value_and_gradient(template, target_field, transform, config)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            diverged = True
            break
        trace.append(value)
        if value < best_value:
            best_value, best_transform = value, transform
        best_history.append(best_value)
        if it >= config.window and best_history[it - config.window] - best_value < config.min_improvement:
            converged = True
            break
        grad = grad.copy()
        grad[3:] *= scale
        delta, state = adam_step(np.zeros(6), grad, state, config.learning_rate)
        delta[3:] *= scale
        transform = perturb(transform, delta, template.centroid)

    logger.debug("Restart %d: best %.6g after %d iterations (converged=%s, diverged=%s)",
                 index, best_value, len(trace), converged, diverged)
    return RestartResult(
        index=index,
        seed=seed,
        transform=best_transform,
        final_residual=trace[-1] if trace else float("nan"),
        best_residual=float(best_value) if np.isfinite(best_value) else float("nan"),
        iterations=len(trace),
        converged=converged,
        diverged=diverged,
        trace=trace,
    )


def restart_seeds(seed: int, count: int) -> List[int]:
    """Independent per-restart seeds derived from the master seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def optimize_pose(
    template: InteractionTemplate,
    target_field: DescriptorField,
    target_geom: Geometry,
    config: Optional[OptimizeConfig] = None,
    threads: int = 1,
    init: Optional[Sequence[RigidTransform]] = None,
) -> PoseResult:
    """
    Multi-restart Adam over rigid poses; the restart with the lowest residual
    wins, ties going to the lower index. `init` replaces the random starts
    with the given poses (one restart each).
    """
    config = config or OptimizeConfig()
    template.check_field(target_field)
    if not np.all(np.isfinite(template.descriptors)):
        raise ImitationError("template descriptors are not finite")
    starts: List[Optional[RigidTransform]] = list(init) if init else [None] * config.restarts
    seeds = restart_seeds(config.seed, len(starts))

    def run(i: int) -> RestartResult:
        return _run_restart(i, seeds[i], starts[i], template, target_field, target_geom, config)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            restarts = list(pool.map(run, range(len(starts))))
    else:
        restarts = [run(i) for i in range(len(starts))]

    finite = [r for r in restarts if np.isfinite(r.best_residual)]
    if not finite:
        raise ImitationError(f"all {len(restarts)} restarts diverged")
    best = min(finite, key=lambda r: (r.best_residual, r.index))
    logger.info("Pose optimization: best residual %.6g from restart %d of %d",
                best.best_residual, best.index, len(restarts))
    return PoseResult(
        best_transform=best.transform,
        best_residual=best.best_residual,
        anchor_transform=best.transform.compose(template.anchor_pose_ref),
        restarts=restarts,
        field_fingerprint=target_field.fingerprint,
        seed=config.seed,
    )


def save_trace(
    result: PoseResult,
    template: InteractionTemplate,
    target_field: DescriptorField,
    out_dir: Union[str, Path],
    out_of_domain_weight: float = OptimizeConfig().out_of_domain_weight,
) -> Path:
    """Template points at the best pose colored by per-point residual, plus restart traces."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    residuals = point_residuals(template, target_field, result.best_transform, out_of_domain_weight)
    write_point_ply(
        out_dir / "template_at_best.ply",
        result.best_transform.apply(template.query_points),
        colors=difference_colors(residuals),
        scalars={"residual": residuals},
    )
    traces = {str(r.index): r.trace for r in result.restarts}
    (out_dir / "traces.json").write_text(json.dumps(traces), encoding="utf-8")
    return out_dir
