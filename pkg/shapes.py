"""
Procedural test objects: mugs, bowls, bottles, a peg rack, a shelf and
a two-finger gripper proxy.

Vessels are surfaces of revolution of a closed profile (both profile ends
on the z axis), so they are watertight. The mug handle is a rectangular
tube, not a torus, stitched into two removed outer-wall quads; the mug is
one watertight genus-1 surface with no mesh boolean.
Racks, shelves and grippers are unions of disjoint closed boxes.

Every object is built in a canonical frame (z up, base at z = 0) and
then scaled about the origin and moved by its spec pose. Demonstration
anchor poses are parametric in the same shape parameters, so every
instance has a ground-truth analogous pose.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import trimesh

from errors import HarnessError
from geometry import Geometry, RigidTransform, RngLike, as_rng
from logging_config import get_logger
from models import ShapeKind, ShapeSpec, SymmetryKind, TaskKind

logger = get_logger(__name__)

SEGMENTS = 32
HANDLE_SECTIONS = 12
GRASP_DEPTH = 0.15
PLACE_CLEARANCE = 0.01
BOX_GAP = 0.005

# name -> (default, low, high)
PARAMETERS: Dict[ShapeKind, Dict[str, Tuple[float, float, float]]] = {
    ShapeKind.MUG: {
        "radius": (0.5, 0.4, 0.6),
        "height": (1.0, 0.8, 1.2),
        "wall": (0.06, 0.04, 0.08),
        "handle_bulge": (0.3, 0.25, 0.35),
    },
    ShapeKind.BOWL: {
        "radius": (0.65, 0.5, 0.8),
        "height": (0.4, 0.3, 0.5),
        "wall": (0.05, 0.04, 0.07),
    },
    ShapeKind.BOTTLE: {
        "radius": (0.32, 0.25, 0.4),
        "height": (1.2, 1.0, 1.4),
        "neck_radius": (0.1, 0.08, 0.12),
        "neck_length": (0.3, 0.3, 0.4),
    },
    ShapeKind.RACK: {
        "post_height": (1.2, 1.0, 1.4),
        "peg_height": (0.9, 0.8, 1.0),
        "peg_length": (0.4, 0.35, 0.45),
        "peg_size": (0.05, 0.04, 0.06),
    },
    ShapeKind.SHELF: {
        "width": (1.8, 1.6, 2.0),
        "depth": (1.8, 1.6, 2.0),
        "thickness": (0.05, 0.04, 0.06),
        "height": (0.5, 0.4, 0.6),
    },
    ShapeKind.GRIPPER_PROXY: {
        "opening": (0.3, 0.25, 0.35),
        "finger_length": (0.4, 0.35, 0.45),
        "finger_thickness": (0.06, 0.05, 0.07),
        "finger_width": (0.15, 0.12, 0.18),
        "palm_thickness": (0.08, 0.06, 0.1),
    },
}

# Categories that can act as the interacted-with object, and their tasks.
TASKS: Dict[ShapeKind, Tuple[TaskKind, ...]] = {
    ShapeKind.MUG: (TaskKind.GRASP, TaskKind.PLACE),
    ShapeKind.BOWL: (TaskKind.GRASP, TaskKind.PLACE),
    ShapeKind.BOTTLE: (TaskKind.GRASP, TaskKind.PLACE),
}

SYMMETRY: Dict[ShapeKind, SymmetryKind] = {
    ShapeKind.MUG: SymmetryKind.NONE,
    ShapeKind.BOWL: SymmetryKind.AXIS,
    ShapeKind.BOTTLE: SymmetryKind.AXIS,
    ShapeKind.RACK: SymmetryKind.NONE,
    ShapeKind.SHELF: SymmetryKind.NONE,
    ShapeKind.GRIPPER_PROXY: SymmetryKind.NONE,
}


def resolve_params(spec: ShapeSpec) -> Dict[str, float]:
    table = PARAMETERS[spec.kind]
    unknown = set(spec.params) - set(table)
    if unknown:
        raise HarnessError(f"unknown {spec.kind.value} parameters: {sorted(unknown)}")
    params = {name: spec.params.get(name, default) for name, (default, _, _) in table.items()}
    for name, value in params.items():
        _, low, high = table[name]
        if not low <= value <= high:
            raise HarnessError(f"{spec.kind.value} parameter {name}={value} outside [{low}, {high}]")
    return params


def random_spec(
    kind: ShapeKind,
    seed: RngLike = 0,
    scale: float = 1.0,
    pose: Optional[RigidTransform] = None,
) -> ShapeSpec:
    rng = as_rng(seed)
    params = {name: float(rng.uniform(low, high)) for name, (_, low, high) in PARAMETERS[kind].items()}
    return ShapeSpec(
        kind=kind,
        params=params,
        scale=scale,
        pose=(pose or RigidTransform.identity()).to_list(),
        seed=int(rng.integers(2**31)),
    )


# ============ Surfaces of revolution ============

def _subdivide(corners: Sequence[Tuple[float, float]], step: float) -> np.ndarray:
    """Polyline through `corners` with segments no longer than `step`."""
    out = [np.asarray(corners[0], dtype=float)]
    for a, b in zip(corners[:-1], corners[1:]):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        pieces = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        for k in range(1, pieces + 1):
            out.append(a + (b - a) * k / pieces)
    return np.asarray(out)


@dataclass(frozen=True)
class Revolved:
    vertices: np.ndarray
    triangles: np.ndarray
    profile: np.ndarray
    segments: int

    def ring_vertex(self, ring: int, j: int) -> int:
        """Vertex of profile point `ring` (1..P-2) at angular slot j."""
        return 1 + (ring - 1) * self.segments + (j % self.segments)


def revolve(profile: np.ndarray, segments: int = SEGMENTS, skip_quads: Sequence[Tuple[int, int]] = ()) -> Revolved:
    """
    Revolve an (r, z) profile about z. The first and last profile points
    must lie on the axis. Slot j spans the angles [(j - 1/2), (j + 1/2)] * 2π/segments,
    so slot 0 faces +x. Quads listed in `skip_quads` as (ring, slot) are left open.
    """
    profile = np.asarray(profile, dtype=float)
    if abs(profile[0, 0]) > 1e-12 or abs(profile[-1, 0]) > 1e-12:
        raise HarnessError("profile must start and end on the axis")
    rings = profile[1:-1]
    phi = (np.arange(segments) - 0.5) * 2.0 * np.pi / segments
    ring_xyz = np.stack([
        rings[:, :1] * np.cos(phi),
        rings[:, :1] * np.sin(phi),
        np.repeat(rings[:, 1:2], segments, axis=1),
    ], axis=-1).reshape(-1, 3)
    vertices = np.concatenate([[[0.0, 0.0, profile[0, 1]]], ring_xyz, [[0.0, 0.0, profile[-1, 1]]]])
    shape = Revolved(vertices, np.zeros((0, 3), dtype=np.int64), profile, segments)
    top = len(vertices) - 1
    n_rings = len(rings)
    skip = set(skip_quads)

    tris: List[Tuple[int, int, int]] = []
    for j in range(segments):
        tris.append((0, shape.ring_vertex(1, j + 1), shape.ring_vertex(1, j)))
        tris.append((top, shape.ring_vertex(n_rings, j), shape.ring_vertex(n_rings, j + 1)))
    for i in range(1, n_rings):
        for j in range(segments):
            if (i, j) in skip:
                continue
            a, b = shape.ring_vertex(i, j), shape.ring_vertex(i, j + 1)
            c, d = shape.ring_vertex(i + 1, j + 1), shape.ring_vertex(i + 1, j)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return Revolved(vertices, np.asarray(tris, dtype=np.int64), profile, segments)


def _cup_profile(radius: float, height: float, wall: float) -> np.ndarray:
    corners = [(0.0, 0.0), (radius, 0.0), (radius, height), (radius - wall, height),
               (radius - wall, wall), (0.0, wall)]
    return _subdivide(corners, height / 12.0)


def _bowl_profile(radius: float, height: float, wall: float) -> np.ndarray:
    t = np.linspace(0.0, 0.5 * np.pi, 13)
    outer = np.column_stack([radius * np.sin(t), height * (1.0 - np.cos(t))])
    inner_r = radius - wall
    inner = np.column_stack([inner_r * np.sin(t[::-1]), wall + (height - wall) * (1.0 - np.cos(t[::-1]))])
    return np.concatenate([outer, inner])


def _bottle_profile(radius: float, height: float, neck_radius: float, neck_length: float) -> np.ndarray:
    shoulder = 0.15 * height
    body = height - neck_length - shoulder
    corners = [(0.0, 0.0), (radius, 0.0), (radius, body), (neck_radius, body + shoulder),
               (neck_radius, height), (0.0, height)]
    return _subdivide(corners, height / 16.0)


# ============ Mug ============

@dataclass(frozen=True)
class MugLayout:
    profile: np.ndarray
    lower_ring: int
    upper_ring: int
    lower_center: np.ndarray
    upper_center: np.ndarray

    @property
    def handle_mid_height(self) -> float:
        return float(0.5 * (self.lower_center[2] + self.upper_center[2]))


def mug_layout(params: Dict[str, float], segments: int = SEGMENTS) -> MugLayout:
    radius, height = params["radius"], params["height"]
    profile = _cup_profile(radius, height, params["wall"])
    wall_rings = [i for i in range(1, len(profile) - 2)
                  if abs(profile[i, 0] - radius) < 1e-12 and abs(profile[i + 1, 0] - radius) < 1e-12]
    heights = np.array([0.5 * (profile[i, 1] + profile[i + 1, 1]) for i in wall_rings])
    lower = wall_rings[int(np.argmin(np.abs(heights - 0.3 * height)))]
    upper = wall_rings[int(np.argmin(np.abs(heights - 0.7 * height)))]
    x = radius * np.cos(np.pi / segments)

    def center(i: int) -> np.ndarray:
        return np.array([x, 0.0, 0.5 * (profile[i, 1] + profile[i + 1, 1])])

    return MugLayout(profile, lower, upper, center(lower), center(upper))


def _mug(params: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    layout = mug_layout(params)
    lo, hi = layout.lower_ring, layout.upper_ring
    cup = revolve(layout.profile, SEGMENTS, skip_quads=[(lo, 0), (hi, 0)])
    v = cup.ring_vertex
    lower = [v(lo, 0), v(lo, 1), v(lo + 1, 1), v(lo + 1, 0)]
    upper = [v(hi + 1, 0), v(hi + 1, 1), v(hi, 1), v(hi, 0)]

    half_y = 0.5 * np.linalg.norm(cup.vertices[lower[1]] - cup.vertices[lower[0]])
    half_n = 0.5 * (layout.profile[lo + 1, 1] - layout.profile[lo, 1])
    bulge = params["handle_bulge"]
    c0, c1 = layout.lower_center, layout.upper_center
    signs = np.array([(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0)])
    y_axis = np.array([0.0, 1.0, 0.0])

    vertices = [cup.vertices]
    sections = [lower]
    next_index = len(cup.vertices)
    for k in range(1, HANDLE_SECTIONS + 1):
        s = k / (HANDLE_SECTIONS + 1)
        c = c0 + (c1 - c0) * s + np.array([bulge * np.sin(np.pi * s), 0.0, 0.0])
        d = (c1 - c0) + np.array([bulge * np.pi * np.cos(np.pi * s), 0.0, 0.0])
        n = np.array([-d[2], 0.0, d[0]]) / np.hypot(d[0], d[2])
        corners = c + signs[:, :1] * half_n * n + signs[:, 1:] * half_y * y_axis
        vertices.append(corners)
        sections.append(list(range(next_index, next_index + 4)))
        next_index += 4
    sections.append(upper)

    tris = [cup.triangles]
    for s0, s1 in zip(sections[:-1], sections[1:]):
        for c in range(4):
            a, b = s0[c], s0[(c + 1) % 4]
            tris.append(np.array([[a, s1[(c + 1) % 4], b], [a, s1[c], s1[(c + 1) % 4]]]))
    return np.concatenate(vertices), np.concatenate(tris)


# ============ Boxes ============

def _boxes(boxes: Sequence[Tuple[Sequence[float], Sequence[float]]]) -> Tuple[np.ndarray, np.ndarray]:
    """Union of disjoint axis-aligned boxes given as (extents, center)."""
    vertices, faces, offset = [], [], 0
    for extents, center in boxes:
        box = trimesh.creation.box(extents=extents)
        vertices.append(np.asarray(box.vertices) + np.asarray(center, dtype=float))
        faces.append(np.asarray(box.faces) + offset)
        offset += len(box.vertices)
    return np.concatenate(vertices), np.concatenate(faces)


def _gripper(p: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    """Fingers hang along -z; the fingertip midpoint is the origin."""
    x = 0.5 * (p["opening"] + p["finger_thickness"])
    finger = (p["finger_thickness"], p["finger_width"], p["finger_length"])
    palm_width = p["opening"] + 2.0 * p["finger_thickness"]
    palm_z = p["finger_length"] + 0.01 + 0.5 * p["palm_thickness"]
    return _boxes([
        (finger, (-x, 0.0, 0.5 * p["finger_length"])),
        (finger, (x, 0.0, 0.5 * p["finger_length"])),
        ((palm_width, p["finger_width"], p["palm_thickness"]), (0.0, 0.0, palm_z)),
    ])


def _rack(p: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    """Square post on the z axis with a horizontal peg along +x."""
    size = p["peg_size"]
    return _boxes([
        ((0.1, 0.1, p["post_height"]), (0.0, 0.0, 0.5 * p["post_height"])),
        ((p["peg_length"], size, size), (peg_start() + 0.5 * p["peg_length"], 0.0, p["peg_height"])),
    ])


def peg_start() -> float:
    return 0.05 + BOX_GAP


def _shelf(p: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    """Board centered on the z axis with its top at z = height, on four legs."""
    width, depth, thickness = p["width"], p["depth"], p["thickness"]
    leg = 0.08
    leg_height = p["height"] - thickness - BOX_GAP
    x, y = 0.5 * width - leg, 0.5 * depth - leg
    legs = [((leg, leg, leg_height), (sx * x, sy * y, 0.5 * leg_height))
            for sx in (-1.0, 1.0) for sy in (-1.0, 1.0)]
    board = ((width, depth, thickness), (0.0, 0.0, p["height"] - 0.5 * thickness))
    return _boxes([board, *legs])


# ============ Public API ============

def gen_shape(spec: ShapeSpec) -> Geometry:
    params = resolve_params(spec)
    if spec.kind == ShapeKind.MUG:
        vertices, triangles = _mug(params)
    elif spec.kind == ShapeKind.BOWL:
        cup = revolve(_bowl_profile(params["radius"], params["height"], params["wall"]))
        vertices, triangles = cup.vertices, cup.triangles
    elif spec.kind == ShapeKind.BOTTLE:
        cup = revolve(_bottle_profile(params["radius"], params["height"], params["neck_radius"],
                                      params["neck_length"]))
        vertices, triangles = cup.vertices, cup.triangles
    elif spec.kind == ShapeKind.RACK:
        vertices, triangles = _rack(params)
    elif spec.kind == ShapeKind.SHELF:
        vertices, triangles = _shelf(params)
    else:
        vertices, triangles = _gripper(params)
    pose = RigidTransform.from_matrix(spec.pose)
    return Geometry.mesh(pose.apply(vertices * spec.scale), triangles)


def anchor_kind(task: TaskKind, category: ShapeKind = ShapeKind.MUG) -> ShapeKind:
    """Anchor that performs `task` on `category`: mugs hang on the rack, other vessels stand on the shelf."""
    if task == TaskKind.GRASP:
        return ShapeKind.GRIPPER_PROXY
    return ShapeKind.RACK if category == ShapeKind.MUG else ShapeKind.SHELF


def demo_anchor_pose(spec: ShapeSpec, task: TaskKind) -> RigidTransform:
    """
    Pose of the default anchor (gripper proxy, rack or shelf) performing
    `task` on the object described by `spec`, in the object's world frame.

    Grasps straddle the mug or bowl rim opposite the handle (at -x) or the
    bottle neck. Placing threads the rack peg through the mug handle, or
    stands a bowl or bottle on the shelf top with a small clearance.
    """
    if task not in TASKS.get(spec.kind, ()):
        raise HarnessError(f"task {task.value} is not defined for {spec.kind.value}")
    p = resolve_params(spec)
    # The object point scales with the instance; the anchor-side offset does not.
    if task == TaskKind.PLACE and anchor_kind(task, spec.kind) == ShapeKind.RACK:
        layout = mug_layout(p)
        rack = resolve_params(ShapeSpec(kind=ShapeKind.RACK))
        rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        target = np.array([p["radius"] + 0.5 * p["handle_bulge"], 0.0, layout.handle_mid_height])
        offset = rotation @ np.array([peg_start() + 0.5 * rack["peg_length"], 0.0, rack["peg_height"]])
    elif task == TaskKind.PLACE:
        shelf = resolve_params(ShapeSpec(kind=ShapeKind.SHELF))
        rotation = np.eye(3)
        target = np.zeros(3)
        offset = np.array([0.0, 0.0, shelf["height"] + PLACE_CLEARANCE])
    else:
        rotation = np.eye(3)
        offset = np.array([0.0, 0.0, GRASP_DEPTH])
        if spec.kind == ShapeKind.BOTTLE:
            target = np.array([0.0, 0.0, p["height"]])
        else:
            target = np.array([-(p["radius"] - 0.5 * p["wall"]), 0.0, p["height"]])
    local = RigidTransform(rotation, target * spec.scale - offset)
    return RigidTransform.from_matrix(spec.pose).compose(local)


def symmetry_axis(spec: ShapeSpec) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """(origin, direction) of the continuous symmetry axis in world frame, if any."""
    if SYMMETRY[spec.kind] != SymmetryKind.AXIS:
        return None
    pose = RigidTransform.from_matrix(spec.pose)
    return pose.translation.copy(), pose.rotation[:, 2].copy()


def shape_sampler(kinds: Sequence[ShapeKind] = (ShapeKind.MUG, ShapeKind.BOWL, ShapeKind.BOTTLE)) -> Callable[[np.random.Generator], Geometry]:
    """Random canonical-pose instances, for field training sets."""
    kinds = [ShapeKind(k) for k in kinds]

    def sample(rng: np.random.Generator) -> Geometry:
        kind = kinds[int(rng.integers(len(kinds)))]
        return gen_shape(random_spec(kind, rng))

    return sample
