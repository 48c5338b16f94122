"""Procedural benchmark objects and demonstration poses."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from bvh import penetration_depth
from errors import HarnessError
from geometry import RigidTransform, haar_random_rotation
from models import ShapeKind, ShapeSpec, TaskKind
from shapes import (
    PLACE_CLEARANCE,
    anchor_kind,
    demo_anchor_pose,
    gen_shape,
    random_spec,
    resolve_params,
    shape_sampler,
    symmetry_axis,
)


@pytest.mark.parametrize("kind", [ShapeKind.BOWL, ShapeKind.BOTTLE])
def test_vessels_are_closed_spheres(kind):
    geom = gen_shape(ShapeSpec(kind=kind))

    assert geom.is_watertight()
    assert geom.euler_characteristic() == 2


def test_mug_has_one_handle_hole():
    geom = gen_shape(ShapeSpec(kind=ShapeKind.MUG))

    assert geom.is_watertight()
    assert geom.euler_characteristic() == 0


@pytest.mark.parametrize("kind, boxes", [(ShapeKind.RACK, 2), (ShapeKind.SHELF, 5), (ShapeKind.GRIPPER_PROXY, 3)])
def test_box_unions_are_closed(kind, boxes):
    geom = gen_shape(ShapeSpec(kind=kind))

    assert geom.is_watertight()
    assert geom.euler_characteristic() == 2 * boxes


def test_random_instances_stay_watertight():
    for seed in range(3):
        for kind in (ShapeKind.MUG, ShapeKind.BOWL, ShapeKind.BOTTLE):
            assert gen_shape(random_spec(kind, seed)).is_watertight()


def test_same_spec_gives_the_same_mesh():
    spec = random_spec(ShapeKind.MUG, seed=3)

    a, b = gen_shape(spec), gen_shape(spec)

    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)


def test_scale_doubles_distances():
    spec = ShapeSpec(kind=ShapeKind.BOTTLE)
    base = gen_shape(spec)
    doubled = gen_shape(spec.model_copy(update={"scale": 2.0}))

    assert np.allclose(doubled.vertices, 2.0 * base.vertices)


def test_pose_moves_the_mesh():
    pose = RigidTransform(haar_random_rotation(0), [1.0, 2.0, 3.0])
    spec = ShapeSpec(kind=ShapeKind.BOWL)

    moved = gen_shape(spec.model_copy(update={"pose": pose.to_list()}))

    assert np.allclose(moved.vertices, pose.apply(gen_shape(spec).vertices))


def test_parameters_are_range_checked():
    with pytest.raises(HarnessError, match="outside"):
        resolve_params(ShapeSpec(kind=ShapeKind.MUG, params={"radius": 5.0}))
    with pytest.raises(HarnessError, match="unknown"):
        resolve_params(ShapeSpec(kind=ShapeKind.MUG, params={"spout": 1.0}))


def test_grasp_pose_does_not_penetrate_the_mug():
    spec = ShapeSpec(kind=ShapeKind.MUG)
    mug = gen_shape(spec)
    gripper = gen_shape(ShapeSpec(kind=anchor_kind(TaskKind.GRASP)))

    posed = gripper.transformed(demo_anchor_pose(spec, TaskKind.GRASP))

    assert penetration_depth(posed, mug, samples=512) < 0.02 * mug.diameter
    assert penetration_depth(mug, posed, samples=512) < 0.02 * mug.diameter


def test_place_anchor_depends_on_the_category():
    assert anchor_kind(TaskKind.PLACE) == ShapeKind.RACK
    assert anchor_kind(TaskKind.PLACE, ShapeKind.MUG) == ShapeKind.RACK
    assert anchor_kind(TaskKind.PLACE, ShapeKind.BOWL) == ShapeKind.SHELF
    assert anchor_kind(TaskKind.PLACE, ShapeKind.BOTTLE) == ShapeKind.SHELF
    assert anchor_kind(TaskKind.GRASP, ShapeKind.BOTTLE) == ShapeKind.GRIPPER_PROXY

    with pytest.raises(HarnessError):
        demo_anchor_pose(ShapeSpec(kind=ShapeKind.SHELF), TaskKind.PLACE)


@pytest.mark.parametrize("kind", [ShapeKind.BOWL, ShapeKind.BOTTLE])
def test_vessels_stand_on_the_shelf(kind):
    spec = random_spec(kind, seed=4)
    vessel = gen_shape(spec)
    shelf = gen_shape(ShapeSpec(kind=anchor_kind(TaskKind.PLACE, kind)))

    posed = shelf.transformed(demo_anchor_pose(spec, TaskKind.PLACE))

    assert posed.bbox[1][2] == pytest.approx(-PLACE_CLEARANCE)
    assert vessel.bbox[0][2] == pytest.approx(0.0, abs=1e-9)
    assert penetration_depth(posed, vessel, samples=512) == 0.0
    assert penetration_depth(vessel, posed, samples=512) == 0.0


def test_mug_hangs_on_the_rack_without_penetration():
    spec = ShapeSpec(kind=ShapeKind.MUG)
    mug = gen_shape(spec)
    rack = gen_shape(ShapeSpec(kind=anchor_kind(TaskKind.PLACE, ShapeKind.MUG)))

    posed = rack.transformed(demo_anchor_pose(spec, TaskKind.PLACE))

    assert penetration_depth(posed, mug, samples=512) < 0.02 * mug.diameter


def test_anchor_pose_follows_the_object_pose():
    pose = RigidTransform(haar_random_rotation(1), [0.5, 0.0, -1.0])
    spec = ShapeSpec(kind=ShapeKind.BOTTLE)

    moved = demo_anchor_pose(spec.model_copy(update={"pose": pose.to_list()}), TaskKind.GRASP)

    assert np.allclose(moved.matrix(), pose.matrix() @ demo_anchor_pose(spec, TaskKind.GRASP).matrix())


def test_symmetry_axis():
    pose = RigidTransform(haar_random_rotation(2), [0.0, 1.0, 0.0])
    bowl = ShapeSpec(kind=ShapeKind.BOWL, pose=pose.to_list())

    origin, direction = symmetry_axis(bowl)

    assert np.allclose(origin, [0.0, 1.0, 0.0])
    assert np.allclose(direction, pose.rotation[:, 2])
    assert symmetry_axis(ShapeSpec(kind=ShapeKind.MUG)) is None


def test_shape_sampler_is_seeded():
    sample = shape_sampler([ShapeKind.BOWL])

    a = sample(np.random.default_rng(5))
    b = sample(np.random.default_rng(5))

    assert np.array_equal(a.vertices, b.vertices)
