"""Template construction, few-shot aggregation and template files."""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import cKDTree

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from conftest import icosphere
from errors import FingerprintMismatchError, TemplateError
from field import AnalyticField
from geometry import RigidTransform, haar_random_rotation, nearest_distances, save_geometry
from models import DemoDocument, IbsConfig, ScfConfig, TemplateConfig
from template import (
    DemoInteraction,
    InteractionTemplate,
    aggregate_templates,
    build_template,
    demo_ibs,
    density_weights,
    load_demo,
    template_from_points,
)

SCF = ScfConfig(order=2, dir_count=64, domain_scale=6.0)
CONFIG = TemplateConfig(samples=32, ibs=IbsConfig(grid_res=24, penetration_samples=64))


def _demo(anchor_radius: float = 0.5) -> DemoInteraction:
    """Small sphere hovering above a unit sphere."""
    return DemoInteraction(
        anchor=icosphere(2, radius=anchor_radius),
        source=icosphere(2, radius=1.0),
        anchor_pose=RigidTransform(np.eye(3), [0.0, 0.0, 2.0]),
    )


def _field(demo: DemoInteraction, config: ScfConfig = SCF) -> AnalyticField:
    return AnalyticField(demo.source, config)


def test_template_points_lie_on_the_bisector():
    demo = _demo()

    template = build_template(demo, _field(demo), CONFIG, seed=0)

    local = template.anchor_frame_points()
    d_anchor = nearest_distances(demo.anchor, local)
    d_source = nearest_distances(demo.source_in_anchor_frame, local)
    assert len(template) == 32
    assert template.descriptors.shape == (32, 3)
    assert np.all(np.abs(d_anchor - d_source) / np.maximum(d_anchor, d_source) < 0.01)


def test_template_descriptors_come_from_the_source_field():
    demo = _demo()
    field = _field(demo)

    template = build_template(demo, field, CONFIG, seed=0)

    assert template.field_fingerprint == field.fingerprint
    assert np.allclose(template.descriptors, field.descriptors(template.query_points))
    assert template.anchor_pose_ref.matrix()[2, 3] == 2.0


def test_template_is_deterministic():
    demo = _demo()
    field = _field(demo)
    ibs = demo_ibs(demo, CONFIG)

    a = build_template(demo, field, CONFIG, seed=5, ibs=ibs)
    b = build_template(demo, field, CONFIG, seed=5, ibs=ibs)

    assert np.array_equal(a.query_points, b.query_points)
    assert np.array_equal(a.descriptors, b.descriptors)


def test_moving_the_whole_demo_keeps_anchor_frame_points():
    demo = _demo()
    t = RigidTransform(haar_random_rotation(1), [0.4, -0.7, 1.1])
    moved = demo.transformed(t)

    base = build_template(demo, _field(demo), CONFIG, seed=2)
    other = build_template(moved, _field(moved), CONFIG, seed=2)

    assert np.allclose(other.anchor_frame_points(), base.anchor_frame_points(), atol=1e-6)


def test_too_few_samples_is_rejected():
    demo = _demo()

    with pytest.raises(TemplateError):
        build_template(demo, _field(demo), TemplateConfig(samples=16, ibs=CONFIG.ibs))


def test_identical_demos_aggregate_to_the_single_field():
    demos = [_demo() for _ in range(3)]
    fields = [_field(d) for d in demos]

    template = aggregate_templates(demos, fields, config=CONFIG, seed=0)

    assert len(template) == 32
    assert template.config["demos"] == 3
    np.testing.assert_allclose(template.descriptors, fields[0].descriptors(template.query_points), atol=1e-9)


def test_aggregated_points_come_from_the_bisectors():
    demos = [_demo(), _demo()]
    fields = [_field(d) for d in demos]
    ibs_sets = [demo_ibs(d, CONFIG) for d in demos]

    template = aggregate_templates(demos, fields, config=CONFIG, seed=1, ibs_sets=ibs_sets)

    tree = cKDTree(np.concatenate([s.points for s in ibs_sets]))
    distances, _ = tree.query(template.anchor_frame_points())
    assert distances.max() < 1e-9


def test_aggregation_needs_a_shared_anchor():
    demos = [_demo(0.5), _demo(0.4)]

    with pytest.raises(TemplateError, match="anchor geometry"):
        aggregate_templates(demos, [_field(d) for d in demos], config=CONFIG)


def test_aggregation_needs_one_feature_definition():
    demos = [_demo(), _demo()]
    fields = [_field(demos[0]), _field(demos[1], ScfConfig(order=3, dir_count=64, domain_scale=6.0))]

    with pytest.raises(FingerprintMismatchError):
        aggregate_templates(demos, fields, config=CONFIG)


def test_template_from_points_averages_demos():
    demos = [_demo(), _demo()]
    fields = [_field(d) for d in demos]
    points = np.array([[0.0, 0.0, -0.5], [0.2, 0.0, -0.6]])

    template = template_from_points(demos, fields, points)

    assert np.allclose(template.anchor_frame_points(), points)
    assert np.allclose(template.descriptors, fields[0].descriptors(template.query_points))


def test_density_weights_favour_shared_regions():
    rng = np.random.default_rng(0)
    shared = rng.uniform(0.0, 1.0, size=(20, 3))
    crowded = np.concatenate([shared + rng.normal(scale=1e-3, size=shared.shape) for _ in range(3)])
    lonely = rng.uniform(5.0, 6.0, size=(20, 3))
    points = np.concatenate([crowded, lonely])

    dense = density_weights(points, k=3, delta=1e-4)
    sparse = density_weights(points, k=3, delta=1e-4, prefer_sparse=True)

    assert dense.sum() == pytest.approx(1.0)
    assert dense[:60].mean() > dense[60:].mean()
    assert sparse[:60].mean() < sparse[60:].mean()


def test_template_file_round_trip(tmp_path):
    demo = _demo()
    template = build_template(demo, _field(demo), CONFIG, seed=0)

    loaded = InteractionTemplate.load(template.save(tmp_path / "template.json"))

    assert np.allclose(loaded.query_points, template.query_points)
    assert np.allclose(loaded.descriptors, template.descriptors)
    assert loaded.field_fingerprint == template.field_fingerprint
    assert np.allclose(loaded.anchor_pose_ref.matrix(), template.anchor_pose_ref.matrix())


def test_unknown_template_version_is_rejected(tmp_path):
    demo = _demo()
    path = build_template(demo, _field(demo), CONFIG, seed=0).save(tmp_path / "template.json")
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))

    with pytest.raises(TemplateError, match="version"):
        InteractionTemplate.load(path)


def test_misaligned_descriptors_are_rejected():
    with pytest.raises(TemplateError):
        InteractionTemplate(np.zeros((3, 3)), np.zeros((2, 4)), RigidTransform.identity(), "test")


def test_field_check_reports_both_fingerprints():
    demo = _demo()
    template = build_template(demo, _field(demo), CONFIG, seed=0)
    other = _field(demo, ScfConfig(order=3, dir_count=64))

    with pytest.raises(FingerprintMismatchError) as info:
        template.check_field(other)

    assert template.field_fingerprint in str(info.value)
    assert other.fingerprint in str(info.value)


def test_load_demo_resolves_relative_paths(tmp_path):
    demo = _demo()
    save_geometry(demo.anchor, tmp_path / "meshes" / "anchor.obj")
    save_geometry(demo.source, tmp_path / "meshes" / "source.obj")
    doc = DemoDocument(anchor="meshes/anchor.obj", source="meshes/source.obj",
                       anchor_pose=demo.anchor_pose.to_list())
    path = tmp_path / "demo.json"
    path.write_text(doc.model_dump_json())

    loaded = load_demo(path)

    assert np.allclose(loaded.anchor_pose.matrix(), demo.anchor_pose.matrix())
    assert loaded.source.is_mesh
