"""Descriptor fields: analytic and learned backends, training data and heatmaps."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from conftest import icosphere
from errors import FieldError
from field import (
    AnalyticField,
    DescriptorField,
    LearnedField,
    difference_colors,
    export_heatmap,
    generate_training_set,
    grid_points,
    learned_field,
    load_field,
    train_field,
)
from models import Activation, GridSpec, RegressorConfig, ScfConfig, TargetKind, TrainConfig, TrainingSetConfig
from regressor import init_weights
from shapes import shape_sampler


class ConstantField(DescriptorField):
    """Same descriptor everywhere in a fixed box."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    @property
    def descriptor_dim(self):
        return len(self.value)

    @property
    def fingerprint(self):
        return "test:constant"

    @property
    def domain(self):
        return np.full(3, -1.0), np.full(3, 1.0)

    @property
    def diameter(self):
        return 2.0

    def descriptors(self, points):
        return np.tile(self.value, (len(np.asarray(points).reshape(-1, 3)), 1))

    def descriptor_gradients(self, points):
        return np.zeros((len(np.asarray(points).reshape(-1, 3)), 3, self.descriptor_dim))


def _cloud(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(64, 3))


def _learned(seed: int = 0, **overrides) -> LearnedField:
    config = RegressorConfig(encoder_widths=[16, 32], decoder_widths=[16, 8], cloud_points=64, **overrides)
    return LearnedField(init_weights(config, output_width=4, seed=seed), _cloud())


def test_analytic_field_descriptor(unit_sphere, small_scf):
    field = AnalyticField(unit_sphere, small_scf)

    descriptor = field.descriptor_at([0.0, 0.0, 0.0])

    assert field.descriptor_dim == 3
    assert field.fingerprint == "analytic:scf:n2:d64:fibonacci"
    assert descriptor[0] == pytest.approx(np.sqrt(4.0 * np.pi), abs=2e-2)


def test_analytic_field_is_deterministic(unit_sphere, small_scf):
    field = AnalyticField(unit_sphere, small_scf)
    points = np.array([[0.1, 0.2, -0.3], [1.2, 0.0, 0.0]])

    assert np.array_equal(field.descriptors(points), field.descriptors(points))


def test_analytic_gradients_have_field_shape(unit_sphere, small_scf):
    field = AnalyticField(unit_sphere, small_scf)

    grads = field.descriptor_gradients(np.array([[0.2, 0.1, 0.0], [0.0, 0.0, 0.5]]))

    assert grads.shape == (2, 3, 3)
    assert np.all(np.isfinite(grads))


def test_out_of_domain_gradient_is_rejected(unit_sphere, small_scf):
    field = AnalyticField(unit_sphere, small_scf)

    with pytest.raises(FieldError, match="out-of-domain"):
        field.descriptor_gradient_at([5.0, 0.0, 0.0])


def test_clamp_to_domain_moves_outside_points_only():
    field = ConstantField([1.0])

    clamped, moved = field.clamp_to_domain(np.array([[0.5, 0.0, 0.0], [3.0, 0.0, 0.0]]))

    assert np.allclose(clamped, [[0.5, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert np.allclose(moved, [0.0, 2.0])


def test_learned_descriptor_width():
    field = _learned()

    assert field.descriptor_dim == 16 + 8 + 4
    assert field.descriptors(np.zeros((3, 3))).shape == (3, 28)
    assert _learned(include_output_layer=False).descriptor_dim == 24


def test_learned_gradients_match_finite_differences():
    field = _learned(seed=1)
    points = np.random.default_rng(2).uniform(-0.5, 0.5, size=(4, 3))
    h = 1e-5

    grads = field.descriptor_gradients(points)

    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        fd = (field.descriptors(points + step) - field.descriptors(points - step)) / (2.0 * h)
        np.testing.assert_allclose(grads[:, k, :], fd, rtol=1e-4, atol=1e-7)


def test_pre_activation_descriptor_gradients_match_finite_differences():
    field = _learned(seed=3, concat_pre_activation=True, activation=Activation.TANH)
    points = np.random.default_rng(4).uniform(-0.5, 0.5, size=(3, 3))
    h = 1e-5

    grads = field.descriptor_gradients(points)

    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        fd = (field.descriptors(points + step) - field.descriptors(points - step)) / (2.0 * h)
        np.testing.assert_allclose(grads[:, k, :], fd, rtol=1e-4, atol=1e-7)


def test_linear_decoder_jacobian_is_weight_product():
    field = _learned(seed=5, activation=Activation.IDENTITY)
    weights = field.weights.decoder

    grads = field.descriptor_gradient_at([0.1, 0.2, 0.3])

    blocks, product = [], None
    for w, _ in weights:
        product = w[:3] if product is None else product @ w
        blocks.append(product / field.scale)
    assert np.allclose(grads, np.hstack(blocks), atol=1e-12)


def test_vector_jacobian_agrees_with_full_jacobian():
    field = _learned(seed=6)
    points = np.random.default_rng(7).uniform(-0.5, 0.5, size=(5, 3))
    cotangents = np.random.default_rng(8).normal(size=(5, field.descriptor_dim))

    vjp = field.vector_jacobian(points, cotangents)
    full = np.einsum("nkd,nd->nk", field.descriptor_gradients(points), cotangents)

    assert np.allclose(vjp, full, atol=1e-10)


def test_fields_on_the_same_cloud_agree():
    a, b = _learned(seed=9), _learned(seed=9)
    points = np.random.default_rng(10).uniform(-0.5, 0.5, size=(6, 3))

    assert a.fingerprint == b.fingerprint
    assert np.array_equal(a.descriptors(points), b.descriptors(points))


def test_learned_field_is_continuous():
    field = _learned(seed=11)
    x = np.array([[0.1, -0.2, 0.05]])
    direction = np.array([[1.0, 1.0, 0.0]]) / np.sqrt(2.0)

    changes = [np.linalg.norm(field.descriptors(x + h * direction) - field.descriptors(x))
               for h in (1e-1, 1e-2, 1e-3, 1e-4)]

    assert all(later < earlier for earlier, later in zip(changes, changes[1:]))


def test_occupancy_needs_an_occupancy_field():
    with pytest.raises(FieldError):
        _learned().occupancy(np.zeros((1, 3)))


def test_load_field_analytic(unit_sphere, small_scf):
    field = load_field("analytic", unit_sphere, small_scf)

    assert isinstance(field, AnalyticField)


def test_load_field_learned(tmp_path, unit_sphere):
    config = RegressorConfig(encoder_widths=[8], decoder_widths=[8], cloud_points=32)
    path = init_weights(config, output_width=3, seed=0).save(tmp_path / "field.nift")

    field = load_field(str(path), unit_sphere, cloud_seed=1)

    assert isinstance(field, LearnedField)
    assert field.cloud.shape == (32, 3)


def test_generate_training_set_is_deterministic():
    config = TrainingSetConfig(cloud_points=32, scf=ScfConfig(order=3, dir_count=200))

    a = generate_training_set(shape_sampler(), 2, 16, seed=4, config=config)
    b = generate_training_set(shape_sampler(), 2, 16, seed=4, config=config)

    assert a.pair_count == 32
    assert a.targets.shape == (2, 16, 4)
    assert np.all(a.targets[:, :, 0] > 0)
    assert np.array_equal(a.queries, b.queries)
    assert np.array_equal(a.targets, b.targets)


def test_generate_occupancy_training_set():
    config = TrainingSetConfig(cloud_points=32, scf=ScfConfig(order=3, dir_count=200))

    data = generate_training_set(shape_sampler(), 2, 64, seed=0, config=config,
                                 target_kind=TargetKind.OCCUPANCY)

    assert data.target_kind == TargetKind.OCCUPANCY
    assert set(np.unique(data.targets).tolist()) <= {0.0, 1.0}


def test_train_field_then_bind_to_a_cloud():
    data = generate_training_set(shape_sampler(), 3, 16, seed=2,
                                 config=TrainingSetConfig(cloud_points=32, scf=ScfConfig(order=3, dir_count=200)))
    config = RegressorConfig(encoder_widths=[8], decoder_widths=[8], cloud_points=32)

    weights = train_field(data, config, TrainConfig(epochs=2, batch_objects=2, batch_queries=8, seed=0))
    field = learned_field(weights, data.clouds[0])

    assert weights.metadata.epochs == 2
    assert len(weights.metadata.loss_curve) == 2
    assert weights.metadata.scf.order == 3
    assert field.descriptor_dim == 8 + 4
    assert np.all(np.isfinite(field.descriptors(data.queries[0])))


def test_heatmap_is_zero_at_the_query_point(tmp_path):
    field = _learned(seed=12)
    grid = GridSpec(resolution=3, lo=[-0.5, -0.5, -0.5], hi=[0.5, 0.5, 0.5])
    x = [0.0, 0.5, -0.5]

    heatmap = export_heatmap(field, x, field, grid, tmp_path / "heat.ply")

    at_x = np.flatnonzero(np.all(heatmap.points == np.asarray(x), axis=1))
    assert len(heatmap.points) == 27
    assert heatmap.values[at_x[0]] < 1e-9
    assert heatmap.values.min() < 1e-9
    assert (tmp_path / "heat.ply").exists()


def test_constant_field_heatmap_is_monochrome():
    grid = GridSpec(resolution=4)

    heatmap = export_heatmap(ConstantField([1.0, 2.0]), [0.0, 0.0, 0.0], ConstantField([3.0, 3.0]), grid)

    assert np.allclose(heatmap.values, 3.0)
    assert np.allclose(heatmap.colors, [0.0, 0.0, 1.0])


def test_heatmap_query_outside_domain_is_rejected():
    with pytest.raises(FieldError):
        export_heatmap(ConstantField([1.0]), [4.0, 0.0, 0.0], ConstantField([1.0]), GridSpec(resolution=2))


def test_slice_grid():
    grid = GridSpec(resolution=5, slice_axis=2, slice_offset=0.25)

    points = grid_points(grid, (np.zeros(3), np.ones(3)))

    assert points.shape == (25, 3)
    assert np.all(points[:, 2] == 0.25)


def test_difference_colors_span_blue_to_red():
    colors = difference_colors(np.array([0.0, 1.0, 2.0]))

    assert np.allclose(colors[0], [0.0, 0.0, 1.0])
    assert np.allclose(colors[-1], [1.0, 0.0, 0.0])
