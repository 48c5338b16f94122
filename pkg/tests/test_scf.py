"""Direction sets, spherical harmonics and SCF descriptor tests."""

import sys
from pathlib import Path

import numpy as np
import pytest
import trimesh

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from conftest import icosphere
from errors import ScfError
from geometry import Geometry, RigidTransform, haar_random_rotation
from models import DirectionScheme, ScfConfig
from scf import (
    FOUR_PI,
    band_powers,
    make_direction_set,
    normalize_distances,
    scf_at,
    scf_batch,
    sh_basis,
    sh_basis_matrix,
    sh_expand,
    sh_index,
    spherical_distance_function,
)


def _blob() -> Geometry:
    """Asymmetric closed convex hull."""
    points = np.random.default_rng(9).normal(size=(40, 3)) * np.array([1.0, 0.7, 0.5])
    hull = trimesh.convex.convex_hull(points)
    return Geometry.mesh(np.asarray(hull.vertices), np.asarray(hull.faces))


def test_fibonacci_directions_are_balanced():
    dirs = make_direction_set(1000, DirectionScheme.FIBONACCI)

    assert len(dirs) == 1000
    assert np.allclose(np.linalg.norm(dirs.directions, axis=1), 1.0)
    assert dirs.weights.sum() == pytest.approx(FOUR_PI)
    assert np.linalg.norm(dirs.directions.mean(axis=0)) < 1e-2


def test_equiangular_weights_sum_to_sphere_area():
    dirs = make_direction_set(800, DirectionScheme.EQUIANGULAR)

    assert len(dirs) <= 800
    assert dirs.weights.sum() == pytest.approx(FOUR_PI)
    assert np.all(dirs.weights > 0)


def test_direction_count_below_floor_is_rejected():
    with pytest.raises(ScfError):
        make_direction_set(100, DirectionScheme.FIBONACCI, max_order=5)


def test_normalize_distances():
    samples = normalize_distances([1.0, 2.0, 3.0])

    assert np.allclose(samples.values, [1.0, 0.75, 0.6])
    assert samples.d_min == 1.0
    assert samples.d_avg == 2.0


def test_misses_map_to_zero():
    samples = normalize_distances([1.0, np.inf, 3.0])

    assert samples.values[1] == 0.0
    assert samples.values[0] == pytest.approx(1.0)


def test_point_that_sees_nothing_is_an_error():
    with pytest.raises(ScfError, match="sees no object"):
        normalize_distances([np.inf, np.inf])


def test_low_order_basis_values():
    assert sh_basis(0, 0, [0.3, 0.4, 0.866]) == pytest.approx(1.0 / np.sqrt(FOUR_PI))
    assert sh_basis(1, 0, [0.0, 0.0, 1.0]) == pytest.approx(np.sqrt(3.0 / FOUR_PI))
    assert sh_basis(1, 1, [1.0, 0.0, 0.0]) == pytest.approx(np.sqrt(3.0 / FOUR_PI))


def test_invalid_band_index_is_rejected():
    with pytest.raises(ScfError):
        sh_basis(1, 2, [0.0, 0.0, 1.0])


def test_basis_is_orthonormal_under_quadrature():
    dirs = make_direction_set(5000, DirectionScheme.FIBONACCI)
    basis = sh_basis_matrix(5, dirs.directions)

    gram = basis.T @ (basis * dirs.weights[:, None])

    assert np.abs(gram - np.eye(36)).max() < 5e-3


def test_expansion_of_constant_and_single_harmonic():
    dirs = make_direction_set(3000, DirectionScheme.FIBONACCI)
    basis = sh_basis_matrix(5, dirs.directions)

    constant = sh_expand(np.ones(len(dirs)), dirs, 5)
    single = sh_expand(basis[:, sh_index(2, 1)], dirs, 5)

    assert constant[0] == pytest.approx(np.sqrt(FOUR_PI), abs=1e-6)
    assert np.abs(constant[1:]).max() < 1e-3
    assert single[sh_index(2, 1)] == pytest.approx(1.0, abs=1e-3)
    assert np.abs(np.delete(single, sh_index(2, 1))).max() < 5e-3


def test_expansion_is_linear():
    dirs = make_direction_set(500, DirectionScheme.FIBONACCI, max_order=3)
    rng = np.random.default_rng(0)
    f, g = rng.random(len(dirs)), rng.random(len(dirs))

    lhs = sh_expand(2.0 * f + 3.0 * g, dirs, 3)
    rhs = 2.0 * sh_expand(f, dirs, 3) + 3.0 * sh_expand(g, dirs, 3)

    assert np.allclose(lhs, rhs, atol=1e-12)


def test_band_powers():
    coeffs = np.zeros(9)
    coeffs[sh_index(1, -1)] = 3.0
    coeffs[sh_index(1, 0)] = 4.0

    assert np.allclose(band_powers(coeffs, 2), [0.0, 5.0, 0.0])


def test_descriptor_at_sphere_center():
    sphere = icosphere(4)

    descriptor = scf_at(sphere, [0.0, 0.0, 0.0], ScfConfig(order=5, dir_count=2000))

    assert descriptor.powers[0] == pytest.approx(np.sqrt(FOUR_PI), abs=1e-2)
    assert np.all(descriptor.powers[1:] < 1e-2)


def test_descriptor_is_rotation_invariant():
    blob = _blob()
    config = ScfConfig(order=5, dir_count=4000)
    point = np.array([0.1, -0.05, 0.08])
    base = scf_at(blob, point, config).powers

    for seed in range(5):
        t = RigidTransform(haar_random_rotation(seed), np.random.default_rng(seed).normal(size=3))
        moved = scf_at(blob.transformed(t), t.apply(point), config).powers
        assert np.abs(moved - base).max() / np.abs(base).max() < 0.02


def test_descriptor_is_scale_invariant():
    blob = _blob()
    config = ScfConfig(order=4, dir_count=1000)
    point = np.array([0.2, 0.1, -0.1])

    base = scf_at(blob, point, config).powers
    scaled = scf_at(blob.scaled(2.0), 2.0 * point, config).powers

    assert np.allclose(scaled, base, rtol=1e-6, atol=1e-9)


def test_doubling_the_direction_count_barely_moves_descriptors():
    blob = _blob()
    point = np.array([0.1, 0.05, -0.05])

    coarse = scf_at(blob, point, ScfConfig(order=5, dir_count=2000)).powers
    fine = scf_at(blob, point, ScfConfig(order=5, dir_count=4000)).powers

    assert np.abs(fine - coarse).max() / np.abs(fine).max() < 0.01


def test_batch_is_deterministic_and_thread_independent():
    blob = _blob()
    config = ScfConfig(order=3, dir_count=300)
    points = np.random.default_rng(3).uniform(-0.3, 0.3, size=(70, 3))

    single = scf_batch(blob, points, config, threads=1)
    again = scf_batch(blob, points, config, threads=1)
    threaded = scf_batch(blob, points, config, threads=4)

    assert single.shape == (70, 4)
    assert np.array_equal(single, again)
    assert np.array_equal(single, threaded)


def test_parseval_bound():
    blob = _blob()
    dirs = make_direction_set(2000, DirectionScheme.FIBONACCI)
    samples = spherical_distance_function(blob.accelerator, [0.05, 0.0, 0.0], dirs)

    powers = band_powers(sh_expand(samples, dirs, 5), 5)
    energy = float(np.sum(dirs.weights * samples.values ** 2))

    assert float(np.sum(powers ** 2)) <= energy + 5e-2


def test_query_outside_the_domain_box_is_rejected():
    sphere = icosphere(2)
    config = ScfConfig(order=2, dir_count=64)

    with pytest.raises(ScfError, match="outside the SCF domain"):
        scf_at(sphere, [5.0, 0.0, 0.0], config)
    with pytest.raises(ScfError, match="1 query point"):
        scf_batch(sphere, np.array([[0.0, 0.0, 0.0], [0.0, -4.0, 0.0]]), config)


def test_query_on_the_domain_boundary_is_accepted():
    sphere = icosphere(2)
    config = ScfConfig(order=2, dir_count=200)
    _, hi = sphere.domain_box(config.domain_scale)

    powers = scf_batch(sphere, np.array([[hi[0], 0.0, 0.0]]), config)

    assert powers.shape == (1, 3)
    assert np.all(np.isfinite(powers))
