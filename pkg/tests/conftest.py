"""Shared fixtures: small closed meshes and cheap pipeline configs."""

import sys
from pathlib import Path

import numpy as np
import pytest
import trimesh

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from geometry import Geometry
from models import IbsConfig, ScfConfig


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Geometry:
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return Geometry.mesh(np.asarray(mesh.vertices) + np.asarray(center, dtype=float), np.asarray(mesh.faces))


def box(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Geometry:
    mesh = trimesh.creation.box(extents=extents)
    return Geometry.mesh(np.asarray(mesh.vertices) + np.asarray(center, dtype=float), np.asarray(mesh.faces))


def shell(inner: float, outer: float, subdivisions: int = 3) -> Geometry:
    """Closed thick spherical shell: outward outer sphere plus inward inner sphere."""
    out = trimesh.creation.icosphere(subdivisions=subdivisions, radius=outer)
    inn = trimesh.creation.icosphere(subdivisions=subdivisions, radius=inner)
    vertices = np.concatenate([out.vertices, inn.vertices])
    faces = np.concatenate([out.faces, inn.faces[:, ::-1] + len(out.vertices)])
    return Geometry.mesh(vertices, faces)


@pytest.fixture
def unit_sphere() -> Geometry:
    return icosphere(3)


@pytest.fixture
def unit_cube() -> Geometry:
    return box()


@pytest.fixture
def small_scf() -> ScfConfig:
    return ScfConfig(order=2, dir_count=64)


@pytest.fixture
def small_ibs() -> IbsConfig:
    return IbsConfig(grid_res=24, penetration_samples=64)
