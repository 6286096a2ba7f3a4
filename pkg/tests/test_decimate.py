import numpy as np
import pytest

from meshgrow.decimate import decimate, reachable_edge_target
from meshgrow.mesh import (
    NonManifoldError,
    edge_lengths,
    face_normals,
    make_mesh,
    signed_volume,
    validate_manifold,
)
from meshgrow.primitives import icosphere, tetrahedron
from meshgrow.voxel import marching_cubes

from conftest import random_blob_mask


@pytest.mark.parametrize(
    "current,target,expected",
    [
        (7680, 1000, 999),  # closed manifolds move in -3 steps, 1000 unreachable
        (7680, 2000, 1998),
        (7680, 7680, 7680),
        (10, 12, 10),
        (12, 6, 6),
        (12, 7, 6),
    ],
)
def test_reachable_edge_target(current, target, expected):
    assert reachable_edge_target(current, target) == expected


def test_icosphere_to_budget():
    mesh = icosphere(4, 1.0)
    assert mesh.edge_count == 7680
    out = decimate(mesh, 1000)
    assert out.edge_count == 999
    rep = validate_manifold(out)
    assert rep.is_closed_manifold
    assert rep.euler_characteristic == 2


def test_identity_when_already_small(tetra, sphere2):
    assert decimate(sphere2, sphere2.edge_count) is sphere2
    assert decimate(sphere2, 10**6) is sphere2
    assert decimate(tetra, 6) is tetra


def test_target_below_tetrahedron_rejected(sphere2):
    with pytest.raises(ValueError):
        decimate(sphere2, 5)


def test_open_mesh_rejected(sphere2):
    open_mesh = make_mesh(sphere2.vertices, sphere2.faces[:-1])
    with pytest.raises(NonManifoldError):
        decimate(open_mesh, 60)


def test_geometry_preserved_on_sphere():
    """Decimated unit icosphere stays within 2x mean input edge length.

    Bounds the two-sided surface distance by the decimated vertices'
    radial deviation plus the sag of each decimated face below the
    sphere (plane offset of the face's supporting plane).
    """
    mesh = icosphere(4, 1.0)
    budget = reachable_edge_target(mesh.edge_count, 1000)
    out = decimate(mesh, budget)
    threshold = 2.0 * edge_lengths(mesh).mean()

    radial_dev = np.abs(np.linalg.norm(out.vertices, axis=1) - 1.0)
    normals = face_normals(out)
    plane_offset = np.einsum("ij,ij->i", normals, out.vertices[out.faces[:, 0]])
    sag = 1.0 - np.minimum(plane_offset, 1.0)
    assert max(radial_dev.max(), sag.max()) < threshold


def test_volume_roughly_preserved():
    mesh = icosphere(3, 1.0)
    out = decimate(mesh, reachable_edge_target(mesh.edge_count, 500))
    assert signed_volume(out) == pytest.approx(signed_volume(mesh), rel=0.05)


@pytest.mark.parametrize("seed", [0, 3, 11])
def test_blob_surfaces_decimate_to_budget(seed):
    mesh = marching_cubes(random_blob_mask(np.random.default_rng(seed)))
    out = decimate(mesh, 1000)
    assert out.edge_count == reachable_edge_target(mesh.edge_count, 1000)
    assert validate_manifold(out).is_closed_manifold


def test_decimation_is_deterministic():
    mesh = icosphere(3, 1.0)
    a = decimate(mesh, 500)
    b = decimate(mesh, 500)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.faces, b.faces)


def test_decimation_keeps_normals_outward():
    mesh = icosphere(3, 2.0)
    out = decimate(mesh, 500)
    n = face_normals(out)
    centroids = out.vertices[out.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, centroids) > 0)


def test_tetrahedron_floor_identity():
    t = tetrahedron(2.5)
    out = decimate(t, 6)
    assert np.array_equal(out.vertices, t.vertices)
    assert np.array_equal(out.faces, t.faces)
