"""Geometry oracles: analytic spheres, finite-difference gradients, watertightness, OBJ parsing."""

import io
from collections import Counter

import numpy as np
import pytest

from pstereo.geomgen import (
    BlobField,
    BlobPolicy,
    TriMesh,
    load_obj,
    marching_cubes,
    sample_blob_field,
    sphere_radius,
)


def edge_use_counts(faces):
    counts = Counter()
    for a, b, c in faces:
        for e in ((a, b), (b, c), (c, a)):
            counts[tuple(sorted(e))] += 1
    return counts


def sphere_field(sigma=0.3, iso=0.5):
    return BlobField(np.zeros((1, 3)), np.ones(1), np.array([sigma]), iso)


# ---------------------------------------------------------------------------
# blob fields


def test_single_blob_iso_radius():
    # Solve exp(-r^2 / (2 sigma^2)) = 0.5 -> r = sigma * sqrt(2 ln 2)
    r = sphere_radius(1.0, 0.3, 0.5)
    assert r == pytest.approx(0.3 * np.sqrt(2 * np.log(2)), abs=1e-12)
    f = sphere_field()
    on_surface = np.array([[r, 0.0, 0.0], [0.0, -r, 0.0], [0.0, 0.0, r]])
    np.testing.assert_allclose(f.values(on_surface), 0.5, atol=1e-12)


def test_field_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    f = BlobField(rng.uniform(-0.4, 0.4, (5, 3)), rng.uniform(0.5, 1.5, 5),
                  rng.uniform(0.2, 0.4, 5), iso=0.8)
    pts = rng.uniform(-0.8, 0.8, (40, 3))
    ana = f.gradients(pts)
    num = np.zeros_like(ana)
    h = 1e-6
    for axis in range(3):
        dp = pts.copy()
        dp[:, axis] += h
        dm = pts.copy()
        dm[:, axis] -= h
        num[:, axis] = (f.values(dp) - f.values(dm)) / (2 * h)
    scale = np.maximum(np.abs(num), 1e-3)
    assert (np.abs(ana - num) / scale).max() <= 1e-6


def test_sample_blob_field_deterministic():
    a = sample_blob_field(42)
    b = sample_blob_field(42)
    assert (a.centers == b.centers).all()
    assert (a.amplitudes == b.amplitudes).all()
    assert (a.sigmas == b.sigmas).all()


def test_sample_blob_field_exhausts_resamples():
    # Amplitudes can never reach the iso level: every draw is rejected.
    policy = BlobPolicy(n_blobs=(1, 1), amplitude=(0.05, 0.1), sigma=(0.15, 0.2), iso=0.8)
    with pytest.raises(ValueError, match="resamples"):
        sample_blob_field(0, policy, max_resamples=8)


# ---------------------------------------------------------------------------
# marching cubes


def test_sphere_vertices_within_radial_tolerance():
    grid = 64
    mesh = marching_cubes(sphere_field(), grid=grid)
    assert not mesh.empty
    cell = 2.0 / (grid - 1)
    r = sphere_radius(1.0, 0.3, 0.5)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - r).max() <= 1.5 * cell


def test_sphere_normals_match_radial_direction():
    mesh = marching_cubes(sphere_field(), grid=64)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    cosang = np.clip((mesh.normals * radial).sum(1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cosang))
    assert ang.max() <= 2.0
    assert ang.mean() < 0.5


def test_sphere_mesh_is_watertight():
    mesh = marching_cubes(sphere_field(), grid=48)
    counts = edge_use_counts(mesh.faces)
    assert counts and set(counts.values()) == {2}


def test_blobby_mesh_is_watertight_and_unit_normals():
    f = sample_blob_field(7)
    mesh = marching_cubes(f, grid=56)
    assert not mesh.empty
    counts = edge_use_counts(mesh.faces)
    assert set(counts.values()) == {2}
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)


def test_field_above_iso_gives_empty_mesh():
    f = BlobField(np.zeros((1, 3)), np.array([100.0]), np.array([50.0]), iso=0.5)
    mesh = marching_cubes(f, grid=16)
    assert mesh.empty


def test_marching_cubes_deterministic():
    f = sample_blob_field(3)
    a = marching_cubes(f, grid=32)
    b = marching_cubes(f, grid=32)
    assert (a.vertices == b.vertices).all()
    assert (a.faces == b.faces).all()
    assert (a.normals == b.normals).all()


def test_marching_cubes_rejects_small_grid():
    with pytest.raises(ValueError, match=">= 8"):
        marching_cubes(sphere_field(), grid=4)


# ---------------------------------------------------------------------------
# OBJ parsing


QUAD_AS_TRIS = """
# unit quad, two triangles, no normals
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
f 1 2 3
f 1 3 4
"""


def test_obj_planar_quad_normals():
    mesh = load_obj(io.StringIO(QUAD_AS_TRIS))
    assert len(mesh.faces) == 2
    np.testing.assert_allclose(mesh.normals, [[0.0, 0.0, 1.0]] * 4, atol=1e-12)


def test_obj_quad_face_fans_into_two_triangles():
    mesh = load_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_negative_indices():
    mesh = load_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2]])


def test_obj_vn_indices_used():
    text = """
v 0 0 0
v 1 0 0
v 0 1 0
vn 0 0 1
vn 0 0 1
vn 0 0 1
f 1//1 2//2 3//3
"""
    mesh = load_obj(io.StringIO(text))
    np.testing.assert_allclose(mesh.normals, [[0, 0, 1]] * 3, atol=1e-12)


def test_obj_malformed_line_reports_line_number():
    with pytest.raises(ValueError, match="line 2"):
        load_obj("v 0 0 0\nv 1 zero 0\nv 0 1 0\nf 1 2 3\n")


def test_obj_rejects_lines_and_points():
    with pytest.raises(ValueError, match="line 3"):
        load_obj("v 0 0 0\nv 1 0 0\nl 1 2\n")


def test_obj_out_of_range_index():
    with pytest.raises(ValueError, match="out of range"):
        load_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")


def test_obj_file_path(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text(QUAD_AS_TRIS)
    mesh = load_obj(p)
    assert len(mesh.vertices) == 4
