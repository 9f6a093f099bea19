from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patterncloth.board import generate_board
from patterncloth.geometry import (
    AugmentParams, DisconnectedMask, SingularSystem, augment_field, build_template, cotangent_laplacian,
    cylinder_embedding, laplacian_fill, lb_eigenbasis, lumped_mass, mesh_edges, spectral_augment, vertex_normals,
)
from patterncloth.rotations import exp_so3, log_so3, matrix_to_quat, quat_to_matrix, right_jacobian, rotvec_to_quat

rotvec = st.tuples(*[st.floats(-2.5, 2.5, allow_nan=False)] * 3).map(np.array)


def test_template_has_one_vertex_per_cell(flat_template):
    t = flat_template
    assert t.n_vertices == 12 * 14
    assert len(t.triangles) == 2 * 11 * 13
    idx = t.coord_index()
    assert all(idx[tuple(c)] == k for k, c in enumerate(t.board_coords))
    # every edge joins cells at most one row and one column apart
    e = t.edges
    assert np.abs(t.board_coords[e[:, 0]] - t.board_coords[e[:, 1]]).max() == 1


def test_masked_template_skips_inactive_cells():
    b = generate_board(8, 8, seed=0)
    mask = np.ones((8, 8), bool)
    mask[3, 3] = False
    t = build_template(b, mask)
    assert t.n_vertices == 63
    # the four blocks around the hole keep one triangle each
    assert len(t.triangles) == 2 * 49 - 4
    split = mask.copy()
    split[:, 4] = False
    with pytest.raises(DisconnectedMask):
        build_template(b, split)


def test_laplacian_annihilates_affine_fields(flat_template):
    L = cotangent_laplacian(flat_template.vertices, flat_template.triangles)
    V = flat_template.vertices
    assert np.abs(L @ np.ones(len(V))).max() < 1e-10
    # interior rows are exact for linear fields on a flat mesh
    lin = V @ np.array([0.3, -1.2, 0.5]) + 2
    deg = np.diff(L.indptr) - 1
    interior = deg == 6
    assert np.abs((L @ lin)[interior]).max() < 1e-9


def test_laplacian_fill_reproduces_linear_fields(flat_template):
    V = flat_template.vertices
    rng = np.random.default_rng(0)
    mask = rng.random(len(V)) < 0.4
    bc = flat_template.board_coords
    boundary = (bc[:, 0] == 0) | (bc[:, 0] == 11) | (bc[:, 1] == 0) | (bc[:, 1] == 13)
    mask |= boundary
    target = V @ np.array([[1, 0.2, 0], [0, 1, 0.1], [0.3, 0, 1]]) + [5, 6, 7]
    out = laplacian_fill(flat_template.triangles, V, mask, target)
    assert np.abs(out - target).max() < 1e-9
    short = laplacian_fill(flat_template.triangles, V, mask, target[mask])
    assert np.array_equal(out, short)


def test_laplacian_fill_needs_constraints(flat_template):
    with pytest.raises(SingularSystem):
        laplacian_fill(flat_template.triangles, flat_template.vertices, np.zeros(flat_template.n_vertices, bool),
                       np.zeros((0, 3)))


def test_eigenbasis_is_mass_orthonormal(flat_template):
    V, T = flat_template.vertices, flat_template.triangles
    B = lb_eigenbasis(V, T, 8)
    G = B.eigenfunctions.T @ (B.mass[:, None] * B.eigenfunctions)
    assert np.abs(G - np.eye(8)).max() < 1e-8
    assert abs(B.eigenvalues[0]) < 1e-9
    assert np.all(np.diff(B.eigenvalues) >= -1e-9)
    L = cotangent_laplacian(V, T)
    r = L @ B.eigenfunctions - B.mass[:, None] * B.eigenfunctions * B.eigenvalues
    assert np.abs(r).max() < 1e-8


def test_sparse_and_dense_eigen_paths_agree():
    b = generate_board(52, 52, seed=1)
    t = build_template(b)
    import patterncloth.geometry as g

    dense = lb_eigenbasis(t.vertices, t.triangles, 5)
    old = g.DENSE_EIG_LIMIT
    g.DENSE_EIG_LIMIT = 10
    try:
        sparse = lb_eigenbasis(t.vertices, t.triangles, 5)
    finally:
        g.DENSE_EIG_LIMIT = old
    assert np.allclose(dense.eigenvalues, sparse.eigenvalues, atol=1e-8)


def test_augment_field_closed_form(flat_template):
    B = lb_eigenbasis(flat_template.vertices, flat_template.triangles, 6)
    p = AugmentParams(alpha=0.5, n_modes=6, seed=2)
    q = np.array([1, 0, 1, 1, 0, 1.0])
    D, A, _ = augment_field(B, p, amplitude=3.0, selectors=q)
    expect = 3.0 * B.eigenfunctions @ (q * np.exp(-0.5 * np.arange(1, 7)))
    assert np.allclose(D, expect)
    out = spectral_augment(flat_template.vertices, flat_template.triangles, B, p, 3.0, q)
    n = vertex_normals(flat_template.vertices, flat_template.triangles)
    assert np.allclose(out - flat_template.vertices, D[:, None] * n)
    same = spectral_augment(flat_template.vertices, flat_template.triangles, B, p, 0.0, q)
    assert np.array_equal(same, flat_template.vertices)


def test_mass_sums_to_area():
    b = generate_board(6, 9, seed=0, cell_size_mm=2.0)
    t = build_template(b)
    assert np.isclose(lumped_mass(t.vertices, t.triangles).sum(), 5 * 8 * 4.0)


def test_cylinder_normals_point_outward():
    V = cylinder_embedding(6, 40, 2.7, 20.0).reshape(-1, 3)
    t = build_template(generate_board(6, 40, seed=0), rest_embedding=V.reshape(6, 40, 3))
    n = vertex_normals(t.vertices, t.triangles)
    radial = t.vertices[:, :2] / np.linalg.norm(t.vertices[:, :2], axis=1, keepdims=True)
    assert np.all(np.einsum("ij,ij->i", n[:, :2], radial) > 0.9)
    assert len(mesh_edges(t.triangles)) == len(t.edges)


@given(rotvec)
def test_exp_log_round_trip(w):
    R = exp_so3(w)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert np.allclose(exp_so3(log_so3(R)), R, atol=1e-10)


@given(rotvec)
def test_quaternion_round_trip(w):
    R = exp_so3(w)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-10)
    assert np.allclose(quat_to_matrix(rotvec_to_quat(w)), R, atol=1e-10)


@given(rotvec, st.tuples(*[st.floats(-1, 1)] * 3).map(np.array))
def test_right_jacobian_matches_finite_differences(w, d):
    # exp(w + h d) = exp(w) exp(h J_r(w) d) to first order
    h = 1e-6
    lhs = log_so3(exp_so3(w).T @ exp_so3(w + h * d)) / h
    assert np.allclose(lhs, right_jacobian(w) @ d, atol=1e-4)
