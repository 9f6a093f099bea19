from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patterncloth.board import build_codebook
from patterncloth.capture_sim import NoiseConfig, simulate_frame
from patterncloth.kinematics import (
    NO_DATA, InsufficientData, Pose, bilaplacian, biharmonic_fill, build_skeleton, build_uv_signal, coarse_fit,
    coarse_mesh, drive_baseline, fit_latent_model, fit_skeleton, node_distortion, skin, spacing_for_count,
)
from patterncloth.registration import RegisteredPixels, register_detections
from patterncloth.rotations import exp_so3
from patterncloth.scenes import sheet_scene


@pytest.fixture(scope="module")
def scene():
    return sheet_scene(rows=30, cols=30, n_frames=1, seed=8, n_cameras=2)


@pytest.fixture(scope="module")
def skel(scene):
    return build_skeleton(scene.template, 10)


def _random_pose(sk, rng, scale=1.0):
    p = Pose.identity(sk)
    p.rotvecs = rng.normal(0, 0.05 * scale, p.rotvecs.shape)
    p.translations = rng.normal(0, 0.5 * scale, p.translations.shape)
    p.root = np.r_[rng.normal(0, 0.1, 3), rng.normal(0, 2, 3)]
    return p


def test_skeleton_structure(scene, skel):
    sk = skel
    assert sk.n_nodes == 9
    assert sk.n_params == 7 * (sk.n_nodes - 1)
    assert (sk.parent == -1).sum() == 1
    # topological order visits parents first
    seen = set()
    for i in sk.order:
        assert sk.parent[i] < 0 or sk.parent[i] in seen
        seen.add(i)
    assert np.allclose(sk.weights.sum(axis=1), 1.0)
    assert np.all(sk.weights >= 0)


def test_full_size_node_count():
    from patterncloth.board import Board
    from patterncloth.geometry import build_template

    t = build_template(Board(np.zeros((300, 900), np.int8) + (np.indices((300, 900)).sum(0) % 2)))
    sr, sc = spacing_for_count(t, 156)
    assert len(range(sr // 2, 300, sr)) * len(range(sc // 2, 900, sc)) == 156


def test_identity_skin_is_rest_bitwise(scene, skel):
    assert np.array_equal(skin(skel, Pose.identity(skel)), scene.template.vertices)


@given(st.tuples(*[st.floats(-2, 2)] * 3).map(np.array), st.tuples(*[st.floats(-20, 20)] * 3).map(np.array))
def test_root_motion_is_rigid(scene, skel, w, t):
    p = Pose.identity(skel)
    p.root = np.r_[w, t]
    c = skel.centers[skel.root]
    R = exp_so3(w)
    expect = (scene.template.vertices - c) @ R.T + c + t
    assert np.abs(skin(skel, p) - expect).max() < 1e-9
    assert node_distortion(skel, p) < 1e-9


def test_leaf_motion_stays_in_support(scene, skel):
    leaf = next(i for i in range(skel.n_nodes) if i not in set(skel.parent.tolist()))
    p = Pose.identity(skel)
    p.rotvecs[leaf] = [0.2, 0.1, 0.0]
    out = skin(skel, p)
    sup = skel.support(leaf)
    assert np.array_equal(out[~sup], scene.template.vertices[~sup])
    assert np.abs(out[sup] - scene.template.vertices[sup]).max() > 0


def test_pack_round_trip(skel, rng):
    p = _random_pose(skel, rng)
    theta = p.pack(skel)
    assert len(theta) == skel.n_params
    q = Pose.unpack(skel, theta, p.root)
    assert np.abs(skin(skel, q) - skin(skel, p)).max() < 1e-9
    with pytest.raises(ValueError):
        Pose.unpack(skel, theta[:-1])


def test_fit_skeleton_recovers_skinned_target(skel, rng):
    target = skin(skel, _random_pose(skel, rng))
    fit = fit_skeleton(target, skel)
    assert fit.rms_mm < 1e-3
    rest = fit_skeleton(skel.rest, skel)
    assert rest.rms_mm < 1e-9


def test_latent_model_spans_a_five_dim_family(skel, rng):
    base = _random_pose(skel, rng).pack(skel)
    B = np.linalg.qr(rng.normal(size=(skel.n_params, 5)))[0]
    Z = rng.normal(size=(40, 5))
    X = base + Z @ B.T * 0.01
    lm = fit_latent_model(X, d=5)
    assert lm.dim == 5
    assert lm.explained[-1] > 1 - 1e-9
    for x in X[:5]:
        assert np.abs(lm.decode(lm.encode(x)) - x).max() < 1e-10
    with pytest.raises(InsufficientData):
        fit_latent_model(X[:3], d=5)


def _latent(skel, rng, d=4, n=30):
    poses = [_random_pose(skel, rng) for _ in range(n)]
    return fit_latent_model(poses, d=d, skeleton=skel)


def _register(scene, V, noise=NoiseConfig()):
    cb = build_codebook(scene.board)
    dets = simulate_frame(scene.template, V, scene.board, scene.cameras, noise)
    return [register_detections(ds, cb, scene.board) for ds in dets]


def test_coarse_fit_recovers_in_span_state(scene, skel):
    rng = np.random.default_rng(4)
    lm = _latent(skel, rng)
    root = np.r_[0.05, -0.03, 0.02, 1.0, -2.0, 0.5]
    z = np.array([0.8, -0.5, 0.3, 0.2])
    V = coarse_mesh(skel, lm, root, z)
    regs = _register(scene, V)
    fit = coarse_fit(regs, scene.cameras, skel, lm, scene.template)
    assert fit.flag == "ok"
    assert fit.rms_px < 0.5
    assert np.abs(fit.mesh - V).max() < 0.1


def test_coarse_fit_without_observations(scene, skel):
    lm = _latent(skel, np.random.default_rng(0))
    empty = RegisteredPixels(scene.cameras[0].id, 0, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    fit = coarse_fit([empty], scene.cameras, skel, lm, scene.template)
    assert fit.flag == NO_DATA
    assert np.array_equal(fit.z, np.zeros(lm.dim))


def test_uv_signal_records_pixel_shift(scene):
    V = scene.frames[0]
    regs = _register(scene, V)
    shifted = [RegisteredPixels(r.camera_id, r.frame, r.pixels + [1.5, -0.5], r.coords, r.confidence, r.det_index)
               for r in regs]
    sig = build_uv_signal(regs, scene.template, scene.cameras, V)
    sig2 = build_uv_signal(shifted, scene.template, scene.cameras, V)
    m = sig.mask
    assert np.array_equal(m, sig2.mask)
    assert np.abs(sig.values[m]).max() < 1e-9
    d = (sig2.values - sig.values)[..., 0::2][m[..., 0::2]]
    assert np.allclose(d, 1.5)


def test_biharmonic_fill_solves_the_system(scene, rng):
    t = scene.template
    known = rng.random(t.n_vertices) < 0.3
    vals = rng.normal(size=(t.n_vertices, 3))
    out = biharmonic_fill(t, known, vals)
    assert np.array_equal(out[known], vals[known])
    B = bilaplacian(t)
    r = (B @ out)[~known]
    assert np.abs(r).max() < 1e-8 * np.abs(B).max()
    # constant offsets are reproduced exactly
    const = biharmonic_fill(t, known, np.ones((t.n_vertices, 3)))
    assert np.allclose(const, 1.0)


def test_drive_moves_visible_vertices_onto_their_rays(scene, skel):
    rng = np.random.default_rng(1)
    lm = _latent(skel, rng)
    V = scene.frames[0]
    regs = _register(scene, V)
    coarse = coarse_mesh(skel, lm, np.zeros(6), np.zeros(lm.dim))
    sig = build_uv_signal(regs, scene.template, scene.cameras, coarse)
    out = drive_baseline(sig, scene.template, coarse, scene.cameras)
    assert out.lifted.mean() > 0.8
    rc = scene.template.board_coords
    for c, cam in enumerate(scene.cameras):
        ok = sig.valid(c)[rc[:, 0], rc[:, 1]]
        obs, _ = cam.project_many(coarse[ok])
        obs = obs + sig.values[rc[ok, 0], rc[ok, 1], 2 * c : 2 * c + 2]
        pix, _ = cam.project_many(out.mesh[ok])
        assert np.abs(pix - obs).max() < 1.0
    e0 = np.linalg.norm(coarse - V, axis=1).mean()
    e1 = np.linalg.norm(out.mesh - V, axis=1).mean()
    assert e1 < e0
