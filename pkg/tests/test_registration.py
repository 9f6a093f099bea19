from __future__ import annotations

import numpy as np
import pytest

from patterncloth.board import build_codebook
from patterncloth.capture_sim import CENTER, NoiseConfig, simulate_frame, simulate_view
from patterncloth.registration import (
    RegistrationConfig, build_grid_graph, build_hetero_graph, register_detections, registration_stats,
)
from patterncloth.scenes import sheet_scene

from conftest import BENCH_NOISE


@pytest.fixture(scope="module")
def scene():
    return sheet_scene(rows=24, cols=24, n_frames=2, seed=6)


@pytest.fixture(scope="module")
def codebook(scene):
    return build_codebook(scene.board)


def _run(scene, codebook, noise, t=0):
    dets = simulate_frame(scene.template, scene.frames[t], scene.board, scene.cameras, noise, frame=t)
    return [(ds, register_detections(ds, codebook, scene.board)) for ds in dets]


def test_zero_noise_registers_every_center_correctly(scene, codebook):
    for ds, reg in _run(scene, codebook, NoiseConfig()):
        st = registration_stats(reg, ds)
        assert st.n_wrong == 0
        assert st.recall >= 0.99
        assert np.all(reg.confidence > 0)


def test_noisy_registration_has_no_confident_errors(scene, codebook):
    for ds, reg in _run(scene, codebook, BENCH_NOISE, t=1):
        st = registration_stats(reg, ds)
        assert st.n_wrong_full_conf == 0
        assert st.recall >= 0.95


def test_one_cell_per_registration(scene, codebook):
    for ds, reg in _run(scene, codebook, BENCH_NOISE):
        keys = {tuple(c) for c in reg.coords}
        assert len(keys) == len(reg)


def test_color_errors_never_reach_full_confidence(scene, codebook):
    # wrong colors produce wrong decodes; voting must reject or downgrade them
    noise = NoiseConfig(color_error_rate=0.05, seed=11)
    for ds, reg in _run(scene, codebook, noise):
        st = registration_stats(reg, ds)
        assert st.n_wrong_full_conf == 0


def test_hetero_graph_links_centers_to_four_corners(scene):
    ds = simulate_view(scene.template, scene.frames[0], scene.board, scene.cameras[0], 0, 0, NoiseConfig())
    hg = build_hetero_graph(ds, RegistrationConfig())
    deg = hg.corner_degree()
    assert np.median(deg) == 4
    grid = build_grid_graph(hg, RegistrationConfig())
    # lattice steps between real neighbors point to board neighbors
    edges = grid.edge_list()
    g = ds.gt[hg.centers]
    d = np.abs(g[edges[:, 0]] - g[edges[:, 1]]).sum(axis=1)
    assert (d == 1).mean() > 0.99


def test_empty_detection_set(scene, codebook):
    ds = simulate_view(scene.template, scene.frames[0], scene.board, scene.cameras[0], 0, 0, NoiseConfig())
    empty = ds.subset(np.zeros(len(ds), bool))
    reg = register_detections(empty, codebook, scene.board)
    assert len(reg) == 0


def test_outliers_only_yield_nothing(scene, codebook):
    ds = simulate_view(scene.template, scene.frames[0], scene.board, scene.cameras[0], 0, 0,
                       NoiseConfig(outlier_rate=0.5, seed=2))
    junk = ds.subset(ds.gt[:, 0] < 0)
    reg = register_detections(junk, codebook, scene.board)
    assert np.all(reg.confidence < 1.0) or len(reg) == 0


def test_registration_independent_of_detection_order(scene, codebook):
    ds = simulate_view(scene.template, scene.frames[0], scene.board, scene.cameras[1], 1, 0, BENCH_NOISE)
    perm = np.random.default_rng(0).permutation(len(ds))
    a = register_detections(ds, codebook, scene.board)
    b = register_detections(ds.subset(perm), codebook, scene.board)
    ka = {tuple(p.round(9)): tuple(c) for p, c in zip(a.pixels, a.coords)}
    kb = {tuple(p.round(9)): tuple(c) for p, c in zip(b.pixels, b.coords)}
    common = set(ka) & set(kb)
    assert len(common) >= 0.98 * max(len(ka), len(kb))
    assert all(ka[k] == kb[k] for k in common)


def _strip(ds, r0, c0, rows, cols):
    # keep the centers of a rows x cols block of cells and their corners
    g = ds.gt
    is_c = ds.kinds == CENTER
    inside = np.where(
        is_c,
        (g[:, 0] >= r0) & (g[:, 0] < r0 + rows) & (g[:, 1] >= c0) & (g[:, 1] < c0 + cols),
        (g[:, 0] >= r0) & (g[:, 0] <= r0 + rows) & (g[:, 1] >= c0) & (g[:, 1] <= c0 + cols),
    )
    return ds.subset(np.flatnonzero(inside))


def test_thin_strip_is_placed_by_component_matching(scene, codebook):
    # no 3x3 window fits a two-cell-wide strip, so only whole-strip matching can place it
    ds = simulate_frame(scene.template, scene.frames[0], scene.board, scene.cameras, NoiseConfig(), frame=0)[0]
    strip = _strip(ds, 6, 8, 9, 2)
    reg = register_detections(strip, codebook, scene.board)
    st = registration_stats(reg, strip)
    assert st.n_gt_centers == 18
    assert st.n_correct == 18 and st.n_wrong == 0
    assert np.all(reg.confidence < 1.0)
    # a strip short enough to fit by chance elsewhere is refused
    short = _strip(ds, 6, 8, 3, 2)
    assert len(register_detections(short, codebook, scene.board)) == 0
