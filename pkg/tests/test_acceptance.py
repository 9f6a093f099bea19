"""Acceptance checks, one test and one PASS/FAIL line per criterion.

The shared tube benchmark (60 frames, 8 ring cameras, the standard noise
level) is simulated once per session and reused by criteria 2 to 6.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from patterncloth.align import (
    AlignedSequence, acceleration, align_frame, arap_init, deform, e_dist, freeze, local_frames, rigid_state,
    temporal_refine,
)
from patterncloth.board import build_codebook, generate_board, verify_board
from patterncloth.capture_sim import NoiseConfig, simulate_frame, visibility_masks
from patterncloth.geometry import build_template, cylinder_embedding, vertex_normals
from patterncloth.kinematics import (
    build_skeleton, build_uv_signal, coarse_fit, coarse_mesh, drive_baseline, fit_latent_model, fit_skeleton,
)
from patterncloth.metrics import chamfer, correspondence_drift, geodesic_distortion, mean_euclidean
from patterncloth.pipeline import config_from_dict, run_pipeline
from patterncloth.registration import register_detections, registration_stats
from patterncloth.rotations import exp_so3
from patterncloth.scenes import opposing_cameras, tube_scene
from patterncloth.triangulate import backproject_many, ray_distances, triangulate_frame

from conftest import BENCH_NOISE
from support import energy_gradient_errors

pytestmark = pytest.mark.slow

N_FRAMES = 60
ORACLE_STRIDE = 4


def report(capsys, number: int, ok: bool, detail: str):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture(scope="module")
def tube():
    return tube_scene(n_frames=N_FRAMES, seed=0)


@pytest.fixture(scope="module")
def bench(tube):
    """Per-frame detections, registrations and clouds under the standard noise."""
    sc = tube
    cb = build_codebook(sc.board)
    out = {"regs": [], "clouds": [], "stats": [], "n_det": 0, "reg_time": 0.0}
    for t in range(sc.n_frames):
        dets = simulate_frame(sc.template, sc.frames[t], sc.board, sc.cameras, BENCH_NOISE, frame=t)
        out["n_det"] += sum(len(ds) for ds in dets)
        t0 = time.perf_counter()
        regs = [register_detections(ds, cb, sc.board) for ds in dets]
        out["reg_time"] += time.perf_counter() - t0
        out["stats"].append([registration_stats(r, ds) for r, ds in zip(regs, dets)])
        out["regs"].append(regs)
        out["clouds"].append(triangulate_frame(regs, sc.cameras, sc.template.n_vertices, frame=t))
    return out


# ------------------------------------------------------------------------------ 1


def test_criterion_1_large_board(capsys):
    t0 = time.perf_counter()
    board = generate_board(300, 900, 7, seed=0)
    rep = verify_board(board)
    dt = time.perf_counter() - t0
    n_windows = (board.rows - 2) * (board.cols - 2)
    ok = rep.ok and n_windows == 267_604 and dt < 300
    report(capsys, 1, ok, f"{n_windows} windows, {len(rep.duplicate_windows)} duplicates, "
           f"{len(rep.adjacency_violations)} adjacency violations, {dt:.1f} s (limit 300 s)")
    assert ok


# ------------------------------------------------------------------------------ 2


def test_criterion_2_registration(capsys, tube, bench):
    recalls = []
    wrong_full = 0
    for frame_stats in bench["stats"]:
        gt = sum(s.n_gt_centers for s in frame_stats)
        correct = sum(s.n_correct for s in frame_stats)
        recalls.append(correct / gt)
        wrong_full += sum(s.n_wrong_full_conf for s in frame_stats)
    per_100k = bench["reg_time"] / bench["n_det"] * 1e5
    ok = tube.n_frames >= 60 and len(tube.cameras) == 8 and min(recalls) >= 0.95 and wrong_full == 0 and per_100k < 120
    report(capsys, 2, ok, f"{tube.n_frames} frames x {len(tube.cameras)} cameras, min per-frame recall "
           f"{min(recalls):.4f} (mean {np.mean(recalls):.4f}, limit 0.95), {wrong_full} wrong at confidence 1.0, "
           f"{per_100k:.1f} s per 100k detections ({bench['n_det']} detections)")
    assert ok


# ------------------------------------------------------------------------------ 3


def _inlier_counts(cloud, regs, cameras, radius=1.0):
    """Recount, per accepted point, distinct cameras whose ray passes within ``radius``."""
    cam_by_id = {c.id: c for c in cameras}
    rays = {}
    for reg in regs:
        if len(reg) == 0:
            continue
        o, d = backproject_many(cam_by_id[reg.camera_id], reg.pixels)
        for c, oo, dd in zip(map(tuple, reg.coords.tolist()), o, d):
            rays.setdefault(c, []).append((reg.camera_id, oo, dd))
    counts = []
    for c, p in zip(map(tuple, cloud.coords.tolist()), cloud.positions):
        cams = set()
        for cid, o, d in rays.get(c, []):
            if ray_distances(p, o[None], d[None])[0] <= radius:
                cams.add(cid)
        counts.append(len(cams))
    return np.array(counts)


def test_criterion_3_triangulation(capsys, tube, bench):
    idx = tube.template.coord_index()
    errs, min_inl, min_reported = [], np.inf, np.inf
    for t, (cloud, regs) in enumerate(zip(bench["clouds"], bench["regs"])):
        gt = tube.frames[t][[idx[tuple(c)] for c in cloud.coords]]
        errs.append(np.linalg.norm(cloud.positions - gt, axis=1))
        min_reported = min(min_reported, cloud.inliers.min())
        min_inl = min(min_inl, _inlier_counts(cloud, regs, tube.cameras).min())
    errs = np.concatenate(errs)
    med = float(np.median(errs))
    ok = min_inl >= 3 and min_reported >= 3 and med <= 1.0
    report(capsys, 3, ok, f"{len(errs)} points, min distinct-camera inliers within 1 mm {min_inl} (reported "
           f"{min_reported}), median 3D error {med:.3f} mm (limit 1 mm), p95 {np.percentile(errs, 95):.3f} mm")
    assert ok


# ------------------------------------------------------------------------------ 4


def test_criterion_4_coverage(capsys, tube):
    # the oracle comparison runs on noise-free detections: with the standard
    # noise, dropout and registration misses lower coverage below what is visible
    sc = tube
    cb = build_codebook(sc.board)
    clean = NoiseConfig(seed=BENCH_NOISE.seed)
    cov, oracle = [], []
    for t in range(0, sc.n_frames, ORACLE_STRIDE):
        dets = simulate_frame(sc.template, sc.frames[t], sc.board, sc.cameras, clean, frame=t)
        regs = [register_detections(ds, cb, sc.board) for ds in dets]
        cov.append(triangulate_frame(regs, sc.cameras, sc.template.n_vertices, frame=t).coverage)
        oracle.append(float((visibility_masks(sc.template, sc.frames[t], sc.cameras, clean).sum(0) >= 3).mean()))
    cov, oracle = np.array(cov), np.array(oracle)
    gap = float(np.abs(cov - oracle).max())
    ok = cov.min() >= 0.5 and cov.max() <= 0.95 and gap <= 0.01
    report(capsys, 4, ok, f"noise-free coverage {cov.min():.3f}..{cov.max():.3f} (mean {cov.mean():.3f}), "
           f"max |coverage - oracle| {gap:.4f} (limit 0.01) over {len(cov)} frames")
    assert ok


def test_criterion_4_noisy_band(capsys, bench):
    cov = np.array([c.coverage for c in bench["clouds"]])
    ok = cov.min() >= 0.5 and cov.max() <= 0.95
    report(capsys, 4, ok, f"noisy coverage band {cov.min():.3f}..{cov.max():.3f} (mean {cov.mean():.3f}) "
           f"over {len(cov)} frames")
    assert ok


# ------------------------------------------------------------------------------ 5


def test_criterion_5_alignment(capsys, tube, bench):
    sc = tube
    tm = sc.template
    F = local_frames(tm)
    s = tm.cell_size_mm
    lines, ok = [], True
    for t in (0, 30):
        cloud = bench["clouds"][t]
        res = align_frame(tm, F, cloud)
        idx = tm.coord_index()
        pts = np.array([idx[tuple(c)] for c in cloud.coords])
        det = res.detected
        frozen = np.array_equal(res.mesh[pts[det[pts]]], cloud.positions[det[pts]])
        err = np.linalg.norm(res.mesh - sc.frames[t], axis=1)
        nd = float(err[~det].mean())
        ok &= frozen and nd <= 2 * s
        lines.append(f"frame {t} coverage {cloud.coverage:.3f}: detected frozen {frozen}, "
                     f"non-detected mean error {nd:.3f} mm")
    # gradients on a small template: finite differences over every unknown
    small = build_template(generate_board(8, 9, seed=2))
    grads = energy_gradient_errors(small, local_frames(small), seed=0)
    worst = max(grads.values())
    R = exp_so3(np.array([0.4, -0.7, 1.1]))
    st = rigid_state(F, R, np.array([12.0, -3.0, 40.0]))
    e_rigid = e_dist(st, F, tm.edges)[0]
    ok &= worst <= 1e-5 and e_rigid <= 1e-9
    report(capsys, 5, ok, "; ".join(lines) + f" (limit {2 * s:.1f} mm); worst gradient relative error "
           f"{worst:.1e} (limit 1e-5); E_Dist on a rigid state {e_rigid:.1e} (limit 1e-9)")
    assert ok


# ------------------------------------------------------------------------------ 6


def test_criterion_6_temporal_refinement(capsys, tube, bench):
    sc = tube
    tm = sc.template
    F = local_frames(tm)
    frames = range(10, 15)
    det = []
    meshes = []
    idx = tm.coord_index()
    rng = np.random.default_rng(6)
    for t in frames:
        m = np.zeros(tm.n_vertices, bool)
        m[[idx[tuple(c)] for c in bench["clouds"][t].coords]] = True
        det.append(m)
        meshes.append(sc.frames[t].copy())
    # perturb free vertices of the middle frame along the normal, with per-vertex noise elsewhere
    n = vertex_normals(meshes[2], tm.triangles)
    meshes[2][~det[2]] += 3.0 * n[~det[2]]
    for k in range(len(meshes)):
        meshes[k][~det[k]] += rng.normal(0, 0.3, ((~det[k]).sum(), 3))
    states = [freeze(F, arap_init(tm, F, m), m, d) for m, d in zip(meshes, det)]
    seq = AlignedSequence(states, [deform(F, s) for s in states], det)
    acc = [acceleration(seq.meshes, det)]
    cur = seq
    bitwise = True
    for _ in range(3):
        cur = temporal_refine(tm, F, cur, passes=1)
        acc.append(acceleration(cur.meshes, det))
        bitwise &= all(np.array_equal(cur.meshes[k][det[k]], seq.meshes[k][det[k]]) for k in range(len(det)))
    mono = all(b < a for a, b in zip(acc, acc[1:]))
    ok = mono and bitwise
    report(capsys, 6, ok, "mean acceleration " + " -> ".join(f"{a:.4f}" for a in acc)
           + f" mm, detected bitwise unchanged {bitwise}")
    assert ok


# ------------------------------------------------------------------------------ 7

TRAIN = range(0, 60)
TEST = range(60, 90, 3)


def _drive_experiment(sc, spacing, cams, cb, d=32):
    sk = build_skeleton(sc.template, spacing)
    fits = [fit_skeleton(sc.frames[t], sk) for t in TRAIN]
    lm = fit_latent_model([f.pose for f in fits], min(d, sk.n_params, len(fits)), skeleton=sk)
    rows = []
    for t in TEST:
        dets = simulate_frame(sc.template, sc.frames[t], sc.board, cams, BENCH_NOISE, frame=t)
        regs = [register_detections(ds, cb, sc.board) for ds in dets]
        cf = coarse_fit(regs, cams, sk, lm, sc.template)
        sig = build_uv_signal(regs, sc.template, cams, cf.mesh, t)
        out = drive_baseline(sig, sc.template, cf.mesh, cams)
        gt = sc.frames[t]
        reproj = 0.0
        rc = sc.template.board_coords
        for c, cam in enumerate(sorted(cams, key=lambda c: c.id)):
            ok = sig.valid(c)[rc[:, 0], rc[:, 1]]
            if ok.any():
                obs, _ = cam.project_many(cf.mesh[ok])
                obs = obs + sig.values[rc[ok, 0], rc[ok, 1], 2 * c : 2 * c + 2]
                pix, _ = cam.project_many(out.mesh[ok])
                reproj = max(reproj, float(np.linalg.norm(pix - obs, axis=1).max()))
        rows.append(dict(coarse=mean_euclidean(cf.mesh, gt), driven=mean_euclidean(out.mesh, gt),
                         chamfer=chamfer(out.mesh, gt), reproj=reproj, rms=cf.rms_px))
    return sk, lm, rows


@pytest.fixture(scope="module")
def long_tube():
    return tube_scene(n_frames=90, seed=0)


def test_criterion_7_coarse_fit_and_driving(capsys, long_tube):
    sc = long_tube
    cams = opposing_cameras(sc)
    cb = build_codebook(sc.board)
    sk, lm, full = _drive_experiment(sc, 8, cams, cb)
    # in-span states: skinned latent decodes under a random root motion
    rng = np.random.default_rng(7)
    in_span = []
    for k in range(3):
        z = rng.normal(0, 1, lm.dim)
        root = np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 2, 3)]
        V = coarse_mesh(sk, lm, root, z)
        dets = simulate_frame(sc.template, V, sc.board, cams, BENCH_NOISE, frame=1000 + k)
        regs = [register_detections(ds, cb, sc.board) for ds in dets]
        in_span.append(coarse_fit(regs, cams, sk, lm, sc.template).rms_px)
    _, _, lbs = _drive_experiment(sc, 32, cams, cb)
    improved = np.mean([r["driven"] < r["coarse"] for r in full])
    reproj = max(r["reproj"] for r in full)
    e_full = np.mean([r["driven"] for r in full])
    e_lbs = np.mean([r["driven"] for r in lbs])
    c_full = np.mean([r["chamfer"] for r in full])
    c_lbs = np.mean([r["chamfer"] for r in lbs])
    ok = max(in_span) < 2.0 and improved >= 0.9 and reproj <= 1.0 and e_full < e_lbs and c_full < c_lbs
    report(capsys, 7, ok, f"in-span coarse rms {max(in_span):.3f} px (limit 2), driving improves "
           f"{improved:.0%} of {len(full)} frames (limit 90%), coarse {np.mean([r['coarse'] for r in full]):.3f} -> "
           f"driven {e_full:.3f} mm, visible reprojection max {reproj:.2e} px (limit 1); "
           f"{sk.n_nodes}-node model {e_full:.3f} mm / {c_full:.3f} mm vs few-node variant "
           f"{e_lbs:.3f} mm / {c_lbs:.3f} mm (Euclidean / Chamfer)")
    assert ok


# ------------------------------------------------------------------------------ 8


def test_criterion_8_metrics(capsys):
    rows, cols = 40, 40
    flat = build_template(generate_board(rows, cols, seed=0))
    V = flat.vertices
    tri = flat.triangles
    R = exp_so3(np.array([0.3, 0.2, -0.5]))
    moved = V @ R.T + [10.0, -20.0, 5.0]
    g_rigid, scale = geodesic_distortion(moved, V, tri, return_scale=True)
    bent = cylinder_embedding(rows, cols, flat.cell_size_mm, 30.0).reshape(-1, 3)
    g_bend, scale_b = geodesic_distortion(bent, V, tri, return_scale=True)
    # constructed drift on the bent sheet: a known fraction of points slides along the
    # cylinder axis (a surface tangent) by a known amount, and every point also sits
    # off the surface along its normal, which must not count
    T, fps, slide = 30, 30.0, 0.2
    rng = np.random.default_rng(0)
    gt = np.repeat(bent[None], T, axis=0)
    tracked = gt + 0.5 * vertex_normals(bent, tri)[None]
    sel = rng.random(len(V)) < 0.25
    axis = 2  # the cylinder axis runs along z
    tracked[:, sel, axis] += slide
    expected = sel.mean() * slide * fps
    drift = correspondence_drift(tracked, gt, tri, fps)
    drift_err = abs(drift - expected) / expected
    # rigid invariance of every metric
    B = bent + rng.normal(0, 0.3, bent.shape)
    rel = []
    for f in (chamfer, mean_euclidean, lambda a, b: geodesic_distortion(a, b, tri, 300)):
        a0, a1 = f(bent, B), f(bent @ R.T + 7, B @ R.T + 7)
        rel.append(abs(a0 - a1) / a0)
    d0 = correspondence_drift(tracked, gt, tri, fps)
    d1 = correspondence_drift(tracked @ R.T + 7, gt @ R.T + 7, tri, fps)
    rel.append(abs(d0 - d1) / d0)
    ok = g_rigid <= 1e-9 * scale and g_bend < 0.02 * scale_b and drift_err <= 0.1 and max(rel) <= 1e-9
    report(capsys, 8, ok, f"rigid distortion {g_rigid:.1e} mm, developable bend {g_bend / scale_b:.3%} of mean "
           f"pair distance (limit 2%), drift {drift:.3f} vs constructed {expected:.3f} mm/s "
           f"({drift_err:.1%}, limit 10%), worst rigid-invariance relative change {max(rel):.1e} (limit 1e-9)")
    assert ok


# ------------------------------------------------------------------------------ 9


def test_criterion_9_determinism(capsys, tmp_path):
    cfg = config_from_dict({
        "scene": {"rows": 20, "cols": 20, "n_frames": 4},
        "stages": {"refine": True, "drive": True},
        "drive": {"cameras": [0, 3], "spacing": 6, "latent_dim": 3},
        "seed": 5,
    })
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    manifest_a = (tmp_path / "a" / "manifest.json").read_bytes()
    manifest_b = (tmp_path / "b" / "manifest.json").read_bytes()
    same_tree = all((tmp_path / "a" / k).read_bytes() == (tmp_path / "b" / k).read_bytes() for k in a.manifest["artifacts"])
    ok = manifest_a == manifest_b and a.manifest["artifacts"] == b.manifest["artifacts"] and same_tree
    report(capsys, 9, ok, f"{len(a.manifest['artifacts'])} artifacts, manifests byte-identical "
           f"{manifest_a == manifest_b}, trees identical {same_tree}")
    assert ok
