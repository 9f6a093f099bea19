"""Command-line interface: ``patterncloth <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import io
from .align import AlignedSequence, AlignWeights, align_frame, local_frames, temporal_refine
from .board import build_codebook, generate_board, verify_board
from .capture_sim import NoiseConfig, simulate_frame
from .geometry import build_template, cylinder_embedding, lb_eigenbasis, planar_embedding
from .kinematics import (build_skeleton, build_uv_signal, coarse_fit, drive_baseline, fit_latent_model,
                         fit_skeleton)
from .metrics import evaluate_sequence
from .pipeline import (ConfigError, SceneConfig, StageError, parse_block, default_workers, load_config, make_scene,
                       run_pipeline)
from .registration import register_detections
from .triangulate import RansacConfig, triangulate_frame

log = logging.getLogger("patterncloth")


def _frames(directory, ext):
    if not Path(directory).is_dir():
        raise FileNotFoundError(f"{directory}: not a directory of frame_*.{ext} files")
    files = sorted(Path(directory).glob(f"frame_*.{ext}"))
    if not files:
        raise FileNotFoundError(f"{directory}: no frame_*.{ext} files")
    return [(int(p.stem.split("_")[1]), p) for p in files]


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _name(t, ext):
    return f"frame_{t:04d}.{ext}"


def cmd_board_gen(a):
    b = generate_board(a.rows, a.cols, a.colors, seed=a.seed, cell_size_mm=a.cell_size)
    io.save_board(b, a.output)
    print(f"wrote {a.rows}x{a.cols} board with {a.colors} colors to {a.output}")


def cmd_board_verify(a):
    rep = verify_board(io.load_board(a.board))
    print(f"adjacency violations: {len(rep.adjacency_violations)}")
    print(f"duplicate windows: {len(rep.duplicate_windows)}")
    return 0 if rep.ok else 1


def cmd_scene(a):
    sc = make_scene(SceneConfig(kind=a.kind, rows=a.rows, cols=a.cols, n_frames=a.frames, n_cameras=a.cameras), a.seed)
    out = _out(a.output)
    io.save_board(sc.board, out / "board.txt")
    io.save_cameras(sc.cameras, out / "cameras.json")
    io.save_template(sc.template, out / "template.obj")
    _out(out / "meshes")
    for t, f in enumerate(sc.frames):
        io.save_obj(out / "meshes" / _name(t, "obj"), f, sc.template, write_coords=False)
    print(f"wrote {a.kind} scene with {sc.n_frames} frames to {out}")


def cmd_template(a):
    b = io.load_board(a.board)
    emb = planar_embedding(b.rows, b.cols, b.cell_size_mm) if a.radius is None else \
        cylinder_embedding(b.rows, b.cols, b.cell_size_mm, a.radius)
    io.save_template(build_template(b, rest_embedding=emb), a.output)


def cmd_spectra(a):
    tm = io.load_template(a.template)
    basis = lb_eigenbasis(tm.vertices, tm.triangles, a.k)
    io.dump_json({"eigenvalues": basis.eigenvalues}, a.output)


def _noise(path, seed):
    d = io.load_json(path) if path else {}
    d.setdefault("seed", seed)
    try:
        return NoiseConfig(**d)
    except TypeError as exc:
        raise io.MalformedFile(path, str(exc)) from exc


def cmd_sim(a):
    tm = io.load_template(a.template)
    board = io.load_board(a.board)
    cams = io.load_cameras(a.cameras)
    noise = _noise(a.noise, a.seed)
    out = _out(a.output)
    for t, p in _frames(a.mesh_seq, "obj"):
        V, _, _ = io.load_obj(p)
        io.save_detections(simulate_frame(tm, V, board, cams, noise, frame=t), out / _name(t, "txt"))


def cmd_register(a):
    board = io.load_board(a.board)
    cb = build_codebook(board)
    out = _out(a.output)
    for t, p in _frames(a.detections, "txt"):
        sets = io.load_detections(p)
        io.save_registrations([register_detections(ds, cb, board) for ds in sets], out / _name(t, "txt"))


def cmd_triangulate(a):
    cams = io.load_cameras(a.cameras)
    tm = io.load_template(a.template)
    out = _out(a.output)
    for t, p in _frames(a.reg, "txt"):
        cloud = triangulate_frame(io.load_registrations(p), cams, tm.n_vertices, RansacConfig(seed=a.seed), frame=t)
        io.save_cloud(cloud, out / _name(t, "ply"))


def cmd_align(a):
    tm = io.load_template(a.template)
    F = local_frames(tm)
    w = parse_block(AlignWeights, io.load_json(a.weights), "weights") if a.weights else AlignWeights()
    out = _out(a.output)
    results, frames = [], []
    for t, p in _frames(a.clouds, "ply"):
        scan = None
        if a.scan_dir:
            sp_ = Path(a.scan_dir) / _name(t, "obj")
            if sp_.exists():
                scan = io.load_obj(sp_)[0]
        results.append(align_frame(tm, F, io.load_cloud(p), scan=scan, weights=w))
        frames.append(t)
    meshes = [r.mesh for r in results]
    if a.refine_passes:
        seq = temporal_refine(tm, F, AlignedSequence([r.state for r in results], meshes, [r.detected for r in results]),
                              w, passes=a.refine_passes)
        meshes = seq.meshes
    for t, r, m in zip(frames, results, meshes):
        io.save_obj(out / _name(t, "obj"), m, tm, write_coords=False)
        io.dump_json({"stage_log": r.log, "pruned": int(r.pruned.sum()), "detected": int(r.detected.sum())},
                     out / _name(t, "json"))


def cmd_kinematics(a):
    tm = io.load_template(a.template)
    sk = build_skeleton(tm, a.spacing)
    poses = [fit_skeleton(io.load_obj(p)[0], sk).pose for _, p in _frames(a.meshes, "obj")]
    latent = fit_latent_model(poses, min(a.dim, sk.n_params), skeleton=sk)
    out = _out(a.output)
    io.save_skeleton(sk, out / "skeleton.json")
    io.save_latent(latent, out / "latent.bin")
    print(f"{sk.n_nodes} nodes, {sk.n_params} pose parameters, latent dimension {latent.dim}")


def cmd_drive(a):
    tm = io.load_template(a.template)
    cams = io.load_cameras(a.cameras)
    sk = io.load_skeleton(a.skeleton, tm)
    latent = io.load_latent(a.latent)
    ids = {c.id for c in cams}
    out = _out(a.output)
    for t, p in _frames(a.reg, "txt"):
        regs = [r for r in io.load_registrations(p) if r.camera_id in ids]
        cf = coarse_fit(regs, cams, sk, latent, tm)
        sig = build_uv_signal(regs, tm, cams, cf.mesh, t)
        dv = drive_baseline(sig, tm, cf.mesh, cams)
        io.save_obj(out / _name(t, "obj"), dv.mesh, tm, write_coords=False)
        io.save_uv_signal(sig, out / _name(t, "uv"))
        io.dump_json({"root": cf.root, "z": cf.z, "rms_px": cf.rms_px, "flag": cf.flag}, out / _name(t, "json"))


def cmd_metrics(a):
    tm = io.load_template(a.template)
    est = {t: io.load_obj(p)[0] for t, p in _frames(a.aligned, "obj")}
    gt = {t: io.load_obj(p)[0] for t, p in _frames(a.gt, "obj")}
    keys = sorted(set(est) & set(gt))
    clouds = None
    if a.clouds:
        cl = {t: io.load_cloud(p) for t, p in _frames(a.clouds, "ply")}
        clouds = [cl[t] for t in keys] if all(t in cl for t in keys) else None
    rep = evaluate_sequence([est[t] for t in keys], [gt[t] for t in keys], tm, a.fps, clouds, a.n_pairs, a.seed)
    io.dump_json(rep.as_dict(), a.report)
    print(json.dumps(io.round9(rep.aggregate()), sort_keys=True))


def cmd_pipeline_run(a):
    cfg = load_config(a.config)
    if a.seed is not None:
        cfg = dataclasses.replace(cfg, seed=a.seed)
    res = run_pipeline(cfg, a.output, workers=a.workers)
    print(f"artifacts: {len(res.manifest['artifacts'])} files in {res.output}")
    return res.status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patterncloth", description="Patterned-cloth capture and registration toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: PATTERNCLOTH_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    board = sub.add_parser("board", help="generate or verify a pattern board")
    bsub = board.add_subparsers(dest="board_command", required=True)
    g = bsub.add_parser("gen")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--colors", type=int, default=7)
    g.add_argument("--cell-size", type=float, default=2.7)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_board_gen)
    v = bsub.add_parser("verify")
    v.add_argument("board")
    v.set_defaults(func=cmd_board_verify)

    s = sub.add_parser("scene", help="write a built-in synthetic scene")
    s.add_argument("--kind", choices=["sheet", "tube"], default="sheet")
    s.add_argument("--rows", type=int, default=40)
    s.add_argument("--cols", type=int, default=40)
    s.add_argument("--frames", type=int, default=6)
    s.add_argument("--cameras", type=int, default=8)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_scene)

    t = sub.add_parser("template", help="triangulate a board into a template mesh")
    t.add_argument("--board", required=True)
    t.add_argument("--radius", type=float, default=None, help="wrap onto a cylinder of this radius (mm)")
    t.add_argument("-o", "--output", required=True)
    t.set_defaults(func=cmd_template)

    sp = sub.add_parser("spectra", help="Laplace-Beltrami eigenvalues of a template")
    sp.add_argument("--template", required=True)
    sp.add_argument("--k", type=int, default=64)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_spectra)

    m = sub.add_parser("sim", help="simulate detections for a mesh sequence")
    m.add_argument("--mesh-seq", required=True)
    m.add_argument("--template", required=True)
    m.add_argument("--board", required=True)
    m.add_argument("--cameras", required=True)
    m.add_argument("--noise", default=None)
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_sim)

    r = sub.add_parser("register", help="register detections to board coordinates")
    r.add_argument("--detections", required=True)
    r.add_argument("--board", required=True)
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_register)

    tr = sub.add_parser("triangulate", help="triangulate registered pixels")
    tr.add_argument("--reg", required=True)
    tr.add_argument("--cameras", required=True)
    tr.add_argument("--template", required=True)
    tr.add_argument("-o", "--output", required=True)
    tr.set_defaults(func=cmd_triangulate)

    al = sub.add_parser("align", help="align the template to triangulated clouds")
    al.add_argument("--template", required=True)
    al.add_argument("--clouds", required=True)
    al.add_argument("--scan-dir", default=None)
    al.add_argument("--weights", default=None)
    al.add_argument("--refine-passes", type=int, default=0)
    al.add_argument("-o", "--output", required=True)
    al.set_defaults(func=cmd_align)

    k = sub.add_parser("kinematics", help="fit skeleton and latent prior to aligned meshes")
    k.add_argument("--template", required=True)
    k.add_argument("--meshes", required=True)
    k.add_argument("--spacing", type=int, default=10)
    k.add_argument("--dim", type=int, default=32)
    k.add_argument("-o", "--output", required=True)
    k.set_defaults(func=cmd_kinematics)

    d = sub.add_parser("drive", help="drive the garment from sparse-view registrations")
    d.add_argument("--reg", required=True)
    d.add_argument("--cameras", required=True)
    d.add_argument("--skeleton", required=True)
    d.add_argument("--latent", required=True)
    d.add_argument("--template", required=True)
    d.add_argument("-o", "--output", required=True)
    d.set_defaults(func=cmd_drive)

    me = sub.add_parser("metrics", help="evaluate meshes against ground truth")
    me.add_argument("--aligned", required=True)
    me.add_argument("--gt", required=True)
    me.add_argument("--template", required=True)
    me.add_argument("--clouds", default=None)
    me.add_argument("--fps", type=float, default=30.0)
    me.add_argument("--n-pairs", type=int, default=1000)
    me.add_argument("--report", required=True)
    me.set_defaults(func=cmd_metrics)

    pl = sub.add_parser("pipeline", help="run a configured end-to-end pipeline")
    psub = pl.add_subparsers(dest="pipeline_command", required=True)
    run = psub.add_parser("run")
    run.add_argument("--config", required=True)
    run.add_argument("-o", "--output", default=None)
    run.set_defaults(func=cmd_pipeline_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if a.seed is None and a.command != "pipeline":
        a.seed = 0
    if a.workers is None:
        a.workers = default_workers()
    try:
        rc = a.func(a)
    except (ConfigError, io.MalformedFile, StageError, FileNotFoundError) as exc:
        print(f"patterncloth: error: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
