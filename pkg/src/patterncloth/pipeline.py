"""End-to-end orchestration with strict configuration and a content-hash manifest.

Data preparation: simulate -> register -> triangulate -> align (-> refine) -> metrics.
Driving: fit skeleton and latent prior on aligned frames, then per frame
coarse_fit -> build_uv_signal -> drive_baseline -> metrics.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import io
from .align import AlignedSequence, AlignWeights, align_frame, local_frames, temporal_refine
from .board import build_codebook
from .capture_sim import NoiseConfig, simulate_frame
from .kinematics import build_skeleton, build_uv_signal, coarse_fit, drive_baseline, fit_latent_model, fit_skeleton
from .metrics import chamfer, coverage, evaluate_sequence, mean_euclidean
from .registration import RegistrationConfig, register_detections
from .scenes import Scene, TubeParams, sheet_scene, tube_scene
from .triangulate import RansacConfig, triangulate_frame

log = logging.getLogger(__name__)

VERSION = "0.1.0"
WORKERS_ENV = "PATTERNCLOTH_WORKERS"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


# ------------------------------------------------------------------------ config


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "sheet"
    rows: int = 40
    cols: int = 40
    n_frames: int = 6
    n_cameras: int = 8
    amplitude_mm: float = 4.0


@dataclass(frozen=True)
class PathsConfig:
    board: str | None = None
    cameras: str | None = None
    template: str | None = None
    detections: str | None = None
    output: str = "run"


@dataclass(frozen=True)
class StagesConfig:
    simulate: bool = True
    register: bool = True
    triangulate: bool = True
    align: bool = True
    refine: bool = False
    drive: bool = False
    metrics: bool = True


@dataclass(frozen=True)
class NoiseBlock:
    pixel_jitter_sigma: float = 0.3
    dropout_rate: float = 0.05
    outlier_rate: float = 0.02
    color_ambiguity_rate: float = 0.02
    color_error_rate: float = 0.0
    max_incidence_deg: float = 70.0


@dataclass(frozen=True)
class RefineBlock:
    passes: int = 3


@dataclass(frozen=True)
class DriveBlock:
    cameras: tuple = (0, 4)
    spacing: int = 10
    latent_dim: int = 4
    train_frames: int | None = None
    lam: float = 1e-5


@dataclass(frozen=True)
class MetricsBlock:
    n_pairs: int = 1000


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    align: AlignWeights = field(default_factory=AlignWeights)
    refine: RefineBlock = field(default_factory=RefineBlock)
    drive: DriveBlock = field(default_factory=DriveBlock)
    metrics: MetricsBlock = field(default_factory=MetricsBlock)
    seed: int = 0
    workers: int | None = None


def parse_block(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kw[name] = parse_block(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict, base_dir: str | Path | None = None) -> PipelineConfig:
    """Strictly parse a configuration; relative paths resolve against ``base_dir``."""
    cfg = parse_block(PipelineConfig, data, "config")
    if cfg.scene.kind not in ("sheet", "tube"):
        raise ConfigError(f"config.scene.kind: unknown scene {cfg.scene.kind!r}")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    paths = {}
    for f in dataclasses.fields(PathsConfig):
        v = getattr(cfg.paths, f.name)
        if v is None:
            paths[f.name] = None
            continue
        p = Path(v)
        p = p if p.is_absolute() else base / p
        if f.name != "output" and not p.exists():
            raise ConfigError(f"config.paths.{f.name}: file not found: {p}")
        paths[f.name] = str(p)
    return dataclasses.replace(cfg, paths=PathsConfig(**paths))


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise io.MalformedFile(path, exc.msg, exc.lineno) from exc
    return config_from_dict(data, path.parent)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def stage_seed(seed: int, label: str) -> int:
    """Per-stage seed from the global seed by labeled hashing."""
    h = hashlib.sha256(f"patterncloth:{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------------- runs


def make_scene(cfg: SceneConfig, seed: int) -> Scene:
    if cfg.kind == "sheet":
        return sheet_scene(cfg.rows, cfg.cols, cfg.n_frames, seed=seed, amplitude_mm=cfg.amplitude_mm,
                           n_cameras=cfg.n_cameras)
    p = TubeParams(rows=cfg.rows, cols=cfg.cols)
    return tube_scene(cfg.n_frames, seed=seed, params=p, n_cameras=cfg.n_cameras)


def _frame_name(t: int, ext: str) -> str:
    return f"frame_{t:04d}.{ext}"


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# module-level task functions so process pools can pickle them
def _simulate_task(args):
    template, frame, board, cameras, noise, t = args
    return simulate_frame(template, frame, board, cameras, noise, frame=t)


def _register_task(args):
    sets, codebook, board, rcfg = args
    return [register_detections(ds, codebook, board, rcfg) for ds in sets]


def _triangulate_task(args):
    regs, cameras, n_active, rcfg, t = args
    return triangulate_frame(regs, cameras, n_active, rcfg, frame=t)


def _align_task(args):
    template, frames, cloud, weights = args
    return align_frame(template, frames, cloud, weights=weights)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunResult:
    status: int
    output: Path
    manifest: dict
    report: dict | None = None


def run_pipeline(cfg: PipelineConfig, output: str | Path | None = None, workers: int | None = None) -> RunResult:
    out = Path(output or cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or cfg.workers or default_workers()
    seeds = {label: stage_seed(cfg.seed, label) for label in ("scene", "noise", "ransac")}
    stages = cfg.stages
    report: dict = {}
    stage = "scene"
    try:
        scene = make_scene(cfg.scene, seeds["scene"] % (2**31))
        board, template, cameras = scene.board, scene.template, scene.cameras
        if cfg.paths.board:
            board = io.load_board(cfg.paths.board)
        if cfg.paths.cameras:
            cameras = io.load_cameras(cfg.paths.cameras)
        if cfg.paths.template:
            template = io.load_template(cfg.paths.template)
            if template.n_vertices != scene.template.n_vertices:
                raise ValueError("template does not match the scene's vertex count")
        io.save_board(board, out / "board.txt")
        io.save_cameras(cameras, out / "cameras.json")
        io.save_template(template, out / "template.obj")
        (out / "gt").mkdir(exist_ok=True)
        for t, f in enumerate(scene.frames):
            io.save_obj(out / "gt" / _frame_name(t, "obj"), f, template, write_coords=False)
        T = scene.n_frames

        stage = "simulate"
        dets = None
        if cfg.paths.detections:
            dets_all = io.load_detections(cfg.paths.detections)
            dets = [[d for d in dets_all if d.frame == t] for t in range(T)]
        elif stages.simulate:
            nb = cfg.noise
            noise = NoiseConfig(nb.pixel_jitter_sigma, nb.dropout_rate, nb.outlier_rate, nb.color_ambiguity_rate,
                                nb.color_error_rate, seeds["noise"], nb.max_incidence_deg)
            dets = _map(_simulate_task, [(template, scene.frames[t], board, cameras, noise, t) for t in range(T)], workers)
        if dets is not None:
            (out / "detections").mkdir(exist_ok=True)
            for t, sets in enumerate(dets):
                io.save_detections(sets, out / "detections" / _frame_name(t, "txt"))

        stage = "register"
        regs = None
        if stages.register and dets is not None:
            codebook = build_codebook(board)
            regs = _map(_register_task, [(sets, codebook, board, cfg.registration) for sets in dets], workers)
            (out / "registrations").mkdir(exist_ok=True)
            for t, rr in enumerate(regs):
                io.save_registrations(rr, out / "registrations" / _frame_name(t, "txt"))

        stage = "triangulate"
        clouds = None
        if stages.triangulate and regs is not None:
            rc = dataclasses.replace(cfg.ransac, seed=seeds["ransac"])
            clouds = _map(_triangulate_task, [(regs[t], cameras, template.n_vertices, rc, t) for t in range(T)], workers)
            (out / "clouds").mkdir(exist_ok=True)
            for t, c in enumerate(clouds):
                io.save_cloud(c, out / "clouds" / _frame_name(t, "ply"))

        stage = "align"
        aligned = None
        if stages.align and clouds is not None:
            F = local_frames(template)
            results = _map(_align_task, [(template, F, c, cfg.align) for c in clouds], workers)
            aligned = AlignedSequence([r.state for r in results], [r.mesh for r in results],
                                      [r.detected for r in results], [r.log for r in results])
            if stages.refine:
                stage = "refine"
                aligned = temporal_refine(template, F, aligned, cfg.align, passes=cfg.refine.passes)
            (out / "aligned").mkdir(exist_ok=True)
            for t, m in enumerate(aligned.meshes):
                io.save_obj(out / "aligned" / _frame_name(t, "obj"), m, template, write_coords=False)
            for t, r in enumerate(results):
                io.dump_json({"stage_log": r.log, "pruned": int(r.pruned.sum()), "detected": int(r.detected.sum())},
                             out / "aligned" / _frame_name(t, "json"))

        driven = None
        if stages.drive and regs is not None:
            stage = "drive"
            db = cfg.drive
            train = aligned.meshes if aligned is not None else list(scene.frames)
            if db.train_frames is not None:
                train = train[: db.train_frames]
            sk = build_skeleton(template, db.spacing)
            poses = [fit_skeleton(m, sk, db.lam).pose for m in train]
            latent = fit_latent_model(poses, min(db.latent_dim, sk.n_params), skeleton=sk)
            io.save_skeleton(sk, out / "skeleton.json")
            io.save_latent(latent, out / "latent.bin")
            dcams = [c for c in cameras if c.id in set(db.cameras)]
            (out / "driven").mkdir(exist_ok=True)
            driven = []
            for t in range(T):
                rr = [r for r in regs[t] if r.camera_id in set(db.cameras)]
                cf = coarse_fit(rr, dcams, sk, latent, template)
                sig = build_uv_signal(rr, template, dcams, cf.mesh, t)
                dv = drive_baseline(sig, template, cf.mesh, dcams)
                driven.append((cf, dv))
                io.save_obj(out / "driven" / _frame_name(t, "obj"), dv.mesh, template, write_coords=False)
                io.save_uv_signal(sig, out / "driven" / _frame_name(t, "uv"))
                io.dump_json({"root": cf.root, "z": cf.z, "rms_px": cf.rms_px, "flag": cf.flag,
                              "lifted": int(dv.lifted.sum())}, out / "driven" / _frame_name(t, "json"))

        if stages.metrics:
            stage = "metrics"
            if aligned is not None:
                rep = evaluate_sequence(aligned.meshes, scene.frames, template, scene.fps, clouds, cfg.metrics.n_pairs,
                                        seed=cfg.seed)
                report["alignment"] = rep.as_dict()
            elif clouds is not None:
                report["coverage"] = [coverage(c, template) for c in clouds]
            if driven is not None:
                report["driving"] = {
                    "coarse_mean_euclidean_mm": [mean_euclidean(cf.mesh, g) for (cf, _), g in zip(driven, scene.frames)],
                    "driven_mean_euclidean_mm": [mean_euclidean(dv.mesh, g) for (_, dv), g in zip(driven, scene.frames)],
                    "driven_chamfer_mm": [chamfer(dv.mesh, g) for (_, dv), g in zip(driven, scene.frames)],
                    "coarse_rms_px": [cf.rms_px for cf, _ in driven],
                }
            io.dump_json(report, out / "report.json")
    except Exception as exc:
        raise StageError(stage, exc) from exc

    manifest = write_manifest(out, cfg, seeds)
    return RunResult(0, out, manifest, report)


def write_manifest(out: Path, cfg: PipelineConfig, seeds: dict) -> dict:
    inputs = {}
    for f in dataclasses.fields(PathsConfig):
        v = getattr(cfg.paths, f.name)
        if v and f.name != "output" and Path(v).is_file():
            inputs[f.name] = _sha256(Path(v))
    cfg_dict = config_to_dict(dataclasses.replace(cfg, paths=PathsConfig(), workers=None))
    artifacts = {
        str(p.relative_to(out)).replace(os.sep, "/"): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "version": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "seed": cfg.seed,
        "stage_seeds": seeds,
        "config_sha256": hashlib.sha256(json.dumps(io.round9(cfg_dict), sort_keys=True).encode()).hexdigest(),
        "inputs": inputs,
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
