"""Synthetic garment scenes with ground truth: board, template, motion and camera rig."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .board import Board, generate_board
from .capture_sim import Camera, look_at_camera
from .geometry import TemplateMesh, build_template, cylinder_embedding, planar_embedding


@dataclass
class Scene:
    board: Board
    template: TemplateMesh
    frames: np.ndarray  # (T, n_vertices, 3) ground-truth positions, mm
    cameras: list
    fps: float = 30.0
    info: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def camera_ring(n: int, radius_mm: float, target, focal_px: float, width: int, height: int,
                height_mm: float = 0.0, phase_deg: float = 0.0, start_id: int = 0) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle, all facing ``target``."""
    target = np.asarray(target, dtype=float)
    cams = []
    for i in range(n):
        a = np.radians(phase_deg) + 2 * np.pi * i / n
        center = target + np.array([radius_mm * np.cos(a), radius_mm * np.sin(a), height_mm])
        cams.append(look_at_camera(start_id + i, center, target, focal_px, width, height))
    return cams


def camera_arc(n: int, radius_mm: float, target, facing, focal_px: float, width: int, height: int,
               spread_deg: float = 60.0, elevations_deg=(0.0,)) -> list[Camera]:
    """Cameras on an arc in front of a surface whose outward normal is ``facing``."""
    target = np.asarray(target, dtype=float)
    f = np.asarray(facing, dtype=float)
    f = f / np.linalg.norm(f)
    side = np.cross([0.0, 0.0, 1.0], f)
    side /= np.linalg.norm(side)
    up = np.cross(f, side)
    cams = []
    azs = np.linspace(-spread_deg, spread_deg, n) if n > 1 else np.zeros(1)
    for el in elevations_deg:
        for az in azs:
            a, e = np.radians(az), np.radians(el)
            d = np.cos(e) * (np.cos(a) * f + np.sin(a) * side) + np.sin(e) * up
            cams.append(look_at_camera(len(cams), target + radius_mm * d, target, focal_px, width, height))
    return cams


def sheet_scene(rows: int = 40, cols: int = 40, n_frames: int = 10, seed: int = 0, cell_size_mm: float = 2.7,
                amplitude_mm: float = 4.0, n_cameras: int = 8, fps: float = 30.0) -> Scene:
    """A flat sheet with a travelling ripple, watched by an arc of cameras."""
    board = generate_board(rows, cols, seed=seed, cell_size_mm=cell_size_mm)
    rest = planar_embedding(rows, cols, cell_size_mm)
    template = build_template(board, rest_embedding=rest)
    V0 = template.vertices
    x, z = V0[:, 0], V0[:, 2]
    lx = max(x.max(), 1.0)
    frames = []
    for t in range(n_frames):
        ph = 2 * np.pi * t / max(n_frames, 1)
        y = -amplitude_mm * np.sin(2 * np.pi * x / lx + ph) * np.cos(np.pi * z / lx)
        frames.append(np.stack([x, y, z], axis=1))
    center = V0.mean(axis=0)
    span = max(rows, cols) * cell_size_mm
    dist = 4.0 * span
    focal = 10.0 * dist / cell_size_mm  # about 10 px per cell
    size = int(np.ceil(1.6 * span * focal / dist / 32) * 32)
    cams = camera_arc(n_cameras // 2 if n_cameras > 1 else 1, dist, center, (0, -1, 0), focal, size, size,
                      spread_deg=40.0, elevations_deg=(-20.0, 20.0) if n_cameras > 1 else (0.0,))
    return Scene(board, template, np.asarray(frames), cams, fps=fps, info={"kind": "sheet"})


def folded_sheet(template: TemplateMesh, fold_col: float, gap_mm: float = 3.0) -> np.ndarray:
    """Fold a planar sheet (xz-plane, facing -y) 180 degrees about a vertical line.

    Columns beyond ``fold_col`` are swung behind the rest of the sheet at a
    ``gap_mm`` offset, so their printed side faces away from a camera in front.
    Returns the new positions and leaves the template untouched.
    """
    V = template.vertices.copy()
    s = template.cell_size_mm
    x0 = fold_col * s
    beyond = V[:, 0] > x0
    r = gap_mm / 2
    d = V[beyond, 0] - x0
    # arc of radius r for the bend, then straight back
    ang = np.minimum(d / r, np.pi)
    straight = np.maximum(d - np.pi * r, 0.0)
    V[beyond, 0] = x0 + r * np.sin(ang) - straight
    V[beyond, 1] = r - r * np.cos(ang)
    return V


@dataclass(frozen=True)
class TubeParams:
    rows: int = 32
    cols: int = 100
    cell_size_mm: float = 2.7
    n_pleats: int = 7
    pleat_depth_mm: float = 3.0
    overhang: float = 0.3
    sway_mm: float = 4.0
    breathing: float = 0.03
    twist_deg: float = 12.0
    fps: float = 30.0


def tube_positions(rest_theta: np.ndarray, rest_z: np.ndarray, radius: float, height: float, s: float,
                   p: TubeParams) -> np.ndarray:
    """Deformed tube at time ``s`` seconds from material angle and height."""
    m = p.n_pleats
    h = np.clip(-rest_z / max(height, 1e-9), 0.0, 1.0)
    psi = 2 * np.pi * 0.35 * s + 1.3 * np.sin(2 * np.pi * 0.2 * s)
    env = 0.55 + 0.45 * np.sin(np.pi * h) * (1 + 0.3 * np.sin(2 * np.pi * 0.5 * s))
    phase = m * rest_theta + psi + 2.0 * h
    # pleats: radial undulation plus a tangential shear that makes each pleat lean over the next
    theta = rest_theta + p.overhang * (p.pleat_depth_mm / radius) * env * np.cos(phase)
    rho = radius * (1 + p.breathing * np.sin(2 * np.pi * 0.5 * s + 3 * h)) + p.pleat_depth_mm * env * np.sin(phase)
    twist = np.radians(p.twist_deg) * np.sin(2 * np.pi * 0.25 * s) * h
    theta = theta + twist
    x = rho * np.cos(theta) + p.sway_mm * np.sin(2 * np.pi * 0.4 * s) * h**2
    y = rho * np.sin(theta) + 0.5 * p.sway_mm * np.cos(2 * np.pi * 0.3 * s) * h**2
    z = rest_z * (1 - 0.02 * np.sin(2 * np.pi * 0.5 * s))
    return np.stack([x, y, z], axis=1)


def tube_scene(n_frames: int = 60, seed: int = 0, params: TubeParams | None = None, n_cameras: int = 8,
               camera_distance_mm: float = 330.0, px_per_cell: float = 10.0, gap_cells: int = 2) -> Scene:
    """A pleated tube garment animated over time inside a ring of cameras.

    The tube wraps around the vertical axis, leaving a ``gap_cells`` wide open
    seam.  Each point faces only a few ring cameras within the detectable
    incidence range and the leaning pleats tilt their flanks away from some of
    them, so per-frame coverage is well below one.
    """
    p = params or TubeParams()
    board = generate_board(p.rows, p.cols, seed=seed, cell_size_mm=p.cell_size_mm)
    s = p.cell_size_mm
    # radius chosen so that cols + gap chords close the circle
    radius = s / (2 * np.sin(np.pi / (p.cols + gap_cells)))
    rest = cylinder_embedding(p.rows, p.cols, s, radius)
    template = build_template(board, rest_embedding=rest)
    V0 = template.vertices
    theta0 = np.arctan2(V0[:, 1], V0[:, 0])
    z0 = V0[:, 2]
    height = (p.rows - 1) * s
    frames = np.stack([tube_positions(theta0, z0, radius, height, t / p.fps, p) for t in range(n_frames)])
    target = np.array([0.0, 0.0, -height / 2])
    focal = px_per_cell * camera_distance_mm / s
    half = radius + p.pleat_depth_mm + p.sway_mm + 5
    w = int(np.ceil(2.4 * max(half, height / 2 + 5) * focal / camera_distance_mm / 32) * 32)
    cams = camera_ring(n_cameras, camera_distance_mm, target, focal, w, w, phase_deg=180.0 / n_cameras)
    info = {"kind": "tube", "radius_mm": float(radius), "height_mm": float(height)}
    return Scene(board, template, frames, cams, fps=p.fps, info=info)


def opposing_cameras(scene: Scene, ids=(0, None)) -> list[Camera]:
    """Two cameras on opposite sides of the ring."""
    n = len(scene.cameras)
    a = ids[0]
    b = ids[1] if ids[1] is not None else (a + n // 2) % n
    return [scene.cameras[a], scene.cameras[b]]
