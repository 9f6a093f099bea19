"""Multi-view triangulation of registered pixels with a RANSAC ray-consensus filter."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .capture_sim import Camera


class DegenerateRays(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def point_at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction

    def distance(self, point) -> float:
        v = np.asarray(point, dtype=float) - self.origin
        return float(np.linalg.norm(v - (v @ self.direction) * self.direction))


def backproject_many(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-space ray directions through pixels; origins are the camera center."""
    p = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d_cam = np.stack([(p[:, 0] - camera.cx) / camera.fx, (p[:, 1] - camera.cy) / camera.fy, np.ones(len(p))], axis=1)
    d = d_cam @ camera.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


def backproject(camera: Camera, pixel) -> Ray:
    o, d = backproject_many(camera, [pixel])
    return Ray(o[0], d[0])


def ray_distances(point, origins, dirs) -> np.ndarray:
    v = np.asarray(point, dtype=float) - origins
    along = np.einsum("ij,ij->i", v, dirs)
    return np.linalg.norm(v - along[:, None] * dirs, axis=1)


def least_squares_point(origins, dirs, cond_limit: float = 1e10) -> tuple[np.ndarray, float]:
    """Point minimizing the summed squared distance to the rays, and its rms distance."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    P = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, origins)
    w = np.linalg.eigvalsh(A)
    if len(origins) < 2 or w[0] <= w[-1] / cond_limit:
        raise DegenerateRays(f"ray bundle is rank deficient (eigenvalues {w[0]:.3g}, {w[-1]:.3g})")
    x = np.linalg.solve(A, b)
    rms = float(np.sqrt(np.mean(ray_distances(x, origins, dirs) ** 2)))
    return x, rms


@dataclass
class RegisteredPoint:
    board_coord: tuple[int, int]
    position: np.ndarray
    inlier_count: int
    rms_residual: float
    inlier_cameras: tuple = ()


@dataclass(frozen=True)
class RansacConfig:
    radius_mm: float = 1.0
    min_rays: int = 3
    iters: int = 50
    seed: int = 0


def ransac_point(origins, dirs, cameras, radius_mm: float = 1.0, min_rays: int = 3, iters: int = 50,
                 rng: np.random.Generator | None = None, board_coord=(-1, -1)) -> RegisteredPoint | None:
    """Consensus point of rays already reduced to one ray per camera.

    Hypotheses are least-squares points of ray pairs (all pairs when there are
    at most ``iters`` of them, otherwise ``iters`` sampled pairs).  The best
    hypothesis has most inliers, then the smallest rms.  Its inliers are refit
    until the inlier set is stable, so every reported inlier lies within the
    radius of the final point.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    cameras = np.asarray(cameras)
    n = len(origins)
    if n < max(min_rays, 2):
        return None
    if len(np.unique(cameras)) != n:
        raise ValueError("rays must come from distinct cameras")
    pairs = list(itertools.combinations(range(n), 2))
    if len(pairs) > iters:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(pairs), size=iters, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    best = None
    for a, b in pairs:
        try:
            x, _ = least_squares_point(origins[[a, b]], dirs[[a, b]])
        except DegenerateRays:
            continue
        d = ray_distances(x, origins, dirs)
        inl = d <= radius_mm
        cnt = int(inl.sum())
        rms = float(np.sqrt(np.mean(d[inl] ** 2))) if cnt else np.inf
        if best is None or cnt > best[0] or (cnt == best[0] and rms < best[1]):
            best = (cnt, rms, inl)
    if best is None or best[0] < min_rays:
        return None
    inl = best[2]
    for _ in range(20):
        try:
            x, _ = least_squares_point(origins[inl], dirs[inl])
        except DegenerateRays:
            return None
        new = ray_distances(x, origins, dirs) <= radius_mm
        if (new == inl).all():
            break
        if new.sum() < min_rays:
            return None
        inl = new
    d = ray_distances(x, origins, dirs)
    if not (d[inl] <= radius_mm).all() or inl.sum() < min_rays:
        return None
    rms = float(np.sqrt(np.mean(d[inl] ** 2)))
    return RegisteredPoint(
        board_coord=tuple(int(v) for v in board_coord),
        position=x,
        inlier_count=int(inl.sum()),
        rms_residual=rms,
        inlier_cameras=tuple(int(c) for c in cameras[inl]),
    )


@dataclass
class RegisteredPointCloud:
    frame: int
    coords: np.ndarray  # (n, 2) board (row, col)
    positions: np.ndarray  # (n, 3) mm
    inliers: np.ndarray
    rms: np.ndarray
    n_active: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.inliers = np.asarray(self.inliers, dtype=np.int64).reshape(-1)
        self.rms = np.asarray(self.rms, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.coords)

    @property
    def coverage(self) -> float:
        return len(self) / self.n_active if self.n_active else 0.0

    def as_dict(self) -> dict:
        return {(int(r), int(c)): p for (r, c), p in zip(self.coords, self.positions)}


def triangulate_frame(registered, cameras, n_active: int, config: RansacConfig | None = None,
                      frame: int | None = None) -> RegisteredPointCloud:
    """Triangulate every board coordinate registered in at least ``min_rays`` cameras.

    ``registered`` is a list of per-camera RegisteredPixels of one frame.  A
    camera contributes at most one ray per coordinate, its most confident one.
    """
    cfg = config or RansacConfig()
    cam_by_id = {c.id: c for c in cameras}
    if frame is None:
        frame = registered[0].frame if registered else 0
    cols = []
    for reg in registered:
        if len(reg) == 0:
            continue
        o, d = backproject_many(cam_by_id[reg.camera_id], reg.pixels)
        cols.append((reg.coords, np.full(len(reg), reg.camera_id), reg.confidence, o, d))
    if not cols:
        return RegisteredPointCloud(frame, np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), n_active)
    coords = np.concatenate([c[0] for c in cols])
    cams = np.concatenate([c[1] for c in cols])
    conf = np.concatenate([c[2] for c in cols])
    O = np.concatenate([c[3] for c in cols])
    D = np.concatenate([c[4] for c in cols])
    # per (coord, camera) keep the most confident ray; stable order breaks ties
    order = np.lexsort((np.arange(len(conf)), -conf, cams, coords[:, 1], coords[:, 0]))
    coords, cams, O, D = coords[order], cams[order], O[order], D[order]
    key = np.stack([coords[:, 0], coords[:, 1], cams], axis=1)
    first = np.r_[True, np.any(key[1:] != key[:-1], axis=1)]
    coords, cams, O, D = coords[first], cams[first], O[first], D[first]
    starts = np.r_[0, np.flatnonzero(np.any(coords[1:] != coords[:-1], axis=1)) + 1, len(coords)]
    out_c, out_p, out_n, out_r = [], [], [], []
    for s, e in zip(starts[:-1], starts[1:]):
        if e - s < cfg.min_rays:
            continue
        rc = coords[s]
        rng = np.random.default_rng([cfg.seed, frame, int(rc[0]), int(rc[1])])
        pt = ransac_point(O[s:e], D[s:e], cams[s:e], cfg.radius_mm, cfg.min_rays, cfg.iters, rng, rc)
        if pt is None:
            continue
        out_c.append(rc)
        out_p.append(pt.position)
        out_n.append(pt.inlier_count)
        out_r.append(pt.rms_residual)
    return RegisteredPointCloud(
        frame=frame,
        coords=np.array(out_c).reshape(-1, 2),
        positions=np.array(out_p).reshape(-1, 3),
        inliers=np.array(out_n),
        rms=np.array(out_r),
        n_active=n_active,
    )
