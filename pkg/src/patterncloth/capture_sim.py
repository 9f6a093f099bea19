"""Synthetic multi-view capture: cameras, visibility and noisy keypoint detections.

This stands in for image-based detectors.  A known garment state is projected
into calibrated pinhole cameras; each visible cell yields a center detection
with color candidates and its four lattice corners.  Ground-truth board
coordinates ride along for evaluation and are never read by the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .board import Board
from .geometry import TemplateMesh, vertex_normals

CENTER = 0
CORNER = 1
KIND_NAMES = ("center", "corner")


class BehindCamera(ValueError):
    pass


@dataclass
class Camera:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() >= 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def project_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixels and camera-space depth for (n, 3) points; no depth check."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def in_image(self, pixels) -> np.ndarray:
        p = np.asarray(pixels)
        return (p[..., 0] >= 0) & (p[..., 0] < self.width) & (p[..., 1] >= 0) & (p[..., 1] < self.height)


def project(camera: Camera, point) -> np.ndarray:
    """Pinhole projection of one world point (mm) to pixels."""
    pc = camera.to_camera(point)
    if pc[2] <= 0:
        raise BehindCamera(f"point at camera depth {pc[2]:.6g} mm")
    return np.array([camera.fx * pc[0] / pc[2] + camera.cx, camera.fy * pc[1] / pc[2] + camera.cy])


def look_at_camera(cam_id, center, target, focal_px, width, height, up=(0.0, 0.0, 1.0)) -> Camera:
    from .rotations import look_at

    R = look_at(center, target, up)
    t = -R @ np.asarray(center, dtype=float)
    return Camera(cam_id, focal_px, focal_px, width / 2.0, height / 2.0, width, height, R, t)


@dataclass(frozen=True)
class NoiseConfig:
    pixel_jitter_sigma: float = 0.0
    dropout_rate: float = 0.0
    outlier_rate: float = 0.0
    color_ambiguity_rate: float = 0.0
    color_error_rate: float = 0.0
    seed: int = 0
    # cells seen at steeper incidence than this are not detectable
    max_incidence_deg: float = 70.0

    def __post_init__(self):
        for name in ("dropout_rate", "outlier_rate", "color_ambiguity_rate", "color_error_rate"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pixel_jitter_sigma < 0:
            raise ValueError("pixel_jitter_sigma must be nonnegative")


@dataclass
class Detection:
    kind: str
    pixel: tuple[float, float]
    color_candidates: frozenset
    gt_board_coord: tuple[int, int] | None = None


@dataclass
class DetectionSet:
    """Detections of one camera at one frame, stored column-wise.

    ``gt`` holds the board cell of a center or the lattice corner index of a
    corner (corner (r, c) is the upper-left corner of cell (r, c)); outliers
    and real-data detections carry (-1, -1).
    """

    camera_id: int
    frame: int
    kinds: np.ndarray
    pixels: np.ndarray
    colors: list = field(default_factory=list)
    gt: np.ndarray | None = None

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=np.int8).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if self.gt is None:
            self.gt = -np.ones((len(self.kinds), 2), dtype=np.int64)
        self.gt = np.asarray(self.gt, dtype=np.int64).reshape(-1, 2)
        if not self.colors:
            self.colors = [()] * len(self.kinds)

    def __len__(self):
        return len(self.kinds)

    @property
    def detections(self) -> list[Detection]:
        out = []
        for k, p, c, g in zip(self.kinds, self.pixels, self.colors, self.gt):
            gt = (int(g[0]), int(g[1])) if g[0] >= 0 else None
            out.append(Detection(KIND_NAMES[k], (float(p[0]), float(p[1])), frozenset(c), gt))
        return out

    def subset(self, keep) -> "DetectionSet":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return DetectionSet(
            self.camera_id,
            self.frame,
            self.kinds[keep],
            self.pixels[keep],
            [self.colors[i] for i in keep],
            self.gt[keep],
        )


def _ray_triangle_hits(origins, dirs, v0, v1, v2, t_max=1.0 - 1e-4, t_min=1e-9):
    """Moller-Trumbore for paired rays/triangles; True where 0 < t < t_max."""
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", dirs, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < t_max)


def occluded(camera: Camera, points: np.ndarray, vertices: np.ndarray, triangles: np.ndarray,
             point_vertex: np.ndarray | None = None, bin_px: float = 24.0) -> np.ndarray:
    """Exact ray-triangle occlusion test of the segments camera->point.

    Triangles are binned by their projected bounding boxes, then every
    candidate pair is tested exactly.  Triangles incident to ``point_vertex``
    (the vertex a point belongs to, or -1) are skipped.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    result = np.zeros(n, bool)
    if n == 0 or len(triangles) == 0:
        return result
    C = camera.center
    tri_pix, tri_z = camera.project_many(vertices[triangles].reshape(-1, 3))
    tri_pix = tri_pix.reshape(-1, 3, 2)
    tri_z = tri_z.reshape(-1, 3)
    front = np.all(tri_z > 1e-9, axis=1)
    pts_pix, pts_z = camera.project_many(points)
    lo = np.floor(tri_pix.min(axis=1) / bin_px).astype(np.int64)
    hi = np.floor(tri_pix.max(axis=1) / bin_px).astype(np.int64)
    pbin = np.floor(pts_pix / bin_px).astype(np.int64)
    valid_pts = pts_z > 0
    if not valid_pts.any():
        return result
    bx0, by0 = pbin[valid_pts].min(axis=0)
    bx1, by1 = pbin[valid_pts].max(axis=0)
    lo = np.maximum(lo, [bx0, by0])
    hi = np.minimum(hi, [bx1, by1])
    keep = front & np.all(hi >= lo, axis=1)
    tids = np.flatnonzero(keep)
    if tids.size == 0:
        return result
    nx = bx1 - bx0 + 1
    span = hi[tids] - lo[tids] + 1
    counts = span[:, 0] * span[:, 1]
    rep_t = np.repeat(tids, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    sx = np.repeat(span[:, 0], counts)
    bx = np.repeat(lo[tids, 0], counts) + offs % sx
    by = np.repeat(lo[tids, 1], counts) + offs // sx
    bins = (by - by0) * nx + (bx - bx0)
    order = np.argsort(bins, kind="stable")
    bins = bins[order]
    rep_t = rep_t[order]
    n_bins = nx * (by1 - by0 + 1)
    starts = np.searchsorted(bins, np.arange(n_bins + 1))

    pidx = np.flatnonzero(valid_pts)
    pb = (pbin[pidx, 1] - by0) * nx + (pbin[pidx, 0] - bx0)
    cnt = starts[pb + 1] - starts[pb]
    pair_p = np.repeat(pidx, cnt)
    pair_off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    pair_t = rep_t[np.repeat(starts[pb], cnt) + pair_off]
    if point_vertex is not None:
        pv = np.asarray(point_vertex)[pair_p]
        tri = triangles[pair_t]
        incident = (tri[:, 0] == pv) | (tri[:, 1] == pv) | (tri[:, 2] == pv)
        pair_p = pair_p[~incident]
        pair_t = pair_t[~incident]
    chunk = 2_000_000
    for s in range(0, len(pair_p), chunk):
        pp = pair_p[s : s + chunk]
        tt = pair_t[s : s + chunk]
        tri = triangles[tt]
        dirs = points[pp] - C
        hit = _ray_triangle_hits(np.broadcast_to(C, dirs.shape), dirs, vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]])
        if hit.any():
            result[np.unique(pp[hit])] = True
    return result


def visible_vertices(camera: Camera, vertices: np.ndarray, triangles: np.ndarray,
                     max_incidence_deg: float = 90.0, normals: np.ndarray | None = None) -> np.ndarray:
    """Vertices that face the camera within the incidence limit, project inside
    the image and are not hidden by any triangle."""
    V = np.asarray(vertices, dtype=float)
    if normals is None:
        normals = vertex_normals(V, triangles)
    to_cam = camera.center - V
    dist = np.linalg.norm(to_cam, axis=1)
    cos = np.einsum("ij,ij->i", normals, to_cam) / np.maximum(dist, 1e-300)
    facing = cos > max(np.cos(np.radians(max_incidence_deg)), 0.0)
    pix, z = camera.project_many(V)
    cand = facing & (z > 0) & camera.in_image(pix)
    idx = np.flatnonzero(cand)
    occ = occluded(camera, V[idx], V, triangles, point_vertex=idx)
    vis = np.zeros(len(V), bool)
    vis[idx[~occ]] = True
    return vis


def cell_corners(template: TemplateMesh, vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3D lattice corners of every cell of the deformed template.

    Returns ``(corner_grid, cell_corner_ids)`` where corner_grid has shape
    (rows+1, cols+1, 3) (NaN where no adjacent cell is active) and
    cell_corner_ids[k] lists the 4 flat corner indices of vertex k's cell.
    """
    rows, cols = template.board_shape
    bc = template.board_coords
    has = bc[:, 0] >= 0
    grid = np.full((rows, cols, 3), np.nan)
    grid[bc[has, 0], bc[has, 1]] = vertices[has]

    def diff(axis):
        fwd = np.full_like(grid, np.nan)
        bwd = np.full_like(grid, np.nan)
        if axis == 0:
            fwd[:-1] = grid[1:] - grid[:-1]
            bwd[1:] = grid[1:] - grid[:-1]
        else:
            fwd[:, :-1] = grid[:, 1:] - grid[:, :-1]
            bwd[:, 1:] = grid[:, 1:] - grid[:, :-1]
        both = ~np.isnan(fwd[..., 0]) & ~np.isnan(bwd[..., 0])
        out = np.where(np.isnan(fwd), bwd, fwd)
        out[both] = 0.5 * (fwd[both] + bwd[both])
        return out

    dr = diff(0)
    dc = diff(1)
    acc = np.zeros((rows + 1, cols + 1, 3))
    cnt = np.zeros((rows + 1, cols + 1))
    for sr in (0, 1):
        for sc in (0, 1):
            est = grid + (sr - 0.5) * np.nan_to_num(dr) + (sc - 0.5) * np.nan_to_num(dc)
            ok = ~np.isnan(est[..., 0])
            acc[sr : sr + rows, sc : sc + cols][ok] += est[ok]
            cnt[sr : sr + rows, sc : sc + cols][ok] += 1
    corner_grid = np.full((rows + 1, cols + 1, 3), np.nan)
    nz = cnt > 0
    corner_grid[nz] = acc[nz] / cnt[nz][:, None]
    r = np.where(has, bc[:, 0], 0)
    c = np.where(has, bc[:, 1], 0)
    w = cols + 1
    ids = np.stack([r * w + c, r * w + c + 1, (r + 1) * w + c, (r + 1) * w + c + 1], axis=1)
    ids[~has] = -1
    return corner_grid, ids


def visibility_masks(template: TemplateMesh, vertices: np.ndarray, cameras, noise: NoiseConfig) -> np.ndarray:
    """(n_cameras, n_vertices) boolean visibility of cell centers."""
    normals = vertex_normals(vertices, template.triangles)
    return np.stack(
        [visible_vertices(cam, vertices, template.triangles, noise.max_incidence_deg, normals) for cam in cameras]
    )


def simulate_view(template: TemplateMesh, vertices: np.ndarray, board: Board, camera: Camera, cam_index: int,
                  frame: int, noise: NoiseConfig, visible: np.ndarray | None = None,
                  corners=None) -> DetectionSet:
    vertices = np.asarray(vertices, dtype=float)
    rng = np.random.default_rng([noise.seed, frame, cam_index])
    if visible is None:
        visible = visible_vertices(camera, vertices, template.triangles, noise.max_incidence_deg)
    if corners is None:
        corners = cell_corners(template, vertices)
    corner_grid, corner_ids = corners
    has_cell = template.board_coords[:, 0] >= 0
    vis_idx = np.flatnonzero(visible & has_cell)

    # corners of every visible cell, deduplicated
    cids = np.unique(corner_ids[vis_idx].ravel())
    cflat = corner_grid.reshape(-1, 3)
    cids = cids[~np.isnan(cflat[cids, 0])]
    keep_center = rng.random(len(vis_idx)) >= noise.dropout_rate
    c_idx = vis_idx[keep_center]

    cpix, _ = camera.project_many(vertices[c_idx])
    kpix, kz = camera.project_many(cflat[cids])
    cpix = cpix + rng.normal(0.0, noise.pixel_jitter_sigma, cpix.shape) if noise.pixel_jitter_sigma > 0 else cpix
    kpix = kpix + rng.normal(0.0, noise.pixel_jitter_sigma, kpix.shape) if noise.pixel_jitter_sigma > 0 else kpix

    nc = board.n_colors
    gt_cells = template.board_coords[c_idx]
    true_colors = board.cells[gt_cells[:, 0], gt_cells[:, 1]].astype(int)
    u_err = rng.random(len(c_idx))
    u_amb = rng.random(len(c_idx))
    other = rng.integers(1, nc, size=len(c_idx))
    colors = []
    for tc, ue, ua, o in zip(true_colors.tolist(), u_err.tolist(), u_amb.tolist(), other.tolist()):
        wrong = (tc + o) % nc
        if ue < noise.color_error_rate:
            colors.append((wrong,))
        elif ua < noise.color_ambiguity_rate:
            colors.append(tuple(sorted((tc, wrong))))
        else:
            colors.append((tc,))

    w = template.board_shape[1] + 1
    kgt = np.stack([cids // w, cids % w], axis=1)
    kinds = np.concatenate([np.full(len(c_idx), CENTER), np.full(len(cids), CORNER)])
    pixels = np.concatenate([cpix, kpix])
    gts = np.concatenate([gt_cells, kgt])
    cols = colors + [()] * len(cids)

    inside = camera.in_image(pixels) & np.concatenate([np.ones(len(c_idx), bool), kz > 0])
    n_out = int(rng.binomial(int(inside.sum()), noise.outlier_rate)) if noise.outlier_rate > 0 else 0
    if n_out:
        opix = rng.random((n_out, 2)) * [camera.width, camera.height]
        okind = rng.integers(0, 2, size=n_out)
        ocol = rng.integers(0, nc, size=n_out)
        kinds = np.concatenate([kinds, okind])
        pixels = np.concatenate([pixels, opix])
        gts = np.concatenate([gts, -np.ones((n_out, 2), dtype=np.int64)])
        cols = cols + [((int(c),) if k == CENTER else ()) for k, c in zip(okind, ocol)]
        inside = np.concatenate([inside, np.ones(n_out, bool)])
    keep = np.flatnonzero(inside)
    order = keep[rng.permutation(len(keep))]
    return DetectionSet(
        camera_id=camera.id,
        frame=frame,
        kinds=kinds[order],
        pixels=pixels[order],
        colors=[cols[i] for i in order],
        gt=gts[order],
    )


def simulate_frame(template: TemplateMesh, vertices: np.ndarray, board: Board, cameras, noise: NoiseConfig,
                   frame: int = 0) -> list[DetectionSet]:
    """Detections of one deformed garment state in every camera."""
    vertices = np.asarray(vertices, dtype=float)
    corners = cell_corners(template, vertices)
    vis = visibility_masks(template, vertices, cameras, noise)
    return [
        simulate_view(template, vertices, board, cam, i, frame, noise, visible=vis[i], corners=corners)
        for i, cam in enumerate(cameras)
    ]
