"""Garment skeleton, skinning, latent pose prior, sparse-view coarse fitting and
the UV driving-signal scaffold with a geometric driving operator.

A pose is a root transform r (rotation vector + translation, about the root
node) and one local rigid transform per non-root node, each acting about the
node's rest position and composed down the tree.  Packed pose vectors hold
7 scalars per non-root node: a unit quaternion (w, x, y, z) with w >= 0
followed by the translation, so 156 nodes give 7 * 155 = 1085 parameters.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import dijkstra, minimum_spanning_tree

from .geometry import TemplateMesh, cotangent_laplacian, lumped_mass
from .rotations import exp_so3, log_so3, matrix_to_quat, quat_to_matrix, right_jacobian, skew
from .solver import SolverConfig, block_coo, least_squares
from .triangulate import backproject_many, least_squares_point

log = logging.getLogger(__name__)

NO_DATA = "NoData"
OK = "ok"


class InsufficientData(ValueError):
    pass


# --------------------------------------------------------------------- skeleton


@dataclass
class Skeleton:
    centers: np.ndarray  # (n, 3) rest node positions
    parent: np.ndarray  # (n,) parent index, -1 for the root
    node_vertex: np.ndarray  # (n,) template vertex under each node
    influences: np.ndarray  # (n_vertices, 4) node ids, -1 for unused slots
    weights: np.ndarray  # (n_vertices, 4) nonnegative, rows sum to 1
    rest: np.ndarray  # (n_vertices, 3) template rest positions
    spacing: tuple = (1, 1)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ValueError("skeleton needs exactly one root")
        self.root = int(roots[0])
        self.order = _topological_order(self.parent, self.root)
        if len(self.order) != len(self.parent):
            raise ValueError("parent indices do not form a tree")
        n = self.n_nodes
        rows = np.repeat(np.arange(len(self.rest)), self.influences.shape[1])
        cols = self.influences.ravel()
        keep = cols >= 0
        self.W = sp.csr_matrix((self.weights.ravel()[keep], (rows[keep], cols[keep])), shape=(len(self.rest), n))
        support = (self.W > 0).astype(float)
        overlap = (support.T @ support).tocoo()
        sel = overlap.row < overlap.col
        self.adjacency = np.stack([overlap.row[sel], overlap.col[sel]], axis=1).astype(np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.centers)

    @property
    def n_params(self) -> int:
        return 7 * (self.n_nodes - 1)

    @property
    def non_root(self) -> np.ndarray:
        return np.flatnonzero(self.parent >= 0)

    def support(self, node: int) -> np.ndarray:
        return np.asarray(self.W[:, node].todense()).ravel() > 0

    def subtree(self, node: int) -> np.ndarray:
        inside = np.zeros(self.n_nodes, bool)
        inside[node] = True
        for i in self.order:
            if self.parent[i] >= 0 and inside[self.parent[i]]:
                inside[i] = True
        return inside


def _topological_order(parent: np.ndarray, root: int) -> np.ndarray:
    children = [[] for _ in parent]
    for i, p in enumerate(parent):
        if p >= 0:
            children[p].append(i)
    order, queue = [], deque([root])
    while queue:
        i = queue.popleft()
        order.append(i)
        queue.extend(children[i])
    return np.array(order, dtype=np.int64)


def _edge_graph(template: TemplateMesh, vertices=None) -> sp.csr_matrix:
    V = template.vertices if vertices is None else vertices
    e = template.edges
    w = np.linalg.norm(V[e[:, 0]] - V[e[:, 1]], axis=1)
    n = template.n_vertices
    return sp.coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)).tocsr()


def _spacing_pair(spacing_cells) -> tuple[int, int]:
    if np.ndim(spacing_cells) == 0:
        return int(spacing_cells), int(spacing_cells)
    a, b = spacing_cells
    return int(a), int(b)


def build_skeleton(template: TemplateMesh, spacing_cells=10, max_influences: int = 4) -> Skeleton:
    """Nodes on a regular subsampling of cell centers, spanning tree grown from
    the node nearest the centroid, geodesic-falloff skinning weights.

    ``spacing_cells`` is one spacing or a (row, col) pair.  Node rows sit at
    spacing // 2 + i * spacing; a node whose cell is inactive moves to the
    nearest active vertex.
    """
    sr, sc = _spacing_pair(spacing_cells)
    if sr < 1 or sc < 1:
        raise ValueError("spacing must be positive")
    coords = template.board_coords
    rows, cols = template.board_shape
    index = template.coord_index()
    V = template.vertices
    picks = []
    for r in range(sr // 2, rows, sr):
        for c in range(sc // 2, cols, sc):
            k = index.get((r, c))
            if k is None:
                d = np.abs(coords - [r, c]).sum(axis=1)
                k = int(np.argmin(np.where(coords[:, 0] >= 0, d, np.iinfo(np.int64).max)))
            picks.append(k)
    node_vertex = np.array(sorted(set(picks), key=picks.index), dtype=np.int64)
    n = len(node_vertex)
    centers = V[node_vertex].copy()

    G = _edge_graph(template)
    D = dijkstra(G, directed=False, indices=node_vertex)  # (n, n_vertices)
    parent = -np.ones(n, dtype=np.int64)
    root = int(np.argmin(np.linalg.norm(centers - V.mean(axis=0), axis=1)))
    if n > 1:
        # nearest-node linking: minimum spanning tree over node-to-node geodesics, oriented from the root
        Dn = D[:, node_vertex]
        Dn = np.where(np.isfinite(Dn), Dn, 0.0)
        Dn = 0.5 * (Dn + Dn.T) + np.triu(np.full((n, n), 1e-12), 1)
        T = minimum_spanning_tree(sp.csr_matrix(np.triu(Dn, 1)))
        T = (T + T.T).tocsr()
        seen = np.zeros(n, bool)
        seen[root] = True
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j in T.indices[T.indptr[i] : T.indptr[i + 1]]:
                if not seen[j]:
                    seen[j] = True
                    parent[j] = i
                    queue.append(j)

    m = min(max_influences, n)
    Dv = D.T  # (n_vertices, n)
    nearest = np.argsort(Dv, axis=1, kind="stable")
    infl = nearest[:, :m]
    d = np.take_along_axis(Dv, infl, axis=1)
    if n > m:
        radius = np.take_along_axis(Dv, nearest[:, m : m + 1], axis=1)
    else:
        radius = d[:, -1:] + template.cell_size_mm * max(sr, sc)
    radius = np.maximum(radius, d[:, -1:] + 1e-9)
    w = (1.0 - d / radius) ** 2
    w = np.where(np.isfinite(w), w, 0.0)
    w /= w.sum(axis=1, keepdims=True)
    influences = np.full((template.n_vertices, max_influences), -1, dtype=np.int64)
    weights = np.zeros((template.n_vertices, max_influences))
    influences[:, :m] = np.where(w > 0, infl, -1)
    weights[:, :m] = w
    return Skeleton(centers, parent, node_vertex, influences, weights, template.vertices.copy(), (sr, sc))


def spacing_for_count(template: TemplateMesh, n_nodes: int) -> tuple[int, int]:
    """(row, col) spacing whose node grid count is closest to ``n_nodes``."""
    rows, cols = template.board_shape
    best = None
    for sr in range(1, rows + 1):
        nr = len(range(sr // 2, rows, sr))
        for sc in range(1, cols + 1):
            cnt = nr * len(range(sc // 2, cols, sc))
            key = (abs(cnt - n_nodes), abs(sr - sc), sr)
            if best is None or key < best[0]:
                best = (key, (sr, sc))
    return best[1]


# ------------------------------------------------------------------------ poses


@dataclass
class Pose:
    root: np.ndarray  # (6,) rotation vector + translation, about the root node
    rotvecs: np.ndarray  # (n, 3) local rotations; the root row is unused
    translations: np.ndarray  # (n, 3) local translations, mm

    @classmethod
    def identity(cls, skeleton: Skeleton) -> "Pose":
        n = skeleton.n_nodes
        return cls(np.zeros(6), np.zeros((n, 3)), np.zeros((n, 3)))

    def copy(self) -> "Pose":
        return Pose(self.root.copy(), self.rotvecs.copy(), self.translations.copy())

    def pack(self, skeleton: Skeleton) -> np.ndarray:
        """7 scalars per non-root node in index order: quaternion (w >= 0), translation."""
        idx = skeleton.non_root
        q = matrix_to_quat(exp_so3(self.rotvecs[idx]))
        q = np.where(q[:, :1] < 0, -q, q)
        return np.hstack([q, self.translations[idx]]).ravel()

    @classmethod
    def unpack(cls, skeleton: Skeleton, theta, root=None) -> "Pose":
        theta = np.asarray(theta, dtype=float).reshape(-1, 7)
        idx = skeleton.non_root
        if len(theta) != len(idx):
            raise ValueError(f"expected {7 * len(idx)} pose parameters, got {theta.size}")
        q = theta[:, :4]
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        q = np.where(norm > 0, q / np.where(norm > 0, norm, 1.0), [[1.0, 0, 0, 0]])
        pose = cls.identity(skeleton)
        pose.rotvecs[idx] = log_so3(quat_to_matrix(q))
        pose.translations[idx] = theta[:, 4:]
        if root is not None:
            pose.root = np.asarray(root, dtype=float).copy()
        return pose


def world_transforms(skeleton: Skeleton, pose: Pose):
    """Per-node world maps x -> A_i x + b_i from forward kinematics."""
    n = skeleton.n_nodes
    c = skeleton.centers
    R = exp_so3(pose.rotvecs)
    A = np.zeros((n, 3, 3))
    b = np.zeros((n, 3))
    for i in skeleton.order:
        p = skeleton.parent[i]
        if p < 0:
            Ri = exp_so3(pose.root[:3])
            A[i] = Ri
            b[i] = c[i] + pose.root[3:] - Ri @ c[i]
        else:
            bl = c[i] + pose.translations[i] - R[i] @ c[i]
            A[i] = A[p] @ R[i]
            b[i] = A[p] @ bl + b[p]
    return A, b


def _blend(skeleton: Skeleton, A, b, rows=None) -> np.ndarray:
    """v + sum_i w_i (G_i(v) - v); exact zero displacement where every G_i is the identity."""
    V = skeleton.rest if rows is None else skeleton.rest[rows]
    infl = skeleton.influences if rows is None else skeleton.influences[rows]
    w = skeleton.weights if rows is None else skeleton.weights[rows]
    out = V.copy()
    for j in range(infl.shape[1]):
        i = infl[:, j]
        ok = i >= 0
        ii = np.where(ok, i, 0)
        disp = np.einsum("kab,kb->ka", A[ii] - np.eye(3), V) + b[ii]
        out += np.where(ok[:, None], w[:, j : j + 1] * disp, 0.0)
    return out


def skin(skeleton: Skeleton, pose: Pose, rows=None) -> np.ndarray:
    """Linear blend skinning of the rest template under ``pose``."""
    A, b = world_transforms(skeleton, pose)
    return _blend(skeleton, A, b, rows)


def _globals_to_pose(skeleton: Skeleton, omega, tau) -> Pose:
    """Local pose from per-node world maps G_i(x) = exp(omega_i)(x - c_i) + c_i + tau_i."""
    c = skeleton.centers
    R = exp_so3(omega)
    b = c + tau - np.einsum("kij,kj->ki", R, c)
    pose = Pose.identity(skeleton)
    for i in skeleton.order:
        p = skeleton.parent[i]
        if p < 0:
            pose.root = np.r_[omega[i], tau[i]]
            continue
        Rl = R[p].T @ R[i]
        bl = R[p].T @ (b[i] - b[p])
        pose.rotvecs[i] = log_so3(Rl)
        pose.translations[i] = bl - c[i] + Rl @ c[i]
    return pose


def _pose_to_globals(skeleton: Skeleton, pose: Pose):
    A, b = world_transforms(skeleton, pose)
    c = skeleton.centers
    return log_so3(A), b - c + np.einsum("kij,kj->ki", A, c)


def node_distortion(skeleton: Skeleton, pose: Pose) -> float:
    """Sum over support-overlapping node pairs of ||G_i(s) - G_j(s)||^2 at both centers and the midpoint."""
    A, b = world_transforms(skeleton, pose)
    i, j = skeleton.adjacency[:, 0], skeleton.adjacency[:, 1]
    c = skeleton.centers
    total = 0.0
    for s in (c[i], c[j], 0.5 * (c[i] + c[j])):
        d = np.einsum("kab,kb->ka", A[i] - A[j], s) + b[i] - b[j]
        total += float((d * d).sum())
    return total


@dataclass
class SkeletonFit:
    pose: Pose
    energy: float
    iterations: int
    rms_mm: float


def fit_skeleton(target: np.ndarray, skeleton: Skeleton, lam: float = 1e-5, config: SolverConfig | None = None,
                 init: Pose | None = None) -> SkeletonFit:
    """Pose minimizing ||S - K(theta)||^2 + lam * node distortion, Gauss-Newton from the identity.

    The unknowns are the per-node world transforms (a bijective change of
    variables from the local chain), which keeps the Jacobian sparse.
    """
    S = np.asarray(target, dtype=float)
    n = skeleton.n_nodes
    nv = len(skeleton.rest)
    c = skeleton.centers
    V = skeleton.rest
    infl = skeleton.influences
    wts = skeleton.weights
    adj = skeleton.adjacency
    sl = np.sqrt(lam)
    if init is None:
        x0 = np.zeros(6 * n)
    else:
        om, ta = _pose_to_globals(skeleton, init)
        x0 = np.hstack([om, ta]).ravel()

    def fun(x):
        p = x.reshape(n, 6)
        om, ta = p[:, :3], p[:, 3:]
        R = exp_so3(om)
        Jr = right_jacobian(om)
        K = V.copy()
        I, J, B = [], [], []
        rows = 3 * np.arange(nv)
        for s in range(infl.shape[1]):
            i = infl[:, s]
            ok = i >= 0
            ii = np.where(ok, i, 0)
            y = V - c[ii]
            w = np.where(ok, wts[:, s], 0.0)
            K += w[:, None] * (np.einsum("kab,kb->ka", R[ii], y) - y + ta[ii])
            jw = -w[:, None, None] * (R[ii] @ skew(y) @ Jr[ii])
            jt = w[:, None, None] * np.eye(3)[None]
            for blk, off in ((jw, 0), (jt, 3)):
                a, bb, v = block_coo(rows[ok], 6 * ii[ok] + off, blk[ok])
                I.append(a), J.append(bb), B.append(v)
        r = [(K - S).ravel()]
        m = len(adj)
        if m and lam > 0:
            i, j = adj[:, 0], adj[:, 1]
            base = 3 * nv
            for q, s in enumerate((c[i], c[j], 0.5 * (c[i] + c[j]))):
                yi, yj = s - c[i], s - c[j]
                gi = np.einsum("kab,kb->ka", R[i], yi) + c[i] + ta[i]
                gj = np.einsum("kab,kb->ka", R[j], yj) + c[j] + ta[j]
                r.append(sl * (gi - gj).ravel())
                rr = base + 3 * (q * m + np.arange(m))
                blocks = [(-sl * (R[i] @ skew(yi) @ Jr[i]), 6 * i), (sl * np.broadcast_to(np.eye(3), (m, 3, 3)), 6 * i + 3),
                          (sl * (R[j] @ skew(yj) @ Jr[j]), 6 * j), (-sl * np.broadcast_to(np.eye(3), (m, 3, 3)), 6 * j + 3)]
                for blk, col in blocks:
                    a, bb, v = block_coo(rr, col, blk)
                    I.append(a), J.append(bb), B.append(v)
        r = np.concatenate(r)
        Jm = sp.csr_matrix((np.concatenate(B), (np.concatenate(I), np.concatenate(J))), shape=(len(r), 6 * n))
        return r, Jm

    res = least_squares(fun, x0, config or SolverConfig(max_iters=50, grad_tol=1e-9, rel_tol=1e-12))
    p = res.x.reshape(n, 6)
    pose = _globals_to_pose(skeleton, p[:, :3], p[:, 3:])
    rms = float(np.sqrt(np.mean(np.sum((skin(skeleton, pose) - S) ** 2, axis=1))))
    return SkeletonFit(pose, res.energy, res.iterations, rms)


# ----------------------------------------------------------------- latent model


@dataclass
class LatentModel:
    mean: np.ndarray  # (P,)
    basis: np.ndarray  # (P, d), orthonormal columns
    scales: np.ndarray  # (d,) per-mode standard deviations
    explained: np.ndarray = field(default_factory=lambda: np.zeros(0))  # cumulative variance fraction

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def n_params(self) -> int:
        return self.basis.shape[0]

    def decode(self, z) -> np.ndarray:
        return self.mean + self.basis @ (self.scales * np.asarray(z, dtype=float))

    def encode(self, theta) -> np.ndarray:
        s = np.where(self.scales > 0, self.scales, 1.0)
        return np.where(self.scales > 0, (self.basis.T @ (np.asarray(theta, dtype=float) - self.mean)) / s, 0.0)


def fit_latent_model(poses, d: int = 32, skeleton: Skeleton | None = None) -> LatentModel:
    """PCA over root-free packed pose vectors.

    ``poses`` is a list of :class:`Pose` (requires ``skeleton``) or an (m, P)
    array of packed vectors; root transforms are dropped by construction.
    """
    if len(poses) and isinstance(poses[0], Pose):
        if skeleton is None:
            raise ValueError("packing poses needs the skeleton")
        X = np.stack([p.pack(skeleton) for p in poses])
    else:
        X = np.atleast_2d(np.asarray(poses, dtype=float))
    m, P = X.shape
    if m < d or m == 0:
        raise InsufficientData(f"need at least {d} poses, got {m}")
    d = min(d, P)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    basis = Vt[:d].T.copy()
    # deterministic signs: largest-magnitude entry of each mode positive
    piv = np.argmax(np.abs(basis), axis=0)
    sign = np.sign(basis[piv, np.arange(d)])
    basis *= np.where(sign == 0, 1.0, sign)
    var = s**2 / max(m - 1, 1)
    scales = np.sqrt(var[:d])
    total = var.sum()
    explained = np.cumsum(var[:d]) / total if total > 0 else np.ones(d)
    return LatentModel(mean, basis, scales, explained)


# ------------------------------------------------------------------ coarse fit


def _best_per_coord(reg, index: dict):
    """(vertex ids, pixels) of one camera, most confident registration per coordinate."""
    order = np.lexsort((np.arange(len(reg)), -reg.confidence))
    seen = {}
    for j in order:
        key = (int(reg.coords[j, 0]), int(reg.coords[j, 1]))
        k = index.get(key)
        if k is not None and k not in seen:
            seen[k] = reg.pixels[j]
    ks = np.array(sorted(seen), dtype=np.int64)
    return ks, np.array([seen[k] for k in ks]).reshape(-1, 2)


def _observations(registered, cameras, template: TemplateMesh):
    cam_by_id = {c.id: c for c in cameras}
    index = template.coord_index()
    obs = []
    for reg in sorted(registered, key=lambda r: r.camera_id):
        ks, px = _best_per_coord(reg, index)
        if len(ks):
            obs.append((cam_by_id[reg.camera_id], ks, px))
    return obs


@dataclass
class CoarseFit:
    root: np.ndarray
    z: np.ndarray
    rms_px: float
    flag: str
    mesh: np.ndarray
    energies: list = field(default_factory=list)
    iterations: int = 0


def coarse_mesh(skeleton: Skeleton, latent: LatentModel, root, z) -> np.ndarray:
    return skin(skeleton, Pose.unpack(skeleton, latent.decode(z), root))


def coarse_fit(registered, cameras, skeleton: Skeleton, latent: LatentModel, template: TemplateMesh,
               config: SolverConfig | None = None, fd_step: float = 1e-6) -> CoarseFit:
    """Root transform and latent code minimizing the pixel reprojection error of
    the skinned vertices, Levenberg-Marquardt from (identity, 0) with a
    central-difference Jacobian.  Observations are ordered by camera id, so
    the result does not depend on the order of ``registered``."""
    d = latent.dim
    obs = _observations(registered, cameras, template)
    root0, z0 = np.zeros(6), np.zeros(d)
    if not obs:
        return CoarseFit(root0, z0, 0.0, NO_DATA, coarse_mesh(skeleton, latent, root0, z0))
    rows = np.unique(np.concatenate([o[1] for o in obs]))
    pos = {k: i for i, k in enumerate(rows)}
    sel = [np.array([pos[k] for k in o[1]]) for o in obs]

    def residual(x):
        M = skin(skeleton, Pose.unpack(skeleton, latent.decode(x[6:]), x[:6]), rows)
        out = []
        for (cam, _, px), s in zip(obs, sel):
            pix, _ = cam.project_many(M[s])
            out.append((pix - px).ravel())
        return np.concatenate(out)

    def fun(x):
        r = residual(x)
        J = np.empty((len(r), len(x)))
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = fd_step
            J[:, i] = (residual(x + e) - residual(x - e)) / (2 * fd_step)
        return r, sp.csr_matrix(J)

    cfg = config or SolverConfig(max_iters=100, grad_tol=1e-10, rel_tol=1e-14)
    res = least_squares(fun, np.r_[root0, z0], cfg)
    r = residual(res.x)
    rms = float(np.sqrt(np.mean(r.reshape(-1, 2) ** 2 @ np.ones(2))))
    mesh = coarse_mesh(skeleton, latent, res.x[:6], res.x[6:])
    return CoarseFit(res.x[:6].copy(), res.x[6:].copy(), rms, OK, mesh, res.energies, res.iterations)


# ------------------------------------------------------------------ UV driving


@dataclass
class UvSignal:
    """Per-camera pixel offsets on the UV grid; the grid cell of a vertex is its board coordinate."""

    values: np.ndarray  # (U, V, 2C)
    mask: np.ndarray  # (U, V, 2C) bool
    camera_ids: tuple
    frame: int = 0

    @property
    def n_cameras(self) -> int:
        return len(self.camera_ids)

    def valid(self, c: int) -> np.ndarray:
        return self.mask[:, :, 2 * c]


def build_uv_signal(registered, template: TemplateMesh, cameras, coarse: np.ndarray, frame: int = 0) -> UvSignal:
    """Observed pixel minus the projected coarse vertex, written to the vertex's UV cell per camera."""
    cams = sorted(cameras, key=lambda c: c.id)
    U, V = template.board_shape
    C = len(cams)
    values = np.zeros((U, V, 2 * C))
    mask = np.zeros((U, V, 2 * C), bool)
    index = template.coord_index()
    by_cam = {r.camera_id: r for r in registered}
    for c, cam in enumerate(cams):
        reg = by_cam.get(cam.id)
        if reg is None or len(reg) == 0:
            continue
        ks, px = _best_per_coord(reg, index)
        if not len(ks):
            continue
        proj, z = cam.project_many(coarse[ks])
        ok = z > 0
        ks, px, proj = ks[ok], px[ok], proj[ok]
        rc = template.board_coords[ks]
        values[rc[:, 0], rc[:, 1], 2 * c : 2 * c + 2] = px - proj
        mask[rc[:, 0], rc[:, 1], 2 * c : 2 * c + 2] = True
    return UvSignal(values, mask, tuple(c.id for c in cams), frame)


@dataclass
class DriveOutput:
    offsets: np.ndarray
    mesh: np.ndarray
    lifted: np.ndarray  # vertices set directly from rays


def compose_output(coarse: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.asarray(coarse, dtype=float) + np.asarray(offsets, dtype=float)


def bilaplacian(template: TemplateMesh) -> sp.csr_matrix:
    L = cotangent_laplacian(template.vertices, template.triangles)
    m = lumped_mass(template.vertices, template.triangles)
    return (L @ sp.diags(1.0 / m) @ L).tocsr()


def biharmonic_fill(template: TemplateMesh, known: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Solve the discrete biharmonic equation on unknown vertices with known ones fixed."""
    out = np.zeros_like(values, dtype=float)
    out[known] = values[known]
    free = ~known
    if not known.any() or not free.any():
        return out
    B = bilaplacian(template)
    Buu = B[free][:, free].tocsc()
    rhs = -(B[free][:, known] @ values[known])
    out[free] = spla.splu(Buu).solve(np.asarray(rhs).reshape(Buu.shape[0], -1)).reshape(out[free].shape)
    return out


def drive_baseline(signal: UvSignal, template: TemplateMesh, coarse: np.ndarray, cameras) -> DriveOutput:
    """Geometric driving operator: lift observed pixels onto their rays, inpaint the rest.

    A vertex seen by one camera moves to the point of its ray closest to the
    coarse position; a vertex seen by two or more cameras moves to the
    least-squares intersection of its rays.  Offsets of unseen vertices are
    biharmonic interpolants of the lifted ones.
    """
    cam_by_id = {c.id: c for c in cameras}
    n = template.n_vertices
    rc = template.board_coords
    has = rc[:, 0] >= 0
    origins = [[] for _ in range(n)]
    dirs = [[] for _ in range(n)]
    for c, cid in enumerate(signal.camera_ids):
        cam = cam_by_id[cid]
        valid = np.zeros(n, bool)
        valid[has] = signal.valid(c)[rc[has, 0], rc[has, 1]]
        ks = np.flatnonzero(valid)
        if not len(ks):
            continue
        proj, _ = cam.project_many(coarse[ks])
        px = proj + signal.values[rc[ks, 0], rc[ks, 1], 2 * c : 2 * c + 2]
        o, d = backproject_many(cam, px)
        for k, oo, dd in zip(ks, o, d):
            origins[k].append(oo)
            dirs[k].append(dd)
    lifted = np.array([len(o) > 0 for o in origins], dtype=bool)
    offsets = np.zeros((n, 3))
    for k in np.flatnonzero(lifted):
        O, D = np.array(origins[k]), np.array(dirs[k])
        p = None
        if len(O) >= 2:
            try:
                p, _ = least_squares_point(O, D)
            except np.linalg.LinAlgError:
                p = None
        if p is None:
            v = coarse[k] - O[0]
            p = O[0] + (v @ D[0]) * D[0]
        offsets[k] = p - coarse[k]
    offsets = biharmonic_fill(template, lifted, offsets)
    return DriveOutput(offsets, compose_output(coarse, offsets), lifted)
