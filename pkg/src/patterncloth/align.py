"""Template-to-cloud alignment with per-vertex local rigid transforms.

Every template vertex k owns a fixed orthonormal frame F_k (origin v_k, axes
A_k) and a rigid transform phi_k = (omega_k, tau_k) in that frame.  The world
action is

    phi~_k(x) = v_k + A_k (R(omega_k) A_k^T (x - v_k) + tau_k),

so the deformed vertex is S_k = phi~_k(v_k) = v_k + A_k tau_k and the zero
state reproduces the template.  All energies are sums of squared residuals;
each ``e_*`` function returns (value, gradient) with gradient laid out like
the state vector [omega_k, tau_k] per vertex.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import TemplateMesh, laplacian_fill, vertex_normals
from .rotations import exp_so3, log_so3, right_jacobian, skew
from .solver import SolverConfig, block_coo, least_squares
from .triangulate import RegisteredPointCloud

log = logging.getLogger(__name__)


@dataclass
class LocalFrames:
    origins: np.ndarray  # (n, 3) rest positions v_k
    axes: np.ndarray  # (n, 3, 3) columns: tangent, bitangent, normal


def local_frames(template: TemplateMesh) -> LocalFrames:
    """Normal plus dominant-edge tangent, orthonormalized (Gram-Schmidt)."""
    V = template.vertices
    n = vertex_normals(V, template.triangles)
    E = template.edges
    vec = V[E[:, 1]] - V[E[:, 0]]
    length = np.linalg.norm(vec, axis=1)
    # longest incident edge per vertex (first edge index on ties), pointing away from the vertex
    a = np.r_[E[:, 0], E[:, 1]]
    d = np.r_[vec, -vec]
    ln = np.r_[length, length]
    order = np.lexsort((-np.arange(len(a)), ln, a))
    last = np.r_[a[order][1:] != a[order][:-1], True]
    tan = np.zeros_like(V)
    tan[a[order][last]] = d[order][last]
    t = tan - np.einsum("ij,ij->i", tan, n)[:, None] * n
    bad = np.linalg.norm(t, axis=1) < 1e-12
    if bad.any():
        helper = np.where(np.abs(n[bad, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
        t[bad] = helper - np.einsum("ij,ij->i", helper, n[bad])[:, None] * n[bad]
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return LocalFrames(origins=V.copy(), axes=np.stack([t, b, n], axis=2))


@dataclass
class DeformationState:
    omega: np.ndarray
    tau: np.ndarray
    frame: int = 0

    @classmethod
    def zeros(cls, n: int, frame: int = 0) -> "DeformationState":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), frame)

    @classmethod
    def from_vector(cls, x: np.ndarray, frame: int = 0) -> "DeformationState":
        x = np.asarray(x, dtype=float).reshape(-1, 6)
        return cls(x[:, :3].copy(), x[:, 3:].copy(), frame)

    def vector(self) -> np.ndarray:
        return np.hstack([self.omega, self.tau]).ravel()

    def copy(self) -> "DeformationState":
        return DeformationState(self.omega.copy(), self.tau.copy(), self.frame)


def deform(frames: LocalFrames, state: DeformationState) -> np.ndarray:
    """Vertex positions S(phi); the zero state returns the rest positions bitwise."""
    if not np.any(state.tau):
        return frames.origins.copy()
    return frames.origins + np.einsum("kij,kj->ki", frames.axes, state.tau)


def world_transforms(frames: LocalFrames, state: DeformationState):
    """(R~_k, t~_k) with phi~_k(x) = R~_k x + t~_k."""
    A = frames.axes
    Rw = A @ exp_so3(state.omega) @ np.transpose(A, (0, 2, 1))
    t = frames.origins + np.einsum("kij,kj->ki", A, state.tau) - np.einsum("kij,kj->ki", Rw, frames.origins)
    return Rw, t


def apply_local(frames: LocalFrames, state: DeformationState, k, x) -> np.ndarray:
    """phi~_k(x) for index arrays k and points x."""
    A = frames.axes[k]
    y = np.einsum("kji,kj->ki", A, x - frames.origins[k])
    ry = np.einsum("kij,kj->ki", exp_so3(state.omega[k]), y)
    return frames.origins[k] + np.einsum("kij,kj->ki", A, ry + state.tau[k])


def rigid_state(frames: LocalFrames, R: np.ndarray, t: np.ndarray) -> DeformationState:
    """State whose every phi~_k equals the world motion x -> R x + t."""
    A = frames.axes
    At = np.transpose(A, (0, 2, 1))
    Rl = At @ R[None] @ A
    v = frames.origins
    tau = np.einsum("kij,kj->ki", At, v @ R.T + t - v)
    return DeformationState(log_so3(Rl), tau)


# ------------------------------------------------------------------ residuals


@dataclass
class Residual:
    r: np.ndarray
    J: sp.csr_matrix

    def value_grad(self):
        return float(self.r @ self.r), 2.0 * (self.J.T @ self.r)


def position_residual(frames: LocalFrames, state: DeformationState, targets: np.ndarray, idx, weight: float = 1.0):
    """r_k = sqrt(w) (S_k - T_k) for k in idx."""
    idx = np.asarray(idx, dtype=np.int64)
    n = len(frames.origins)
    sw = np.sqrt(weight)
    S = frames.origins[idx] + np.einsum("kij,kj->ki", frames.axes[idx], state.tau[idx])
    r = sw * (S - targets[idx]).ravel()
    I, J, V = block_coo(3 * np.arange(len(idx)), 6 * idx + 3, sw * frames.axes[idx])
    return Residual(r, sp.csr_matrix((V, (I, J)), shape=(3 * len(idx), 6 * n)))


def _edge_samples(frames: LocalFrames, edges: np.ndarray):
    v = frames.origins
    k, l = edges[:, 0], edges[:, 1]
    s = np.stack([v[k], v[l], 0.5 * (v[k] + v[l])], axis=1)  # (m, 3, 3)
    return k, l, s


def dist_residual(frames: LocalFrames, state: DeformationState, edges: np.ndarray, weight: float = 1.0):
    """phi~_k(s) - phi~_l(s) at the endpoints and midpoint of every edge."""
    n = len(frames.origins)
    sw = np.sqrt(weight)
    k, l, s = _edge_samples(frames, edges)
    m = len(k)
    kk = np.repeat(k, 3)
    ll = np.repeat(l, 3)
    ss = s.reshape(-1, 3)
    A_k, A_l = frames.axes[kk], frames.axes[ll]
    yk = np.einsum("nji,nj->ni", A_k, ss - frames.origins[kk])
    yl = np.einsum("nji,nj->ni", A_l, ss - frames.origins[ll])
    Rk = exp_so3(state.omega[kk])
    Rl = exp_so3(state.omega[ll])
    pk = frames.origins[kk] + np.einsum("nij,nj->ni", A_k, np.einsum("nij,nj->ni", Rk, yk) + state.tau[kk])
    pl = frames.origins[ll] + np.einsum("nij,nj->ni", A_l, np.einsum("nij,nj->ni", Rl, yl) + state.tau[ll])
    r = sw * (pk - pl).ravel()
    # d/domega (R y) = -R [y]_x J_r(omega)
    Jwk = -A_k @ Rk @ skew(yk) @ right_jacobian(state.omega[kk])
    Jwl = A_l @ Rl @ skew(yl) @ right_jacobian(state.omega[ll])
    rows = 3 * np.arange(3 * m)
    blocks = np.concatenate([Jwk, A_k, Jwl, -A_l]) * sw
    cols = np.concatenate([6 * kk, 6 * kk + 3, 6 * ll, 6 * ll + 3])
    I, J, V = block_coo(np.tile(rows, 4), cols, blocks)
    return Residual(r, sp.csr_matrix((V, (I, J)), shape=(9 * m, 6 * n)))


def stack(residuals) -> Residual:
    return Residual(np.concatenate([q.r for q in residuals]), sp.vstack([q.J for q in residuals]).tocsr())


# --------------------------------------------------------------------- energies


@dataclass
class AlignmentContext:
    P: np.ndarray  # filled target positions (n, 3)
    detected: np.ndarray  # omega mask
    cell_size_mm: float = 2.7
    scan: np.ndarray | None = None


def e_det(state: DeformationState, frames: LocalFrames, ctx: AlignmentContext):
    n = len(frames.origins)
    return position_residual(frames, state, ctx.P, np.arange(n)).value_grad()


def e_dist(state: DeformationState, frames: LocalFrames, edges: np.ndarray):
    return dist_residual(frames, state, edges).value_grad()


def pull_targets(S_prev: np.ndarray, triangles: np.ndarray, eps_mm: float) -> np.ndarray:
    return S_prev - eps_mm * vertex_normals(S_prev, triangles)


def e_pull(state: DeformationState, frames: LocalFrames, ctx: AlignmentContext, S_prev: np.ndarray,
           triangles: np.ndarray, eps_mm: float | None = None):
    eps = 0.5 * ctx.cell_size_mm if eps_mm is None else eps_mm
    T = pull_targets(S_prev, triangles, eps)
    return position_residual(frames, state, T, np.flatnonzero(~ctx.detected)).value_grad()


def reduced_icp(S: np.ndarray, R: np.ndarray, max_dist_mm: float):
    """Closest-template-vertex association from scan points, reduced to the
    nearest scan point per template vertex and cut at ``max_dist_mm``.

    Returns (targets (n, 3), mask (n,), distances (n,)).
    """
    S = np.asarray(S, dtype=float)
    R = np.asarray(R, dtype=float).reshape(-1, 3)
    n = len(S)
    targets = np.zeros((n, 3))
    dist = np.full(n, np.inf)
    mask = np.zeros(n, bool)
    if len(R) == 0:
        return targets, mask, dist
    d, idx = cKDTree(S).query(R)
    order = np.lexsort((np.arange(len(R)), d))
    for j in order:
        k = idx[j]
        if not mask[k] and d[j] <= max_dist_mm:
            mask[k] = True
            targets[k] = R[j]
            dist[k] = d[j]
    return targets, mask, dist


def e_recon(state: DeformationState, frames: LocalFrames, ctx: AlignmentContext, targets, mask):
    idx = np.flatnonzero(mask & ~ctx.detected)
    return position_residual(frames, state, targets, idx).value_grad()


def smooth_targets(S_prev, S_cur, S_next) -> np.ndarray:
    return 0.25 * (S_prev + 2.0 * S_cur + S_next)


def e_smooth(state: DeformationState, frames: LocalFrames, ctx: AlignmentContext, S_prev, S_cur, S_next):
    T = smooth_targets(S_prev, S_cur, S_next)
    return position_residual(frames, state, T, np.flatnonzero(~ctx.detected)).value_grad()


# ----------------------------------------------------------------- optimization


@dataclass(frozen=True)
class AlignWeights:
    det: float = 1.0
    dist: float = 0.5
    pull: float = 0.2
    recon: float = 1.0
    smooth: float = 0.5
    eps_cells: float = 0.5
    icp_tau_cells: float = 3.0
    prune_factor: float = 3.0
    prune_floor_mm: float = 1.0
    pull_rounds: int = 5
    icp_rounds: int = 3
    max_iters: int = 50
    grad_tol: float = 1e-6
    rel_tol: float = 1e-4


def _solve(frames, state, active, build, weights: AlignWeights):
    """Minimize the stacked residuals over the transforms of ``active`` vertices."""
    cols = (6 * np.flatnonzero(active)[:, None] + np.arange(6)).ravel()
    base = state.vector()
    every = len(cols) == len(base)

    def fun(x):
        full = base.copy()
        full[cols] = x
        res = build(DeformationState.from_vector(full, state.frame))
        return res.r, (res.J if every else res.J[:, cols])

    result = least_squares(fun, base[cols], SolverConfig(max_iters=weights.max_iters, grad_tol=weights.grad_tol, rel_tol=weights.rel_tol))
    full = base.copy()
    full[cols] = result.x
    return DeformationState.from_vector(full, state.frame), result


def arap_init(template: TemplateMesh, frames: LocalFrames, P: np.ndarray) -> DeformationState:
    """Per-vertex best rotation of the rest 1-ring onto the target 1-ring (Kabsch)."""
    V = frames.origins
    n = len(V)
    E = template.edges
    H = np.zeros((n, 3, 3))
    for a, b in ((E[:, 0], E[:, 1]), (E[:, 1], E[:, 0])):
        np.add.at(H, a, (V[b] - V[a])[:, :, None] * (P[b] - P[a])[:, None, :])
    U, _, Vt = np.linalg.svd(H)
    D = np.ones((n, 3))
    D[:, 2] = np.sign(np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))))
    D[D[:, 2] == 0, 2] = 1.0
    Rw = np.transpose(Vt, (0, 2, 1)) @ (D[:, :, None] * np.transpose(U, (0, 2, 1)))
    A = frames.axes
    At = np.transpose(A, (0, 2, 1))
    Rl = At @ Rw @ A
    tau = np.einsum("kij,kj->ki", At, P - V)
    return DeformationState(log_so3(Rl), tau)


def fill_targets(template: TemplateMesh, cloud: RegisteredPointCloud):
    """Detected mask and Laplacian-filled target mesh P for one cloud."""
    n = template.n_vertices
    index = template.coord_index()
    detected = np.zeros(n, bool)
    P = np.zeros((n, 3))
    for (r, c), p in zip(cloud.coords.tolist(), cloud.positions):
        k = index.get((r, c))
        if k is not None:
            detected[k] = True
            P[k] = p
    if not detected.any():
        raise ValueError("cloud has no point on the template")
    P = laplacian_fill(template.triangles, template.vertices, detected, P)
    return P, detected


@dataclass
class AlignResult:
    state: DeformationState
    mesh: np.ndarray
    detected: np.ndarray
    pruned: np.ndarray
    P: np.ndarray
    log: dict = field(default_factory=dict)


def freeze(frames: LocalFrames, state: DeformationState, P: np.ndarray, detected: np.ndarray) -> DeformationState:
    out = state.copy()
    A = frames.axes[detected]
    out.tau[detected] = np.einsum("kji,kj->ki", A, P[detected] - frames.origins[detected])
    return out


def align_frame(template: TemplateMesh, frames: LocalFrames, cloud: RegisteredPointCloud, scan: np.ndarray | None = None,
                weights: AlignWeights | None = None) -> AlignResult:
    """Stages: (A) data + distortion fit from an ARAP start, outlier pruning and
    freezing of detected vertices; (B) pulling rounds on the rest; (C) scan
    fitting on the rest when a scan is given."""
    w = weights or AlignWeights()
    n = template.n_vertices
    E = template.edges
    s = template.cell_size_mm
    stage_log = {"frame": int(cloud.frame)}
    P, detected = fill_targets(template, cloud)
    state = arap_init(template, frames, P)
    every = np.ones(n, bool)

    def stage_a(state, P):
        def build(st):
            return stack([
                position_residual(frames, st, P, np.arange(n), w.det),
                dist_residual(frames, st, E, w.dist),
            ])
        return _solve(frames, state, every, build, w)

    state, res = stage_a(state, P)
    stage_log["A"] = {"iterations": res.iterations, "energy": res.energy, "stop": res.reason}
    S = deform(frames, state)
    resid = np.linalg.norm(S - P, axis=1)
    thr = max(w.prune_factor * float(np.median(resid[detected])), w.prune_floor_mm)
    pruned = detected & (resid > thr)
    stage_log["pruned"] = int(pruned.sum())
    stage_log["prune_threshold_mm"] = thr
    if pruned.any():
        detected = detected & ~pruned
        keep = RegisteredPointCloud(cloud.frame, template.board_coords[detected], P[detected],
                                    np.zeros(int(detected.sum())), np.zeros(int(detected.sum())), cloud.n_active)
        P, detected = fill_targets(template, keep)
        state, res = stage_a(state, P)
        stage_log["A_refit"] = {"iterations": res.iterations, "energy": res.energy}
    state = freeze(frames, state, P, detected)
    free = ~detected

    eps = w.eps_cells * s
    stage_log["B"] = []
    for _ in range(w.pull_rounds):
        S_prev = deform(frames, state)
        T = pull_targets(S_prev, template.triangles, eps)
        idx = np.flatnonzero(free)

        def build(st, T=T, idx=idx):
            return stack([position_residual(frames, st, T, idx, w.pull), dist_residual(frames, st, E, w.dist)])

        state, res = _solve(frames, state, free, build, w)
        stage_log["B"].append({"iterations": res.iterations, "energy": res.energy})

    if scan is not None and len(scan):
        stage_log["C"] = []
        for _ in range(w.icp_rounds):
            S = deform(frames, state)
            T, m, _ = reduced_icp(S, scan, w.icp_tau_cells * s)
            idx = np.flatnonzero(m & free)

            def build(st, T=T, idx=idx):
                return stack([position_residual(frames, st, T, idx, w.recon), dist_residual(frames, st, E, w.dist)])

            state, res = _solve(frames, state, free, build, w)
            stage_log["C"].append({"iterations": res.iterations, "energy": res.energy, "matched": int(len(idx))})

    mesh = deform(frames, state)
    mesh[detected] = P[detected]
    return AlignResult(state=state, mesh=mesh, detected=detected, pruned=pruned, P=P, log=stage_log)


@dataclass
class AlignedSequence:
    states: list
    meshes: list
    detected: list
    logs: list = field(default_factory=list)


def acceleration(meshes, masks) -> float:
    """Mean ||S_t - (S_{t-1} + S_{t+1}) / 2|| over interior frames and non-detected vertices."""
    vals = []
    for t in range(1, len(meshes) - 1):
        a = meshes[t] - 0.5 * (meshes[t - 1] + meshes[t + 1])
        m = ~masks[t]
        if m.any():
            vals.append(np.linalg.norm(a[m], axis=1))
    return float(np.mean(np.concatenate(vals))) if vals else 0.0


def temporal_refine(template: TemplateMesh, frames: LocalFrames, seq: AlignedSequence, weights: AlignWeights | None = None,
                    passes: int = 3, scans=None) -> AlignedSequence:
    """Jacobi-style passes: each frame's free vertices are re-solved against the
    previous pass's neighbor meshes; detected vertices are left untouched."""
    w = weights or AlignWeights()
    E = template.edges
    s = template.cell_size_mm
    states = [st.copy() for st in seq.states]
    meshes = [m.copy() for m in seq.meshes]
    logs = list(seq.logs)
    T = len(states)
    for p in range(passes):
        prev = meshes
        new_states, new_meshes = [], []
        for t in range(T):
            free = ~seq.detected[t]
            S_prev = prev[t - 1] if t > 0 else prev[t]
            S_next = prev[t + 1] if t < T - 1 else prev[t]
            target = smooth_targets(S_prev, prev[t], S_next)
            idx = np.flatnonzero(free)
            icp = None
            if scans is not None and scans[t] is not None:
                Tr, m, _ = reduced_icp(prev[t], scans[t], w.icp_tau_cells * s)
                icp = (Tr, np.flatnonzero(m & free))

            def build(st, target=target, idx=idx, icp=icp):
                terms = [position_residual(frames, st, target, idx, w.smooth), dist_residual(frames, st, E, w.dist)]
                if icp is not None:
                    terms.append(position_residual(frames, st, icp[0], icp[1], w.recon))
                return stack(terms)

            st, res = _solve(frames, states[t], free, build, w)
            mesh = deform(frames, st)
            mesh[seq.detected[t]] = prev[t][seq.detected[t]]
            new_states.append(st)
            new_meshes.append(mesh)
            logs.append({"pass": p, "frame": t, "iterations": res.iterations, "energy": res.energy})
        states, meshes = new_states, new_meshes
    return AlignedSequence(states=states, meshes=meshes, detected=list(seq.detected), logs=logs)
