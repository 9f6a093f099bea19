"""Lattice reconstruction and board registration of unlabeled keypoint detections.

Per (camera, frame):

1. hetero graph: every center picks, among its nearest corners, the most
   compact four-corner parallelogram centered on it and keeps the corners that
   agree with a least-squares affine cell model;
2. grid graph: centers sharing exactly two corners become lattice neighbors,
   labelled by the step direction in the center's own cell frame; edges whose
   surrounding 4-cycles fail to close are dropped and components get integer
   lattice coordinates, cutting any edge that contradicts them;
3. every node's 3x3 color window is decoded against the codebook, and the
   decoded neighbors vote on each node's identity;
4. identities are propagated to undecodable nodes from registered neighbors
   when the printed color agrees;
5. components with no identity at all (thin strips no 3x3 window fits in)
   are matched as a whole against the board and kept only when the placement
   is unique and chance matches are improbable.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .board import Board, Codebook, lookup_flat, rotate_offset
from .capture_sim import CENTER, CORNER, DetectionSet

# lattice step directions in (x, y) image-like order: +x, +y, -x, -y
STEPS = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]])


@dataclass(frozen=True)
class RegistrationConfig:
    k_nearest: int = 8
    slot_tol: float = 0.25  # diagonal midpoint mismatch, in half-diagonal units
    center_tol: float = 0.4  # center to cell midpoint, in half-diagonal units
    affine_tol: float = 0.25  # affine residual, relative to median corner distance
    step_tol: float = 0.35  # lattice-step rounding tolerance in cell units
    decode_budget: int = 64
    floor_confidence: float = 0.5
    # full confidence needs the center's offset inside its cell to match the
    # neighbors' (smooth for real detections), in half-diagonal units
    geometry_tol: float = 0.12
    extend_rounds: int = 8
    # whole-component matching of undecodable pieces: accepted only when the
    # expected number of chance placements is below this bound
    component_false_rate: float = 1e-4


@dataclass
class HeteroGraph:
    """Bipartite center-corner graph of one detection set.

    ``centers`` / ``corners`` index into the detection set.  Edge e links
    center-node ``edges[e, 0]`` with corner-node ``edges[e, 1]``.  ``frames``
    holds each center's cell axes (ex, ey) in pixels, NaN when the center has
    no valid cell.
    """

    centers: np.ndarray
    corners: np.ndarray
    center_pixels: np.ndarray
    corner_pixels: np.ndarray
    colors: list
    edges: np.ndarray
    residuals: np.ndarray
    frames: np.ndarray
    # center minus cell midpoint (px) and half-diagonal rms length (px); NaN if no cell
    offsets: np.ndarray | None = None
    scales: np.ndarray | None = None
    # centers that chose the same four corners as another center
    contested: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.centers)
        if self.offsets is None:
            self.offsets = np.full((n, 2), np.nan)
        if self.scales is None:
            self.scales = np.full(n, np.nan)
        if self.contested is None:
            self.contested = np.zeros(n, bool)

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    def corner_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_centers) if len(self.edges) else np.zeros(self.n_centers, int)


@dataclass
class GridGraph:
    """Center lattice with per-node step labels.

    ``nbr[i, l]`` is the neighbor of node i one step along direction l of i's
    own cell frame (-1 if none).  Within a connected component, ``coords`` are
    integer (x, y) lattice positions in the frame of the component root and
    ``rot[i]`` turns node i's frame into the root frame.
    """

    hetero: HeteroGraph
    nbr: np.ndarray
    component: np.ndarray
    coords: np.ndarray
    rot: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nbr)

    def edge_list(self) -> np.ndarray:
        i, l = np.nonzero(self.nbr >= 0)
        j = self.nbr[i, l]
        keep = i < j
        return np.stack([i[keep], j[keep]], axis=1)

    def position_index(self) -> dict:
        out = {}
        for i in np.flatnonzero(self.component >= 0):
            out[(int(self.component[i]), int(self.coords[i, 0]), int(self.coords[i, 1]))] = int(i)
        return out


@dataclass
class NodeWindow:
    node: int
    cells: list  # 9 tuples of candidate colors, row-major; () = unknown


@dataclass
class RegisteredPixels:
    """Registered center detections of one (camera, frame), stored column-wise."""

    camera_id: int
    frame: int
    pixels: np.ndarray
    coords: np.ndarray
    confidence: np.ndarray
    det_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        self.det_index = np.asarray(self.det_index, dtype=np.int64).reshape(-1)
        if len(self.det_index) != len(self.pixels):
            self.det_index = -np.ones(len(self.pixels), dtype=np.int64)

    def __len__(self):
        return len(self.pixels)


# ---------------------------------------------------------------- hetero graph


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _empty_hetero(ds: DetectionSet, centers, corners) -> HeteroGraph:
    return HeteroGraph(
        centers=centers,
        corners=corners,
        center_pixels=ds.pixels[centers],
        corner_pixels=ds.pixels[corners],
        colors=[ds.colors[i] for i in centers],
        edges=np.zeros((0, 2), np.int64),
        residuals=np.zeros(0),
        frames=np.full((len(centers), 2, 2), np.nan),
    )


def build_hetero_graph(ds: DetectionSet, config: RegistrationConfig | None = None) -> HeteroGraph:
    cfg = config or RegistrationConfig()
    centers = np.flatnonzero(ds.kinds == CENTER)
    corners = np.flatnonzero(ds.kinds == CORNER)
    graph = _empty_hetero(ds, centers, corners)
    nc, nk = len(centers), len(corners)
    if nc == 0 or nk < 3:
        return graph
    cp = graph.center_pixels
    kp = graph.corner_pixels
    k = min(cfg.k_nearest, nk)
    _, nn = cKDTree(kp).query(cp, k=k)
    nn = nn.reshape(nc, k)
    rel = kp[nn] - cp[:, None, :]  # (nc, k, 2)

    # candidate cells: 4 corners whose two diagonals share a midpoint near the center
    quads = np.array([(q[0], q[i], q[j], q[l]) for q in itertools.combinations(range(k), 4)
                      for i, j, l in ((1, 2, 3), (2, 3, 1), (3, 1, 2))])
    # diagonals (q0, q2) and (q1, q3)
    Q = rel[:, quads]  # (nc, H, 4, 2)
    mid_a = 0.5 * (Q[:, :, 0] + Q[:, :, 2])
    mid_b = 0.5 * (Q[:, :, 1] + Q[:, :, 3])
    ha = 0.5 * (Q[:, :, 0] - Q[:, :, 2])
    hb = 0.5 * (Q[:, :, 1] - Q[:, :, 3])
    la = np.linalg.norm(ha, axis=-1)
    lb = np.linalg.norm(hb, axis=-1)
    area = _cross(ha, hb)
    safe = np.where(np.abs(area) > 1e-12, area, 1e-12)

    def in_cell_frame(v):
        # coordinates of v in the (ha, hb) basis; affine invariant
        return np.stack([_cross(v, hb), _cross(ha, v)], axis=-1) / safe[..., None]

    mismatch = np.linalg.norm(in_cell_frame(mid_a - mid_b), axis=-1)
    offset = np.linalg.norm(in_cell_frame(-0.5 * (mid_a + mid_b)), axis=-1)
    valid = (
        (mismatch <= cfg.slot_tol)
        & (offset <= cfg.center_tol)
        & (np.abs(area) > 0.25 * la * lb)
        & (la < 4 * lb)
        & (lb < 4 * la)
    )
    # among quads centered on the detection (offset measured in the quad's own
    # frame, so sheared lattice quads half a cell off are excluded) the true
    # cell has the shortest diagonals
    key = np.where(valid, (la**2 + lb**2) * (1 + offset), np.inf)
    h = np.argmin(key, axis=1)
    rows = np.arange(nc)
    ok = np.isfinite(key[rows, h])

    # a cell has one center: detections sharing a quad are all suspect
    quad_keys = {}
    for i in np.flatnonzero(ok):
        quad_keys.setdefault(tuple(sorted(nn[i, quads[h[i]]].tolist())), []).append(i)
    contested = np.zeros(nc, bool)
    for members in quad_keys.values():
        if len(members) > 1:
            contested[members] = True

    e_center, e_corner, e_res = [], [], []
    frames = np.full((nc, 2, 2), np.nan)
    offsets = np.full((nc, 2), np.nan)
    scales = np.full(nc, np.nan)
    unit = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    X = np.hstack([unit, np.ones((4, 1))])
    for i in np.flatnonzero(ok):
        cand = nn[i, quads[h[i]]]
        # affine cell model p = t + M u fitted to the four corners
        P = kp[cand]
        sol, *_ = np.linalg.lstsq(X, P, rcond=None)
        res = np.linalg.norm(X @ sol - P, axis=1)
        med = np.median(np.linalg.norm(P - sol[2], axis=1))
        good = res <= cfg.affine_tol * med
        if good.sum() < 3:
            continue
        da, db = sol[0], sol[1]
        if _cross(da, db) < 0:
            da, db = db, da
        # four frame choices differ by quarter turns; keep ex closest to image +x
        opts = [(da, db), (db, -da), (-da, -db), (-db, da)]
        ex_opts = [a + b for a, b in opts]
        j = int(np.argmax([e[0] / np.linalg.norm(e) for e in ex_opts]))
        a, b = opts[j]
        frames[i, 0] = a + b
        frames[i, 1] = b - a
        offsets[i] = cp[i] - sol[2]
        scales[i] = np.sqrt(0.5 * (da @ da + db @ db))
        for c, r in zip(cand[good], res[good]):
            e_center.append(i)
            e_corner.append(c)
            e_res.append(r / med)
    if not e_center:
        return graph
    edges = np.stack([np.array(e_center), np.array(e_corner)], axis=1).astype(np.int64)
    res = np.array(e_res)
    # a lattice corner touches at most four cells: keep its four best-fitting centers
    order = np.lexsort((res, edges[:, 1]))
    edges, res = edges[order], res[order]
    first = np.r_[0, np.flatnonzero(np.diff(edges[:, 1])) + 1]
    rank = np.arange(len(edges)) - np.repeat(first, np.diff(np.r_[first, len(edges)]))
    keep = rank < 4
    edges, res = edges[keep], res[keep]
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    graph.edges = edges[order]
    graph.residuals = res[order]
    has = np.zeros(nc, bool)
    has[graph.edges[:, 0]] = True
    frames[~has] = np.nan
    offsets[~has] = np.nan
    scales[~has] = np.nan
    graph.frames = frames
    graph.offsets = offsets
    graph.scales = scales
    graph.contested = contested
    return graph


# ------------------------------------------------------------------ grid graph


def _step_label(offset, frame, tol):
    """Direction label of a pixel offset in a cell frame, or -1."""
    M = frame.T  # columns ex, ey
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if not np.isfinite(det) or abs(det) < 1e-12:
        return -1, np.inf
    coef = np.linalg.solve(M, offset)
    err = np.abs(coef[:, None] - STEPS.T).sum(axis=0)
    l = int(np.argmin(err))
    if np.linalg.norm(coef - STEPS[l]) > tol:
        return -1, np.inf
    return l, float(np.linalg.norm(coef - STEPS[l]))


def _walk(nbr, rho, i, l):
    """Node one step from i along i-frame direction l, plus the frame change."""
    j = nbr[i, l]
    if j < 0:
        return -1, 0
    return j, rho[i, l]


def build_grid_graph(hetero: HeteroGraph, config: RegistrationConfig | None = None) -> GridGraph:
    cfg = config or RegistrationConfig()
    n = hetero.n_centers
    nbr = -np.ones((n, 4), np.int64)
    rho = np.zeros((n, 4), np.int64)
    E = hetero.edges
    if len(E):
        # center pairs sharing a corner, with their shared-corner count
        by_corner = {}
        for c, k in E.tolist():
            by_corner.setdefault(k, []).append(c)
        shared: dict[tuple[int, int], int] = {}
        for cs in by_corner.values():
            for a, b in itertools.combinations(sorted(cs), 2):
                shared[(a, b)] = shared.get((a, b), 0) + 1
        P = hetero.center_pixels
        F = hetero.frames
        cand = []
        for (a, b), cnt in sorted(shared.items()):
            if cnt != 2:
                continue
            la, ea = _step_label(P[b] - P[a], F[a], cfg.step_tol)
            lb, eb = _step_label(P[a] - P[b], F[b], cfg.step_tol)
            if la < 0 or lb < 0:
                continue
            cand.append((ea + eb, a, b, la, lb))
        cand.sort()
        for e, a, b, la, lb in cand:
            if nbr[a, la] >= 0 or nbr[b, lb] >= 0:
                continue
            nbr[a, la] = b
            nbr[b, lb] = a
            rho[a, la] = (la + 2 - lb) % 4
            rho[b, lb] = (lb + 2 - la) % 4
        _square_filter(nbr, rho)
    comp, coords, rot = _lattice_coords(nbr, rho)
    return GridGraph(hetero=hetero, nbr=nbr, component=comp, coords=coords, rot=rot)


def _square_status(nbr, rho, i, l) -> int:
    """1 if edge (i, l) closes a consistent lattice square, -1 if every
    closed walk around it is inconsistent, 0 if no square can be walked."""
    status = 0
    for turn in (1, 3):
        node, r, d = i, 0, l
        for _ in range(4):
            nxt, dr = _walk(nbr, rho, node, (d - r) % 4)
            if nxt < 0:
                break
            r = (r + dr) % 4
            node = nxt
            d = (d + turn) % 4
        else:
            if node == i and r == 0:
                return 1
            status = -1
    return status


def _square_filter(nbr, rho):
    """Drop lattice edges whose surrounding squares all fail to close."""
    drop = []
    for i, l in zip(*np.nonzero(nbr >= 0)):
        if _square_status(nbr, rho, int(i), int(l)) < 0:
            drop.append((int(i), int(l)))
    for i, l in drop:
        j = nbr[i, l]
        if j < 0:
            continue
        back = np.flatnonzero(nbr[j] == i)
        nbr[i, l] = -1
        nbr[j, back] = -1


def _lattice_coords(nbr, rho):
    n = len(nbr)
    comp = -np.ones(n, np.int64)
    coords = np.zeros((n, 2), np.int64)
    rot = np.zeros(n, np.int64)
    nc = 0
    for root in range(n):
        if comp[root] >= 0 or not (nbr[root] >= 0).any():
            continue
        comp[root] = nc
        seen_pos = {(0, 0): root}
        q = deque([root])
        while q:
            i = q.popleft()
            for l in range(4):
                j = nbr[i, l]
                if j < 0:
                    continue
                d = (l + rot[i]) % 4
                pos = coords[i] + STEPS[d]
                r = (rot[i] + rho[i, l]) % 4
                if comp[j] == nc:
                    if not (coords[j] == pos).all() or rot[j] != r:
                        # inconsistent closure: cut the edge
                        back = np.flatnonzero(nbr[j] == i)
                        nbr[i, l] = -1
                        nbr[j, back] = -1
                    continue
                key = (int(pos[0]), int(pos[1]))
                if key in seen_pos:
                    back = np.flatnonzero(nbr[j] == i)
                    nbr[i, l] = -1
                    nbr[j, back] = -1
                    continue
                comp[j] = nc
                coords[j] = pos
                rot[j] = r
                seen_pos[key] = j
                q.append(j)
        nc += 1
    return comp, coords, rot


# --------------------------------------------------------- windows and decoding


def extract_windows(grid: GridGraph) -> list[NodeWindow]:
    """3x3 color windows in each component's root frame; () marks unknown cells."""
    index = grid.position_index()
    colors = grid.hetero.colors
    out = []
    for i in np.flatnonzero(grid.component >= 0):
        c = int(grid.component[i])
        x0, y0 = grid.coords[i]
        cells = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                j = index.get((c, int(x0 + dx), int(y0 + dy)))
                cells.append(tuple(colors[j]) if j is not None else ())
        out.append(NodeWindow(int(i), cells))
    return out


def decode_window(window: NodeWindow, codebook: Codebook, budget: int = 64) -> set:
    n = codebook.n_colors
    options = [c if c else tuple(range(n)) for c in window.cells]
    total = 1
    for o in options:
        total *= len(o)
        if total > budget:
            return set()
    found = set()
    for combo in itertools.product(*options):
        hit = lookup_flat(codebook, combo)
        if hit is not None:
            found.add(hit)
    return found


def decode(windows, codebook: Codebook, budget: int = 64) -> dict:
    return {w.node: decode_window(w, codebook, budget) for w in windows}


# ---------------------------------------------------------------------- voting


def _implied(coord, dy, dx, rot):
    oy, ox = rotate_offset(dy, dx, rot)
    return coord[0] + oy, coord[1] + ox, rot


def geometry_consistent(grid: GridGraph, i: int, tol: float) -> bool:
    """Does node i sit where its lattice neighbors say a cell center sits?

    Compares the node's center-to-cell-midpoint offset with the median offset
    of its direct neighbors; needs at least two neighbors with a cell and no
    other center claiming the same cell corners.
    """
    hg = grid.hetero
    if hg.contested[i]:
        return False
    nb = grid.nbr[i][grid.nbr[i] >= 0]
    offs = hg.offsets[nb]
    offs = offs[np.isfinite(offs[:, 0])]
    if len(offs) < 2 or not np.isfinite(hg.scales[i]):
        return False
    dev = np.linalg.norm(hg.offsets[i] - np.median(offs, axis=0))
    return bool(dev <= tol * hg.scales[i])


def neighbor_vote(candidates: dict, grid: GridGraph, config: RegistrationConfig | None = None) -> dict:
    """Resolve each node's candidates by consistency with its decoded 8-neighbors.

    Returns node -> (row, col, rotation, confidence).  Confidence is the
    fraction of agreeing voters, where a failed geometry check counts as one
    extra dissenting voter.
    """
    cfg = config or RegistrationConfig()
    index = grid.position_index()
    out = {}
    for i, cands in candidates.items():
        if not cands:
            continue
        c = int(grid.component[i])
        x0, y0 = grid.coords[i]
        voters = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                j = index.get((c, int(x0 + dx), int(y0 + dy)))
                if j is not None and candidates.get(j):
                    voters.append((dy, dx, candidates[j]))
        n_vote = len(voters)
        scored = []
        for cand in sorted(cands):
            r, col, rot = cand
            agree = sum(1 for dy, dx, s in voters if _implied((r, col), dy, dx, rot) in s)
            scored.append((agree, cand))
        scored.sort(key=lambda t: (-t[0], t[1]))
        agree, best = scored[0]
        tie = len(scored) > 1 and scored[1][0] == agree
        geo = geometry_consistent(grid, i, cfg.geometry_tol)
        if len(cands) == 1 and n_vote < 2:
            # too few voters to overturn a singleton decode
            if n_vote == 1 and agree == 1:
                conf = 1.0 if geo else 0.5
            else:
                conf = cfg.floor_confidence
            out[i] = (best[0], best[1], best[2], conf)
        elif n_vote > 0 and 2 * agree > n_vote and not tie:
            out[i] = (best[0], best[1], best[2], agree / (n_vote if geo else n_vote + 1))
    return out


def extend_registration(resolved: dict, grid: GridGraph, board: Board, config: RegistrationConfig | None = None) -> dict:
    """Give identities to unresolved nodes that agree with registered neighbors.

    A node takes the coordinate implied by a strict majority (at least two) of
    its registered 8-neighbors, provided the printed color there is among its
    color candidates.  Such identities never reach full confidence.
    """
    cfg = config or RegistrationConfig()
    index = grid.position_index()
    out = dict(resolved)
    taken = {(v[0], v[1]) for v in out.values()}
    colors = grid.hetero.colors
    nodes = np.flatnonzero(grid.component >= 0)
    for _ in range(cfg.extend_rounds):
        new = {}
        for i in nodes:
            i = int(i)
            if i in out:
                continue
            c = int(grid.component[i])
            x0, y0 = grid.coords[i]
            votes = {}
            n_vote = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dx == 0 and dy == 0:
                        continue
                    j = index.get((c, int(x0 + dx), int(y0 + dy)))
                    if j is None or j not in out:
                        continue
                    r, col, rot, _ = out[j]
                    key = _implied((r, col), -dy, -dx, rot)
                    votes[key] = votes.get(key, 0) + 1
                    n_vote += 1
            if not votes:
                continue
            key, agree = max(sorted(votes.items()), key=lambda kv: kv[1])
            if agree < 2 or 2 * agree <= n_vote:
                continue
            r, col, rot = key
            if not (0 <= r < board.rows and 0 <= col < board.cols):
                continue
            if (r, col) in taken or int(board.cells[r, col]) not in colors[i]:
                continue
            new[i] = (r, col, rot, cfg.floor_confidence * agree / n_vote)
        if not new:
            break
        # two nodes claiming the same cell in one round are both dropped
        claims = {}
        for i, v in new.items():
            claims.setdefault((v[0], v[1]), []).append(i)
        for cell, who in claims.items():
            if len(who) == 1:
                out[who[0]] = new[who[0]]
                taken.add(cell)
    return out


def match_components(resolved: dict, grid: GridGraph, board: Board,
                     config: RegistrationConfig | None = None) -> dict:
    """Place lattice components that have no identity by exhaustive board search.

    Every board offset and rotation is tested; a placement fits when each
    node's printed color is among its candidates and the cell is not already
    claimed.  A unique fit is accepted at floor confidence when the expected
    number of chance fits over the whole board is below
    ``component_false_rate``.
    """
    cfg = config or RegistrationConfig()
    out = dict(resolved)
    taken = np.zeros(board.cells.shape, bool)
    for v in out.values():
        taken[v[0], v[1]] = True
    colors = grid.hetero.colors
    n_colors = int(board.cells.max()) + 1
    n_place = 4 * board.cells.size
    comps = {}
    for i in np.flatnonzero(grid.component >= 0):
        comps.setdefault(int(grid.component[i]), []).append(int(i))
    for c in sorted(comps):
        nodes = comps[c]
        if any(i in out for i in nodes):
            continue
        p = np.array([len(colors[i]) / n_colors for i in nodes])
        if n_place * np.prod(p) >= cfg.component_false_rate:
            continue
        xy = grid.coords[nodes]
        d = xy - xy[0]
        masks = [np.isin(board.cells, list(colors[i])) & ~taken for i in nodes]
        fits = []
        for rot in range(4):
            off = np.array([rotate_offset(int(dy), int(dx), rot) for dx, dy in d])
            lo, hi = off.min(0), off.max(0)
            rows = board.rows - (hi[0] - lo[0])
            cols = board.cols - (hi[1] - lo[1])
            if rows <= 0 or cols <= 0:
                continue
            ok = np.ones((rows, cols), bool)
            for (oy, ox), m in zip(off - lo, masks):
                ok &= m[oy:oy + rows, ox:ox + cols]
            for r, col in np.argwhere(ok):
                fits.append((int(r - lo[0]), int(col - lo[1]), rot, off))
            if len(fits) > 1:
                break
        if len(fits) != 1:
            continue
        r0, c0, rot, off = fits[0]
        for i, (oy, ox) in zip(nodes, off):
            out[i] = (r0 + int(oy), c0 + int(ox), rot, cfg.floor_confidence)
            taken[r0 + oy, c0 + ox] = True
    return out


def _dedupe(resolved: dict) -> dict:
    """At most one node per board cell: keep the most confident, drop ties."""
    by_cell = {}
    for i, v in resolved.items():
        by_cell.setdefault((v[0], v[1]), []).append((v[3], i))
    out = {}
    for cell, lst in by_cell.items():
        lst.sort(reverse=True)
        if len(lst) > 1 and lst[0][0] == lst[1][0]:
            continue
        conf, i = lst[0]
        out[i] = resolved[i]
    return out


def register_detections(ds: DetectionSet, codebook: Codebook, board: Board,
                        config: RegistrationConfig | None = None, extend: bool = True) -> RegisteredPixels:
    """Full registration of one (camera, frame) detection set."""
    cfg = config or RegistrationConfig()
    hetero = build_hetero_graph(ds, cfg)
    grid = build_grid_graph(hetero, cfg)
    windows = extract_windows(grid)
    cands = decode(windows, codebook, cfg.decode_budget)
    resolved = neighbor_vote(cands, grid, cfg)
    if extend:
        resolved = extend_registration(resolved, grid, board, cfg)
        resolved = match_components(resolved, grid, board, cfg)
    resolved = _dedupe(resolved)
    nodes = np.array(sorted(resolved), dtype=np.int64)
    if len(nodes) == 0:
        return RegisteredPixels(ds.camera_id, ds.frame, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    vals = np.array([resolved[i] for i in nodes.tolist()], dtype=float)
    det = hetero.centers[nodes]
    return RegisteredPixels(
        camera_id=ds.camera_id,
        frame=ds.frame,
        pixels=ds.pixels[det],
        coords=vals[:, :2].astype(np.int64),
        confidence=vals[:, 3],
        det_index=det,
    )


@dataclass
class RegistrationStats:
    n_gt_centers: int
    n_registered: int
    n_correct: int
    n_wrong: int
    n_wrong_full_conf: int

    @property
    def recall(self) -> float:
        return self.n_correct / self.n_gt_centers if self.n_gt_centers else 1.0


def registration_stats(reg: RegisteredPixels, ds: DetectionSet) -> RegistrationStats:
    """Compare registrations against the simulator's hidden tags (evaluation only)."""
    gt_centers = int(((ds.kinds == CENTER) & (ds.gt[:, 0] >= 0)).sum())
    if len(reg) == 0:
        return RegistrationStats(gt_centers, 0, 0, 0, 0)
    g = ds.gt[reg.det_index]
    correct = np.all(g == reg.coords, axis=1)
    wrong = ~correct
    return RegistrationStats(
        n_gt_centers=gt_centers,
        n_registered=len(reg),
        n_correct=int(correct.sum()),
        n_wrong=int(wrong.sum()),
        n_wrong_full_conf=int((wrong & (reg.confidence >= 1.0)).sum()),
    )
