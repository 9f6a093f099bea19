"""Template mesh construction, cotangent Laplacian machinery and spectral augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage
from scipy.sparse.csgraph import connected_components

from .board import Board

COT_CLAMP = 1e-6


class DisconnectedMask(ValueError):
    pass


class SingularSystem(np.linalg.LinAlgError):
    pass


class ConvergenceFailure(RuntimeError):
    pass


@dataclass
class TemplateMesh:
    """Garment template whose vertices sit at active cell centers.

    ``board_coords[k]`` is the (row, col) cell of vertex k, or (-1, -1) for a
    vertex without a cell.  Triangles are wound so that face normals point to
    the printed side, which makes a front-facing view of the board unmirrored.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    board_coords: np.ndarray
    uv: np.ndarray
    cell_size_mm: float = 2.7
    board_shape: tuple[int, int] = (0, 0)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.board_coords = np.asarray(self.board_coords, dtype=np.int64).reshape(-1, 2)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def edges(self) -> np.ndarray:
        if "edges" not in self._cache:
            self._cache["edges"] = mesh_edges(self.triangles)
        return self._cache["edges"]

    def coord_index(self) -> dict:
        """(row, col) -> vertex index."""
        if "coord_index" not in self._cache:
            self._cache["coord_index"] = {
                (int(r), int(c)): k for k, (r, c) in enumerate(self.board_coords) if r >= 0
            }
        return self._cache["coord_index"]

    def neighbors(self) -> list[np.ndarray]:
        if "neighbors" not in self._cache:
            e = self.edges
            adj = sp.coo_matrix(
                (np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                shape=(self.n_vertices, self.n_vertices),
            ).tocsr()
            self._cache["neighbors"] = [adj.indices[adj.indptr[i] : adj.indptr[i + 1]] for i in range(self.n_vertices)]
        return self._cache["neighbors"]

    def with_vertices(self, vertices) -> "TemplateMesh":
        return TemplateMesh(
            vertices=np.asarray(vertices, dtype=float),
            triangles=self.triangles,
            board_coords=self.board_coords,
            uv=self.uv,
            cell_size_mm=self.cell_size_mm,
            board_shape=self.board_shape,
        )


def mesh_edges(triangles: np.ndarray) -> np.ndarray:
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (length = 2 * area)."""
    v = vertices[triangles]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    fn = face_normals(vertices, triangles)
    n = np.zeros_like(vertices, dtype=float)
    for i in range(3):
        np.add.at(n, triangles[:, i], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def cotangent_laplacian(vertices: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """Positive semi-definite cotangent Laplacian L = D - W.

    Edge weights are 0.5 * (cot a + cot b), clamped below at ``COT_CLAMP``.
    """
    V = np.asarray(vertices, dtype=float)
    T = np.asarray(triangles)
    n = len(V)
    I, J, W = [], [], []
    for k in range(3):
        i, j, o = T[:, (k + 1) % 3], T[:, (k + 2) % 3], T[:, k]
        a = V[i] - V[o]
        b = V[j] - V[o]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cot = np.einsum("ij,ij->i", a, b) / np.maximum(cross, 1e-300)
        I.append(i)
        J.append(j)
        W.append(0.5 * cot)
    I = np.concatenate(I)
    J = np.concatenate(J)
    W = np.concatenate(W)
    lo = np.minimum(I, J)
    hi = np.maximum(I, J)
    Wm = sp.coo_matrix((W, (lo, hi)), shape=(n, n)).tocsr()
    Wm.sum_duplicates()
    Wm.data = np.maximum(Wm.data, COT_CLAMP)
    Wm = Wm + Wm.T
    d = np.asarray(Wm.sum(axis=1)).ravel()
    return (sp.diags(d) - Wm).tocsr()


def lumped_mass(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Barycentric lumped mass: a third of each incident triangle's area."""
    area = 0.5 * np.linalg.norm(face_normals(vertices, triangles), axis=1)
    m = np.zeros(len(vertices))
    for i in range(3):
        np.add.at(m, triangles[:, i], area / 3)
    return m


def planar_embedding(rows: int, cols: int, cell_size_mm: float) -> np.ndarray:
    """Flat sheet in the xz-plane, printed side facing -y, rows running down."""
    r, c = np.mgrid[0:rows, 0:cols].astype(float)
    return np.stack([c * cell_size_mm, np.zeros_like(r), -r * cell_size_mm], axis=-1)


def cylinder_embedding(rows: int, cols: int, cell_size_mm: float, radius_mm: float) -> np.ndarray:
    """Sheet wrapped around the z axis with exact cell-size chords between columns.

    Columns advance along the circumference, rows run down the axis and the
    printed side faces outward.
    """
    if 2 * radius_mm <= cell_size_mm:
        raise ValueError("radius too small for the cell size")
    dtheta = 2 * np.arcsin(cell_size_mm / (2 * radius_mm))
    r, c = np.mgrid[0:rows, 0:cols].astype(float)
    theta = (c - (cols - 1) / 2) * dtheta
    return np.stack([radius_mm * np.cos(theta), radius_mm * np.sin(theta), -r * cell_size_mm], axis=-1)


def build_template(board: Board, active_mask=None, rest_embedding=None) -> TemplateMesh:
    """Triangulate the active cells so that cell centers are mesh vertices.

    A 2x2 block of active cells yields two triangles, a block with three active
    cells yields one; no triangle touches an inactive cell.
    """
    rows, cols = board.rows, board.cols
    mask = np.ones((rows, cols), bool) if active_mask is None else np.asarray(active_mask, bool)
    if mask.shape != (rows, cols):
        raise ValueError("mask shape does not match board")
    _, n_comp = ndimage.label(mask)
    if n_comp != 1:
        raise DisconnectedMask(f"active mask has {n_comp} connected components")
    if rest_embedding is None:
        rest_embedding = planar_embedding(rows, cols, board.cell_size_mm)
    emb = np.asarray(rest_embedding, dtype=float)
    if emb.shape != (rows, cols, 3):
        raise ValueError("rest embedding must have shape (rows, cols, 3)")

    index = -np.ones((rows, cols), dtype=np.int64)
    coords = np.argwhere(mask)
    index[coords[:, 0], coords[:, 1]] = np.arange(len(coords))
    vertices = emb[coords[:, 0], coords[:, 1]]

    a = index[:-1, :-1]
    b = index[:-1, 1:]
    d = index[1:, :-1]
    e = index[1:, 1:]
    tris = []
    full = (a >= 0) & (b >= 0) & (d >= 0) & (e >= 0)
    tris.append(np.stack([a[full], d[full], b[full]], axis=1))
    tris.append(np.stack([b[full], d[full], e[full]], axis=1))
    # blocks with exactly one inactive cell: keep the triangle of the other three
    three = ((a >= 0).astype(int) + (b >= 0) + (d >= 0) + (e >= 0)) == 3
    for miss, tri in ((a, (b, d, e)), (b, (a, d, e)), (d, (a, e, b)), (e, (a, d, b))):
        sel = three & (miss < 0)
        if np.any(sel):
            tris.append(np.stack([t[sel] for t in tri], axis=1))
    triangles = np.concatenate(tris).astype(np.int64)
    # raster order of the upper-left cell keeps the triangle list deterministic
    order = np.lexsort((triangles[:, 2], triangles[:, 1], triangles[:, 0]))
    triangles = triangles[order]

    r0, c0 = coords.min(axis=0)
    r1, c1 = coords.max(axis=0)
    u = (coords[:, 1] - c0 + 0.5) / (c1 - c0 + 1)
    v = 1.0 - (coords[:, 0] - r0 + 0.5) / (r1 - r0 + 1)
    return TemplateMesh(
        vertices=vertices,
        triangles=triangles,
        board_coords=coords,
        uv=np.stack([u, v], axis=1),
        cell_size_mm=board.cell_size_mm,
        board_shape=(rows, cols),
    )


def _components(n: int, triangles: np.ndarray) -> np.ndarray:
    e = mesh_edges(triangles)
    g = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    return labels


def laplacian_fill(triangles, rest_vertices, constrained_mask, constrained_positions) -> np.ndarray:
    """Harmonic interpolation of unconstrained vertices (cotangent weights of the rest mesh).

    ``constrained_positions`` is either (n, d) or (n_constrained, d).
    """
    rest_vertices = np.asarray(rest_vertices, dtype=float)
    n = len(rest_vertices)
    mask = np.asarray(constrained_mask, bool)
    pos = np.asarray(constrained_positions, dtype=float)
    if pos.shape[0] == n:
        known = pos[mask]
    else:
        known = pos
    labels = _components(n, triangles)
    covered = np.zeros(labels.max() + 1, bool)
    covered[labels[mask]] = True
    if not covered.all():
        raise SingularSystem(f"{int((~covered).sum())} mesh component(s) without constraints")
    out = np.empty((n,) + known.shape[1:])
    out[mask] = known
    free = ~mask
    if not free.any():
        return out
    L = cotangent_laplacian(rest_vertices, triangles)
    Luu = L[free][:, free].tocsc()
    Luc = L[free][:, mask]
    rhs = -(Luc @ known)
    out[free] = spla.splu(Luu).solve(np.asarray(rhs).reshape(Luu.shape[0], -1)).reshape(out[free].shape)
    return out


@dataclass
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (n_vertices, k), M-orthonormal columns
    mass: np.ndarray


DENSE_EIG_LIMIT = 2500


def lb_eigenbasis(vertices, triangles, k: int) -> SpectralBasis:
    """k smallest generalized eigenpairs of (cotangent L, lumped M)."""
    V = np.asarray(vertices, dtype=float)
    n = len(V)
    if not 1 <= k <= n:
        raise ValueError("k must be in [1, n_vertices]")
    L = cotangent_laplacian(V, triangles)
    m = lumped_mass(V, triangles)
    if n <= DENSE_EIG_LIMIT or k >= n - 1:
        w, phi = scipy.linalg.eigh(L.toarray(), np.diag(m), subset_by_index=[0, k - 1])
    else:
        M = sp.diags(m).tocsc()
        v0 = np.ones(n) / np.sqrt(n)
        try:
            w, phi = spla.eigsh(L.tocsc(), k=k, M=M, sigma=-1e-8, which="LM", v0=v0, maxiter=5000)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(str(exc)) from exc
        order = np.argsort(w)
        w, phi = w[order], phi[:, order]
    # re-normalize and fix signs so results do not depend on the solver path
    norms = np.sqrt(np.einsum("ik,i,ik->k", phi, m, phi))
    phi = phi / norms
    pivot = np.argmax(np.abs(phi) > np.abs(phi).max(axis=0) * (1 - 1e-6), axis=0)
    signs = np.sign(phi[pivot, np.arange(phi.shape[1])])
    signs[signs == 0] = 1
    phi = phi * signs
    w = np.where(np.abs(w) < 1e-12, np.abs(w), w)
    return SpectralBasis(eigenvalues=w, eigenfunctions=phi, mass=m)


@dataclass(frozen=True)
class AugmentParams:
    alpha: float = 50.0
    sigma_mm: float = 20.0
    n_modes: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")


def augment_field(basis: SpectralBasis, params: AugmentParams, amplitude=None, selectors=None):
    """Scalar displacement D = A * sum_n q_n exp(-alpha n) phi_n with n starting at 1.

    Returns (D, A, q).  ``amplitude`` and ``selectors`` override the random draws.
    """
    k = params.n_modes
    if k > basis.eigenfunctions.shape[1]:
        raise ValueError("n_modes exceeds basis size")
    rng = np.random.default_rng(params.seed)
    A = rng.normal(0.0, params.sigma_mm)
    q = rng.integers(0, 2, size=k).astype(float)
    if amplitude is not None:
        A = float(amplitude)
    if selectors is not None:
        q = np.asarray(selectors, dtype=float)
    decay = np.exp(-params.alpha * np.arange(1, k + 1))
    D = A * (basis.eigenfunctions[:, :k] @ (q * decay))
    return D, A, q


def spectral_augment(vertices, triangles, basis: SpectralBasis, params: AugmentParams, amplitude=None, selectors=None):
    """Displace every vertex along its normal by the random spectral field."""
    V = np.asarray(vertices, dtype=float)
    D, _, _ = augment_field(basis, params, amplitude, selectors)
    if not np.any(D):
        return V.copy()
    return V + D[:, None] * vertex_normals(V, triangles)
