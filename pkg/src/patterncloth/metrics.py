"""Evaluation measurements: coverage, correspondence drift, geodesic distortion,
Chamfer and mean Euclidean distances."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .geometry import TemplateMesh, mesh_edges, vertex_normals


def coverage(cloud, template: TemplateMesh) -> float:
    """Fraction of active cells with a triangulated point."""
    n = int((template.board_coords[:, 0] >= 0).sum())
    if n == 0:
        return 0.0
    index = template.coord_index()
    hit = {(int(r), int(c)) for r, c in np.asarray(cloud.coords).reshape(-1, 2)}
    return sum(1 for k in hit if k in index) / n


def correspondence_drift(tracked, gt, triangles, fps: float, masks=None) -> float:
    """Mean tangential offset of tracked points from their true material points, times fps.

    ``tracked`` and ``gt`` are (T, n, 3) positions of the same material points;
    the offset is projected onto the tangent plane of the ground-truth surface.
    ``masks`` optionally restricts each frame to the tracked vertices.
    """
    tracked = np.asarray(tracked, dtype=float)
    gt = np.asarray(gt, dtype=float)
    vals = []
    for t in range(len(gt)):
        e = tracked[t] - gt[t]
        n = vertex_normals(gt[t], triangles)
        tan = e - np.einsum("ij,ij->i", e, n)[:, None] * n
        d = np.linalg.norm(tan, axis=1)
        if masks is not None:
            d = d[np.asarray(masks[t], bool)]
        if len(d):
            vals.append(d)
    if not vals:
        return 0.0
    return float(np.mean(np.concatenate(vals)) * fps)


def shortcut_graph(triangles: np.ndarray, n: int) -> np.ndarray:
    """Vertex pairs joined by an edge or by a chord across one ring (graph distance <= 2)."""
    e = mesh_edges(triangles)
    A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)).tocsr()
    A2 = (A + A @ A).tocoo()
    sel = A2.row < A2.col
    return np.stack([A2.row[sel], A2.col[sel]], axis=1)


def _graph(vertices, pairs, n):
    w = np.linalg.norm(vertices[pairs[:, 0]] - vertices[pairs[:, 1]], axis=1)
    # exact zero lengths would vanish from the sparse graph
    w = np.maximum(w, 1e-300)
    return sp.coo_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(n, n)).tocsr()


def sample_pairs(n: int, n_pairs: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, size=n_pairs)
    b = rng.integers(0, n - 1, size=n_pairs)
    b = b + (b >= a)
    return np.stack([a, b], axis=1)


def pair_geodesics(vertices, triangles, pairs) -> np.ndarray:
    """Approximate geodesic distances: Dijkstra over edges plus one-ring chords."""
    V = np.asarray(vertices, dtype=float)
    n = len(V)
    G = _graph(V, shortcut_graph(triangles, n), n)
    src, inv = np.unique(pairs[:, 0], return_inverse=True)
    D = dijkstra(G, directed=False, indices=src)
    return D[inv, pairs[:, 1]]


def geodesic_distortion(mesh, reference, triangles, n_pairs: int = 1000, seed: int = 0, return_scale: bool = False):
    """Mean |d_geo(mesh; a, b) - d_geo(reference; a, b)| over sampled vertex pairs."""
    mesh = np.asarray(mesh, dtype=float)
    pairs = sample_pairs(len(mesh), n_pairs, seed)
    d1 = pair_geodesics(mesh, triangles, pairs)
    d2 = pair_geodesics(reference, triangles, pairs)
    ok = np.isfinite(d1) & np.isfinite(d2)
    value = float(np.mean(np.abs(d1[ok] - d2[ok]))) if ok.any() else 0.0
    if return_scale:
        return value, float(np.mean(d2[ok])) if ok.any() else 0.0
    return value


def chamfer(A, B) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        return 0.0
    da, _ = cKDTree(B).query(A)
    db, _ = cKDTree(A).query(B)
    return float(0.5 * (da.mean() + db.mean()))


def mean_euclidean(A, B) -> float:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError("mean Euclidean distance needs shared topology")
    return float(np.linalg.norm(A - B, axis=-1).mean())


@dataclass
class MetricReport:
    coverage: list = field(default_factory=list)
    chamfer_mm: list = field(default_factory=list)
    mean_euclidean_mm: list = field(default_factory=list)
    geodesic_distortion_mm: list = field(default_factory=list)
    drift_mm_per_s: float | None = None
    n_pairs: int = 1000

    def aggregate(self) -> dict:
        out = {}
        for key in ("coverage", "chamfer_mm", "mean_euclidean_mm", "geodesic_distortion_mm"):
            vals = getattr(self, key)
            out[key] = float(np.mean(vals)) if vals else None
        out["drift_mm_per_s"] = self.drift_mm_per_s
        return out

    def validate(self):
        for key in ("coverage", "chamfer_mm", "mean_euclidean_mm", "geodesic_distortion_mm"):
            v = np.asarray(getattr(self, key), dtype=float)
            if not (np.all(np.isfinite(v)) and np.all(v >= 0)):
                raise ValueError(f"{key} holds negative or non-finite values")
        if self.drift_mm_per_s is not None and not (np.isfinite(self.drift_mm_per_s) and self.drift_mm_per_s >= 0):
            raise ValueError("drift must be finite and nonnegative")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d


def evaluate_sequence(meshes, gt, template: TemplateMesh, fps: float, clouds=None, n_pairs: int = 1000,
                      seed: int = 0) -> MetricReport:
    rep = MetricReport(n_pairs=n_pairs)
    tri = template.triangles
    for t, (m, g) in enumerate(zip(meshes, gt)):
        if clouds is not None:
            rep.coverage.append(coverage(clouds[t], template))
        rep.chamfer_mm.append(chamfer(m, g))
        rep.mean_euclidean_mm.append(mean_euclidean(m, g))
        rep.geodesic_distortion_mm.append(geodesic_distortion(m, g, tri, n_pairs, seed))
    rep.drift_mm_per_s = correspondence_drift(np.asarray(meshes), np.asarray(gt), tri, fps)
    rep.validate()
    return rep
