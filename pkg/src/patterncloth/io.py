"""Plain-text, JSON and binary artifact formats.

Every float written to a text or JSON artifact uses 9 significant digits, so
files are stable across platforms and ``save(load(f))`` reproduces a
canonical file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .board import Board
from .capture_sim import CENTER, KIND_NAMES, Camera, DetectionSet
from .geometry import TemplateMesh
from .kinematics import LatentModel, Skeleton, UvSignal
from .registration import RegisteredPixels
from .triangulate import RegisteredPointCloud


class MalformedFile(ValueError):
    def __init__(self, path, message: str, line: int | None = None):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def fmt(x: float) -> str:
    s = "%.9g" % float(x)
    return "0" if s == "-0" else s


def round9(obj):
    """Recursively round floats to 9 significant digits (for JSON output)."""
    if isinstance(obj, float):
        return float(fmt(obj))
    if isinstance(obj, np.floating):
        return float(fmt(float(obj)))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return round9(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): round9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round9(v) for v in obj]
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(round9(obj), indent=2, sort_keys=True) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(path, exc.msg, exc.lineno) from exc


def _lines(path):
    text = Path(path).read_text()
    return text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")


def _parse(path, lineno, fn, parts):
    try:
        return fn(parts)
    except (ValueError, IndexError) as exc:
        raise MalformedFile(path, str(exc), lineno) from exc


# ------------------------------------------------------------------------ board


def save_board(board: Board, path) -> None:
    out = [f"{board.rows} {board.cols} {board.n_colors} {fmt(board.cell_size_mm)}"]
    out += [" ".join(str(int(v)) for v in row) for row in board.cells]
    Path(path).write_text("\n".join(out) + "\n")


def load_board(path) -> Board:
    lines = _lines(path)
    if not lines:
        raise MalformedFile(path, "empty file", 1)
    rows, cols, nc, cs = _parse(path, 1, lambda p: (int(p[0]), int(p[1]), int(p[2]), float(p[3])), lines[0].split())
    if len(lines) != rows + 1:
        raise MalformedFile(path, f"expected {rows} grid rows, found {len(lines) - 1}", len(lines))
    cells = np.zeros((rows, cols), dtype=np.int64)
    for r in range(rows):
        vals = _parse(path, r + 2, lambda p: [int(v) for v in p], lines[r + 1].split())
        if len(vals) != cols:
            raise MalformedFile(path, f"expected {cols} values, found {len(vals)}", r + 2)
        if min(vals) < 0 or max(vals) >= nc:
            raise MalformedFile(path, "color index out of range", r + 2)
        cells[r] = vals
    try:
        return Board(cells=cells, n_colors=nc, cell_size_mm=cs)
    except ValueError as exc:
        raise MalformedFile(path, str(exc)) from exc


# ---------------------------------------------------------------------- cameras


def camera_to_dict(c: Camera) -> dict:
    return {"id": int(c.id), "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": int(c.width),
            "height": int(c.height), "R": c.R.tolist(), "t": c.t.tolist()}


def save_cameras(cameras, path) -> None:
    dump_json({"cameras": [camera_to_dict(c) for c in cameras]}, path)


def load_cameras(path) -> list[Camera]:
    data = load_json(path)
    try:
        cams = [Camera(int(d["id"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                       int(d["height"]), np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))
                for d in data["cameras"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(path, f"bad camera record: {exc}") from exc
    return cams


# ------------------------------------------------------------------------ meshes


def save_obj(path, vertices, template: TemplateMesh, write_coords: bool = True) -> None:
    """OBJ with positions, UVs and faces; a ``.coords`` sidecar maps vertex -> (row, col)."""
    out = ["v " + " ".join(fmt(x) for x in v) for v in np.asarray(vertices, dtype=float)]
    out += ["vt " + " ".join(fmt(x) for x in uv) for uv in template.uv]
    out += ["f " + " ".join(f"{i + 1}/{i + 1}" for i in tri) for tri in template.triangles]
    Path(path).write_text("\n".join(out) + "\n")
    if write_coords:
        save_coords(Path(path).with_suffix(".coords"), template.board_coords)


def save_coords(path, coords) -> None:
    Path(path).write_text("".join(f"{k} {int(r)} {int(c)}\n" for k, (r, c) in enumerate(coords)))


def load_coords(path) -> np.ndarray:
    out = []
    for i, line in enumerate(_lines(path)):
        k, r, c = _parse(path, i + 1, lambda p: (int(p[0]), int(p[1]), int(p[2])), line.split())
        if k != i:
            raise MalformedFile(path, "vertex indices must be consecutive", i + 1)
        out.append((r, c))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def load_obj(path):
    """(vertices, uv, triangles) from an OBJ written by :func:`save_obj`."""
    V, T, F = [], [], []
    for i, line in enumerate(_lines(path)):
        p = line.split()
        if not p or p[0].startswith("#"):
            continue
        if p[0] == "v":
            V.append(_parse(path, i + 1, lambda q: [float(x) for x in q[1:4]], p))
        elif p[0] == "vt":
            T.append(_parse(path, i + 1, lambda q: [float(x) for x in q[1:3]], p))
        elif p[0] == "f":
            F.append(_parse(path, i + 1, lambda q: [int(x.split("/")[0]) - 1 for x in q[1:4]], p))
        else:
            raise MalformedFile(path, f"unknown record {p[0]!r}", i + 1)
    V = np.array(V, dtype=float).reshape(-1, 3)
    F = np.array(F, dtype=np.int64).reshape(-1, 3)
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise MalformedFile(path, "face index out of range")
    return V, np.array(T, dtype=float).reshape(-1, 2), F


def save_template(template: TemplateMesh, path) -> None:
    save_obj(path, template.vertices, template)
    meta = {"cell_size_mm": template.cell_size_mm, "board_shape": list(template.board_shape)}
    dump_json(meta, Path(path).with_suffix(".json"))


def load_template(path) -> TemplateMesh:
    V, uv, F = load_obj(path)
    coords = load_coords(Path(path).with_suffix(".coords"))
    meta = load_json(Path(path).with_suffix(".json"))
    if len(coords) != len(V):
        raise MalformedFile(path, "coordinate sidecar does not match vertex count")
    return TemplateMesh(V, F, coords, uv, float(meta["cell_size_mm"]), tuple(meta["board_shape"]))


# ------------------------------------------------------------------------- clouds

PLY_HEADER = [
    "ply",
    "format ascii 1.0",
    "comment frame {frame} active {active}",
    "element vertex {n}",
    "property float x",
    "property float y",
    "property float z",
    "property int row",
    "property int col",
    "property int inliers",
    "property float rms",
    "end_header",
]


def save_cloud(cloud: RegisteredPointCloud, path) -> None:
    head = [h.format(frame=cloud.frame, active=cloud.n_active, n=len(cloud)) for h in PLY_HEADER]
    body = [
        " ".join([fmt(p[0]), fmt(p[1]), fmt(p[2]), str(int(c[0])), str(int(c[1])), str(int(n)), fmt(r)])
        for p, c, n, r in zip(cloud.positions, cloud.coords, cloud.inliers, cloud.rms)
    ]
    Path(path).write_text("\n".join(head + body) + "\n")


def load_cloud(path) -> RegisteredPointCloud:
    lines = _lines(path)
    if len(lines) < len(PLY_HEADER) or lines[0] != "ply":
        raise MalformedFile(path, "not an ASCII PLY cloud", 1)
    frame, active = _parse(path, 3, lambda p: (int(p[2]), int(p[4])), lines[2].split())
    n = _parse(path, 4, lambda p: int(p[2]), lines[3].split())
    body = lines[len(PLY_HEADER) :]
    if len(body) != n:
        raise MalformedFile(path, f"expected {n} points, found {len(body)}", len(lines))
    P, C, N, R = [], [], [], []
    for i, line in enumerate(body):
        p = line.split()
        vals = _parse(path, len(PLY_HEADER) + i + 1,
                      lambda q: ([float(x) for x in q[:3]], (int(q[3]), int(q[4])), int(q[5]), float(q[6])), p)
        if len(p) != 7:
            raise MalformedFile(path, "expected 7 fields", len(PLY_HEADER) + i + 1)
        P.append(vals[0]), C.append(vals[1]), N.append(vals[2]), R.append(vals[3])
    return RegisteredPointCloud(frame, np.array(C).reshape(-1, 2), np.array(P).reshape(-1, 3), np.array(N), np.array(R), active)


# --------------------------------------------------------------------- detections


def save_detections(sets, path) -> None:
    """One record per line: ``t cam kind u v colors gt``; ``-`` marks an empty field."""
    out = []
    for ds in sets:
        for k, p, col, g in zip(ds.kinds, ds.pixels, ds.colors, ds.gt):
            colors = ",".join(str(int(c)) for c in col) if len(col) else "-"
            gt = f"{int(g[0])},{int(g[1])}" if g[0] >= 0 else "-"
            out.append(f"{ds.frame} {ds.camera_id} {KIND_NAMES[k]} {fmt(p[0])} {fmt(p[1])} {colors} {gt}")
    Path(path).write_text("".join(line + "\n" for line in out))


def load_detections(path) -> list[DetectionSet]:
    groups: dict = {}
    for i, line in enumerate(_lines(path)):
        p = line.split()
        if len(p) != 7:
            raise MalformedFile(path, "expected 7 fields", i + 1)

        def rec(q):
            kind = KIND_NAMES.index(q[2])
            colors = tuple(int(c) for c in q[5].split(",")) if q[5] != "-" else ()
            gt = tuple(int(c) for c in q[6].split(",")) if q[6] != "-" else (-1, -1)
            if len(gt) != 2:
                raise ValueError("gt must be row,col")
            return int(q[0]), int(q[1]), kind, float(q[3]), float(q[4]), colors, gt

        t, cam, kind, u, v, colors, gt = _parse(path, i + 1, rec, p)
        if kind == CENTER and not colors:
            raise MalformedFile(path, "center without color candidates", i + 1)
        g = groups.setdefault((t, cam), ([], [], [], []))
        g[0].append(kind), g[1].append((u, v)), g[2].append(colors), g[3].append(gt)
    return [DetectionSet(cam, t, np.array(g[0]), np.array(g[1]).reshape(-1, 2), g[2], np.array(g[3]).reshape(-1, 2))
            for (t, cam), g in groups.items()]


def save_registrations(regs, path) -> None:
    """One record per line: ``t cam u v row col conf``."""
    out = []
    for reg in regs:
        for p, c, q in zip(reg.pixels, reg.coords, reg.confidence):
            out.append(f"{reg.frame} {reg.camera_id} {fmt(p[0])} {fmt(p[1])} {int(c[0])} {int(c[1])} {fmt(q)}")
    Path(path).write_text("".join(line + "\n" for line in out))


def load_registrations(path) -> list[RegisteredPixels]:
    groups: dict = {}
    for i, line in enumerate(_lines(path)):
        p = line.split()
        if len(p) != 7:
            raise MalformedFile(path, "expected 7 fields", i + 1)
        t, cam, u, v, r, c, q = _parse(
            path, i + 1, lambda z: (int(z[0]), int(z[1]), float(z[2]), float(z[3]), int(z[4]), int(z[5]), float(z[6])), p)
        if not 0 < q <= 1:
            raise MalformedFile(path, "confidence outside (0, 1]", i + 1)
        g = groups.setdefault((t, cam), ([], [], []))
        g[0].append((u, v)), g[1].append((r, c)), g[2].append(q)
    return [RegisteredPixels(cam, t, np.array(g[0]), np.array(g[1]), np.array(g[2])) for (t, cam), g in groups.items()]


# ------------------------------------------------------------------ latent model


def save_latent(model: LatentModel, path) -> None:
    """Header (d, param count) as little-endian int64, then mean, column-major
    basis and per-mode scales as little-endian float64."""
    d, P = model.dim, model.n_params
    with open(path, "wb") as f:
        f.write(struct.pack("<qq", d, P))
        f.write(np.asarray(model.mean, dtype="<f8").tobytes())
        f.write(np.asarray(model.basis, dtype="<f8").tobytes(order="F"))
        f.write(np.asarray(model.scales, dtype="<f8").tobytes())


def load_latent(path) -> LatentModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise MalformedFile(path, "truncated header")
    d, P = struct.unpack("<qq", raw[:16])
    need = 16 + 8 * (P + P * d + d)
    if d < 0 or P < 0 or len(raw) != need:
        raise MalformedFile(path, f"expected {need} bytes for d={d}, P={P}, found {len(raw)}")
    data = np.frombuffer(raw[16:], dtype="<f8")
    mean = data[:P].copy()
    basis = data[P : P + P * d].reshape((P, d), order="F").copy()
    scales = data[P + P * d :].copy()
    return LatentModel(mean, basis, scales)


# ---------------------------------------------------------------------- skeleton


def save_skeleton(sk: Skeleton, path) -> None:
    dump_json({"centers": sk.centers, "parent": sk.parent, "node_vertex": sk.node_vertex,
               "influences": sk.influences, "weights": sk.weights, "spacing": list(sk.spacing)}, path)


def load_skeleton(path, template: TemplateMesh) -> Skeleton:
    d = load_json(path)
    try:
        w = np.array(d["weights"], dtype=float)
        w /= w.sum(axis=1, keepdims=True)
        return Skeleton(np.array(d["centers"], dtype=float), np.array(d["parent"]), np.array(d["node_vertex"]),
                        np.array(d["influences"], dtype=np.int64), w, template.vertices.copy(), tuple(d["spacing"]))
    except (KeyError, ValueError) as exc:
        raise MalformedFile(path, str(exc)) from exc


# --------------------------------------------------------------------- UV signal

UV_MAGIC = b"PCUV"


def save_uv_signal(sig: UvSignal, path) -> None:
    U, V, C2 = sig.values.shape
    with open(path, "wb") as f:
        f.write(UV_MAGIC)
        f.write(struct.pack("<qqqq", U, V, C2 // 2, sig.frame))
        f.write(np.asarray(sig.camera_ids, dtype="<i8").tobytes())
        f.write(np.asarray(sig.values, dtype="<f8").tobytes())
        f.write(np.asarray(sig.mask, dtype=np.uint8).tobytes())


def load_uv_signal(path) -> UvSignal:
    raw = Path(path).read_bytes()
    if raw[:4] != UV_MAGIC or len(raw) < 36:
        raise MalformedFile(path, "not a UV signal file")
    U, V, C, frame = struct.unpack("<qqqq", raw[4:36])
    n = U * V * 2 * C
    need = 36 + 8 * C + 8 * n + n
    if len(raw) != need:
        raise MalformedFile(path, f"expected {need} bytes, found {len(raw)}")
    o = 36
    ids = tuple(int(x) for x in np.frombuffer(raw[o : o + 8 * C], dtype="<i8"))
    o += 8 * C
    values = np.frombuffer(raw[o : o + 8 * n], dtype="<f8").reshape(U, V, 2 * C).copy()
    o += 8 * n
    mask = np.frombuffer(raw[o:], dtype=np.uint8).reshape(U, V, 2 * C).astype(bool)
    return UvSignal(values, mask, ids, frame)
