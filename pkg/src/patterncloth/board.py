"""Color-coded pattern board: generation, verification and window decoding.

A board is a grid of colored cells.  Every 3x3 window is unique up to the
four spatial quarter-turns, and edge-adjacent cells never share a color.
Windows are encoded as base-``n_colors`` integers in row-major order, so the
lexicographic order on color tuples coincides with integer order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DEFAULT_N_COLORS = 7
DEFAULT_CELL_SIZE_MM = 2.7


class GenerationFailed(RuntimeError):
    pass


class DuplicateKey(ValueError):
    pass


def _rotation_perms() -> list[tuple[int, ...]]:
    idx = np.arange(9).reshape(3, 3)
    return [tuple(int(i) for i in np.rot90(idx, k).ravel()) for k in range(4)]


# ROT_PERMS[k][i] is the flat source index of flat position i in rot90(w, k).
ROT_PERMS = _rotation_perms()


@dataclass(frozen=True)
class Board:
    cells: np.ndarray
    n_colors: int = DEFAULT_N_COLORS
    cell_size_mm: float = DEFAULT_CELL_SIZE_MM

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.int8)
        if cells.ndim != 2:
            raise ValueError("board cells must be a 2D grid")
        if self.n_colors < 2:
            raise ValueError("n_colors must be >= 2")
        if cells.size and (cells.min() < 0 or cells.max() >= self.n_colors):
            raise ValueError("color index out of range")
        if self.cell_size_mm <= 0:
            raise ValueError("cell_size_mm must be positive")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    def window(self, row: int, col: int) -> np.ndarray:
        """3x3 window centered on cell (row, col)."""
        if not (1 <= row < self.rows - 1 and 1 <= col < self.cols - 1):
            raise IndexError(f"no interior window at ({row}, {col})")
        return self.cells[row - 1 : row + 2, col - 1 : col + 2]

    def __eq__(self, other):
        if not isinstance(other, Board):
            return NotImplemented
        return (
            self.n_colors == other.n_colors
            and self.cell_size_mm == other.cell_size_mm
            and np.array_equal(self.cells, other.cells)
        )

    __hash__ = None


class CodeKey(NamedTuple):
    canonical: tuple[int, ...]
    rotation: int


def window_code(flat, n_colors: int) -> int:
    code = 0
    for c in flat:
        code = code * n_colors + int(c)
    return code


def decode_code(code: int, n_colors: int) -> tuple[int, ...]:
    out = []
    for _ in range(9):
        code, r = divmod(code, n_colors)
        out.append(r)
    return tuple(reversed(out))


def _canonical_code(flat, n_colors: int) -> tuple[int, int]:
    best = -1
    best_k = 0
    for k, perm in enumerate(ROT_PERMS):
        code = 0
        for i in perm:
            code = code * n_colors + flat[i]
        if best < 0 or code < best:
            best, best_k = code, k
    return best, best_k


def canonical_window(window) -> CodeKey:
    """Canonical form of a 3x3 window over its four quarter-turn rotations.

    ``rotation`` is the smallest k with ``np.rot90(window, k)`` equal to the
    canonical form.
    """
    w = np.asarray(window).reshape(3, 3)
    best = None
    best_k = 0
    for k in range(4):
        t = tuple(int(v) for v in np.rot90(w, k).ravel())
        if best is None or t < best:
            best, best_k = t, k
    return CodeKey(best, best_k)


def rotate_offset(dy: int, dx: int, k: int) -> tuple[int, int]:
    """Map an offset in ``np.rot90(B, k)`` coordinates back to ``B`` coordinates.

    Offsets are (row, col) relative to the window center.
    """
    for _ in range(k % 4):
        dy, dx = dx, -dy
    return dy, dx


@dataclass(frozen=True)
class Codebook:
    entries: dict = field(repr=False)
    n_colors: int = DEFAULT_N_COLORS

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    def get(self, canonical_code: int):
        return self.entries.get(canonical_code)


def _all_window_codes(cells: np.ndarray, n_colors: int) -> np.ndarray:
    """Codes of every interior window under each rotation, shape (4, R-2, C-2)."""
    rows, cols = cells.shape
    c = cells.astype(np.int64)
    flat = np.stack(
        [c[i : rows - 2 + i, j : cols - 2 + j] for i in range(3) for j in range(3)],
        axis=0,
    )
    out = np.empty((4, rows - 2, cols - 2), dtype=np.int64)
    for k, perm in enumerate(ROT_PERMS):
        code = np.zeros((rows - 2, cols - 2), dtype=np.int64)
        for i in perm:
            code = code * n_colors + flat[i]
        out[k] = code
    return out


def canonical_codes(board: Board) -> tuple[np.ndarray, np.ndarray]:
    """Canonical code and canonicalizing rotation of every interior window."""
    if board.rows < 3 or board.cols < 3:
        empty = np.zeros((0, 0), dtype=np.int64)
        return empty, empty
    codes = _all_window_codes(board.cells, board.n_colors)
    rot = np.argmin(codes, axis=0)
    canon = np.take_along_axis(codes, rot[None], axis=0)[0]
    return canon, rot


def build_codebook(board: Board) -> Codebook:
    canon, rot = canonical_codes(board)
    entries: dict[int, tuple[int, int, int]] = {}
    flat_codes = canon.ravel().tolist()
    flat_rot = rot.ravel().tolist()
    inner_cols = board.cols - 2
    for idx, code in enumerate(flat_codes):
        r, c = divmod(idx, inner_cols)
        if code in entries:
            r0, c0, _ = entries[code]
            raise DuplicateKey(f"window at ({r + 1}, {c + 1}) duplicates ({r0}, {c0})")
        entries[code] = (r + 1, c + 1, flat_rot[idx])
    return Codebook(entries=entries, n_colors=board.n_colors)


def lookup(codebook: Codebook, window):
    """Locate a 3x3 window on the board.

    Returns ``(row, col, rotation)`` such that ``window`` equals
    ``np.rot90(board.window(row, col), rotation)``, or None if the window does
    not occur on the board.
    """
    flat = [int(v) for v in np.asarray(window).ravel()]
    code, k_query = _canonical_code(flat, codebook.n_colors)
    hit = codebook.entries.get(code)
    if hit is None:
        return None
    r, c, k_stored = hit
    return r, c, (k_stored - k_query) % 4


def lookup_flat(codebook: Codebook, flat):
    """Same as :func:`lookup` for a flat 9-sequence of python ints."""
    code, k_query = _canonical_code(flat, codebook.n_colors)
    hit = codebook.entries.get(code)
    if hit is None:
        return None
    r, c, k_stored = hit
    return r, c, (k_stored - k_query) % 4


@dataclass
class BoardReport:
    adjacency_violations: list = field(default_factory=list)
    duplicate_windows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.adjacency_violations and not self.duplicate_windows


def verify_board(board: Board) -> BoardReport:
    """Exhaustively check adjacency and 3x3 window uniqueness.

    ``adjacency_violations`` holds ``((r, c), (r2, c2))`` cell pairs;
    ``duplicate_windows`` holds lists of window centers sharing a canonical key.
    """
    cells = board.cells
    report = BoardReport()
    for r, c in np.argwhere(cells[:, 1:] == cells[:, :-1]):
        report.adjacency_violations.append(((int(r), int(c)), (int(r), int(c) + 1)))
    for r, c in np.argwhere(cells[1:, :] == cells[:-1, :]):
        report.adjacency_violations.append(((int(r), int(c)), (int(r) + 1, int(c))))
    canon, _ = canonical_codes(board)
    if canon.size:
        flat = canon.ravel()
        order = np.argsort(flat, kind="stable")
        srt = flat[order]
        dup = np.flatnonzero(srt[1:] == srt[:-1])
        if dup.size:
            groups: dict[int, list] = {}
            inner_cols = board.cols - 2
            for i in np.unique(np.concatenate([dup, dup + 1])):
                idx = int(order[i])
                r, c = divmod(idx, inner_cols)
                groups.setdefault(int(srt[i]), []).append((r + 1, c + 1))
            report.duplicate_windows = [sorted(g) for g in groups.values()]
    return report


def _is_symmetric(flat, n_colors: int) -> bool:
    codes = set()
    for perm in ROT_PERMS:
        codes.add(tuple(flat[i] for i in perm))
    return len(codes) < 4


def generate_board(
    rows: int,
    cols: int,
    n_colors: int = DEFAULT_N_COLORS,
    seed: int = 0,
    cell_size_mm: float = DEFAULT_CELL_SIZE_MM,
    max_steps: int = 1_000_000,
) -> Board:
    """Randomized raster-order assignment with bounded backtracking.

    Each cell draws a shuffled color order; a color is admissible if it differs
    from the left and upper neighbors and, when it completes a 3x3 window, that
    window's canonical key is new and the window has no rotational symmetry
    (symmetric windows would make the decoded orientation ambiguous).
    """
    if rows < 3 or cols < 3:
        raise ValueError("board needs at least 3x3 cells")
    if n_colors < 4:
        raise ValueError("n_colors must be >= 4")
    rng = np.random.default_rng(seed)
    n = rows * cols
    grid = [[-1] * cols for _ in range(rows)]
    used: set[int] = set()
    # per-cell state: remaining candidate colors and the key this cell added
    options: list[list[int] | None] = [None] * n
    added: list[int] = [-1] * n
    perms = ROT_PERMS
    base = n_colors

    pos = 0
    steps = 0
    while pos < n:
        steps += 1
        if steps > max_steps:
            raise GenerationFailed(
                f"backtracking budget of {max_steps} steps exhausted at cell {pos} "
                f"({rows}x{cols}, {n_colors} colors)"
            )
        r, c = divmod(pos, cols)
        if options[pos] is None:
            options[pos] = rng.permutation(n_colors).tolist()
        opts = options[pos]
        placed = False
        while opts:
            color = opts.pop()
            if c > 0 and grid[r][c - 1] == color:
                continue
            if r > 0 and grid[r - 1][c] == color:
                continue
            key = -1
            if r >= 2 and c >= 2:
                grid[r][c] = color
                flat = [grid[r - 2 + i // 3][c - 2 + i % 3] for i in range(9)]
                best = -1
                seen = set()
                for perm in perms:
                    code = 0
                    for i in perm:
                        code = code * base + flat[i]
                    seen.add(code)
                    if best < 0 or code < best:
                        best = code
                if len(seen) < 4 or best in used:
                    grid[r][c] = -1
                    continue
                key = best
                used.add(key)
            grid[r][c] = color
            added[pos] = key
            placed = True
            break
        if placed:
            pos += 1
            continue
        # dead end: reset this cell and revisit the previous one
        options[pos] = None
        grid[r][c] = -1
        pos -= 1
        if pos < 0:
            raise GenerationFailed("no valid board exists for these parameters")
        pr, pc = divmod(pos, cols)
        if added[pos] >= 0:
            used.discard(added[pos])
            added[pos] = -1
        grid[pr][pc] = -1
    return Board(np.array(grid, dtype=np.int8), n_colors=n_colors, cell_size_mm=cell_size_mm)
