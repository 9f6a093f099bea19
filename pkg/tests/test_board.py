from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patterncloth.board import (
    Board, DuplicateKey, GenerationFailed, build_codebook, canonical_window, decode_code, generate_board,
    lookup, rotate_offset, verify_board, window_code,
)

windows = st.lists(st.integers(0, 6), min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))


@given(windows, st.integers(0, 3))
def test_canonical_window_is_rotation_invariant(w, k):
    a = canonical_window(w)
    b = canonical_window(np.rot90(w, k))
    assert a.canonical == b.canonical
    assert np.array_equal(np.rot90(w, a.rotation).ravel(), a.canonical)


@given(st.lists(st.integers(0, 6), min_size=9, max_size=9))
def test_code_round_trip(flat):
    assert list(decode_code(window_code(flat, 7), 7)) == flat


@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 3))
def test_rotate_offset_matches_rot90(dy, dx, k):
    # an offset read in rot90(B, k) points at the same cell as the returned offset in B
    B = np.arange(49).reshape(7, 7)
    Bk = np.rot90(B, k)
    oy, ox = rotate_offset(dy, dx, k)
    assert Bk[3 + dy, 3 + dx] == B[3 + oy, 3 + ox]


def test_generated_board_verifies(small_board):
    rep = verify_board(small_board)
    assert rep.ok
    assert small_board.cells.shape == (20, 24)


def test_generation_is_seeded():
    assert generate_board(10, 10, seed=7) == generate_board(10, 10, seed=7)
    assert generate_board(10, 10, seed=7) != generate_board(10, 10, seed=8)


def test_every_window_looks_up_under_rotation(small_board, small_codebook):
    b = small_board
    assert small_codebook.n_entries == (b.rows - 2) * (b.cols - 2)
    for r in range(1, b.rows - 1):
        for c in range(1, b.cols - 1):
            for k in range(4):
                assert lookup(small_codebook, np.rot90(b.window(r, c), k)) == (r, c, k)


def test_unknown_window_misses(small_codebook):
    assert lookup(small_codebook, np.zeros((3, 3), int)) is None


def test_verify_reports_adjacency_and_duplicates():
    cells = np.array(generate_board(8, 8, seed=1).cells)
    cells[4, 4] = cells[4, 5]
    assert verify_board(Board(cells)).adjacency_violations
    tile = np.array([[0, 1, 2], [3, 4, 5], [6, 0, 1]])
    rep = verify_board(Board(np.tile(tile, (3, 3))))
    assert rep.duplicate_windows
    with pytest.raises(DuplicateKey):
        build_codebook(Board(np.tile(tile, (3, 3))))


def test_board_validation():
    with pytest.raises(ValueError):
        Board(np.full((3, 3), 9), n_colors=7)
    with pytest.raises(ValueError):
        generate_board(2, 5)


def test_generation_budget_is_reported():
    with pytest.raises(GenerationFailed):
        generate_board(30, 30, n_colors=4, max_steps=50)


def test_board_is_frozen(small_board):
    with pytest.raises(ValueError):
        small_board.cells[0, 0] = 1
