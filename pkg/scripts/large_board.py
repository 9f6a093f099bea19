"""Generate and exhaustively verify a full-size 300 x 900 board with 7 colors.

    python scripts/large_board.py [--seed 0] [-o board_300x900.txt]
"""

from __future__ import annotations

import argparse
import time

from patterncloth import io
from patterncloth.board import build_codebook, generate_board, verify_board


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=300)
    ap.add_argument("--cols", type=int, default=900)
    ap.add_argument("--colors", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-o", "--output", default=None)
    a = ap.parse_args()
    t0 = time.perf_counter()
    board = generate_board(a.rows, a.cols, a.colors, seed=a.seed)
    t1 = time.perf_counter()
    rep = verify_board(board)
    t2 = time.perf_counter()
    cb = build_codebook(board)
    t3 = time.perf_counter()
    print(f"generate {t1 - t0:.1f} s, verify {t2 - t1:.1f} s, codebook {t3 - t2:.1f} s")
    print(f"{(a.rows - 2) * (a.cols - 2)} windows, {cb.n_entries} codebook keys, "
          f"{len(rep.duplicate_windows)} duplicates, {len(rep.adjacency_violations)} adjacency violations")
    if a.output:
        io.save_board(board, a.output)


if __name__ == "__main__":
    main()
