"""Align the template to noisy tube clouds and report errors against ground truth.

    python scripts/alignment_benchmark.py [--frames 0 30] [--refine 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from patterncloth.align import AlignedSequence, acceleration, align_frame, local_frames, temporal_refine
from patterncloth.board import build_codebook
from patterncloth.capture_sim import NoiseConfig, simulate_frame
from patterncloth.registration import register_detections
from patterncloth.scenes import tube_scene
from patterncloth.triangulate import triangulate_frame

NOISE = NoiseConfig(pixel_jitter_sigma=0.3, dropout_rate=0.05, color_ambiguity_rate=0.02, outlier_rate=0.02, seed=1)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, nargs="+", default=[0, 30])
    ap.add_argument("--refine", type=int, default=0, help="temporal passes over the given frames")
    a = ap.parse_args()
    sc = tube_scene(n_frames=max(a.frames) + 1)
    tm = sc.template
    cb = build_codebook(sc.board)
    F = local_frames(tm)
    results = []
    for t in a.frames:
        dets = simulate_frame(tm, sc.frames[t], sc.board, sc.cameras, NOISE, frame=t)
        regs = [register_detections(ds, cb, sc.board) for ds in dets]
        cloud = triangulate_frame(regs, sc.cameras, tm.n_vertices, frame=t)
        t0 = time.perf_counter()
        res = align_frame(tm, F, cloud)
        err = np.linalg.norm(res.mesh - sc.frames[t], axis=1)
        print(f"frame {t}: coverage {cloud.coverage:.3f}, detected error {err[res.detected].mean():.3f} mm, "
              f"non-detected error {err[~res.detected].mean():.3f} mm, pruned {int(res.pruned.sum())}, "
              f"{time.perf_counter() - t0:.1f} s")
        results.append(res)
    if a.refine and len(results) >= 3:
        seq = AlignedSequence([r.state for r in results], [r.mesh for r in results], [r.detected for r in results])
        print(f"acceleration before refinement {acceleration(seq.meshes, seq.detected):.4f} mm")
        for p in range(a.refine):
            seq = temporal_refine(tm, F, seq, passes=1)
            print(f"pass {p + 1}: acceleration {acceleration(seq.meshes, seq.detected):.4f} mm")


if __name__ == "__main__":
    main()
