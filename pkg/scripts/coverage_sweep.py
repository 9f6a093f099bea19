"""Triangulation coverage of the tube scene against the detectability limit and camera count.

Noise-free detections, so coverage tracks the visibility oracle (cells seen by
at least three cameras).

    python scripts/coverage_sweep.py [--frames 0 15 30 45]
"""

from __future__ import annotations

import argparse

import numpy as np

from patterncloth.board import build_codebook
from patterncloth.capture_sim import NoiseConfig, simulate_frame, visibility_masks
from patterncloth.registration import register_detections
from patterncloth.scenes import tube_scene
from patterncloth.triangulate import triangulate_frame


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, nargs="+", default=[0, 15, 30, 45])
    ap.add_argument("--incidence", type=float, nargs="+", default=[60.0, 70.0, 80.0])
    ap.add_argument("--cameras", type=int, nargs="+", default=[6, 8, 12])
    a = ap.parse_args()
    print("cameras  incidence  coverage  oracle")
    for n_cam in a.cameras:
        sc = tube_scene(n_frames=max(a.frames) + 1, n_cameras=n_cam)
        cb = build_codebook(sc.board)
        for inc in a.incidence:
            noise = NoiseConfig(max_incidence_deg=inc)
            cov, ora = [], []
            for t in a.frames:
                dets = simulate_frame(sc.template, sc.frames[t], sc.board, sc.cameras, noise, frame=t)
                regs = [register_detections(ds, cb, sc.board) for ds in dets]
                cov.append(triangulate_frame(regs, sc.cameras, sc.template.n_vertices).coverage)
                ora.append((visibility_masks(sc.template, sc.frames[t], sc.cameras, noise).sum(0) >= 3).mean())
            print(f"{n_cam:7d}  {inc:9.0f}  {np.mean(cov):8.3f}  {np.mean(ora):6.3f}")


if __name__ == "__main__":
    main()
