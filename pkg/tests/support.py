"""Helpers shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from patterncloth.align import (
    AlignmentContext, DeformationState, e_det, e_dist, e_pull, e_recon, e_smooth, reduced_icp,
)


def fd_gradient_error(energy, x, h=1e-6) -> float:
    """Max relative error between an analytic gradient and central differences."""
    _, g = energy(x)
    fd = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (energy(x + e)[0] - energy(x - e)[0]) / (2 * h)
    return float(np.abs(fd - g).max() / max(np.abs(g).max(), 1e-12))


def energy_gradient_errors(template, frames, seed=0) -> dict:
    """Finite-difference check of all five alignment energies at a random state."""
    rng = np.random.default_rng(seed)
    n = template.n_vertices
    V = frames.origins
    x0 = np.hstack([rng.normal(0, 0.3, (n, 3)), rng.normal(0, 0.5, (n, 3))]).ravel()
    detected = rng.random(n) < 0.5
    P = V + rng.normal(0, 1.0, V.shape)
    ctx = AlignmentContext(P=P, detected=detected, cell_size_mm=template.cell_size_mm)
    S_prev = V + rng.normal(0, 0.5, V.shape)
    S_next = V + rng.normal(0, 0.5, V.shape)
    scan = V + rng.normal(0, 0.4, V.shape)
    targets, mask, _ = reduced_icp(V, scan, 3 * template.cell_size_mm)
    E = template.edges

    def wrap(f):
        return lambda x: f(DeformationState.from_vector(x))

    terms = {
        "det": wrap(lambda s: e_det(s, frames, ctx)),
        "dist": wrap(lambda s: e_dist(s, frames, E)),
        "pull": wrap(lambda s: e_pull(s, frames, ctx, S_prev, template.triangles)),
        "recon": wrap(lambda s: e_recon(s, frames, ctx, targets, mask)),
        "smooth": wrap(lambda s: e_smooth(s, frames, ctx, S_prev, V, S_next)),
    }
    return {k: fd_gradient_error(f, x0) for k, f in terms.items()}
