"""Damped Gauss-Newton (Levenberg-Marquardt) for sparse nonlinear least squares."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    grad_tol: float = 1e-6
    rel_tol: float = 1e-12
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.1
    mu_max: float = 1e10


@dataclass
class SolverResult:
    x: np.ndarray
    energy: float
    iterations: int
    energies: list = field(default_factory=list)
    reason: str = ""


def least_squares(fun: Callable, x0: np.ndarray, config: SolverConfig | None = None) -> SolverResult:
    """Minimize ||r(x)||^2 where ``fun(x) -> (r, J)`` with sparse J.

    A step solves (J^T J + mu diag(J^T J) + mu I) dx = -J^T r; it is accepted
    when the energy decreases (mu shrinks) and rejected otherwise (mu grows
    tenfold).  The accepted energies are therefore strictly decreasing.
    """
    cfg = config or SolverConfig()
    x = np.array(x0, dtype=float)
    r, J = fun(x)
    e = float(r @ r)
    if not np.isfinite(e):
        raise SolverDiverged("non-finite initial energy")
    energies = [e]
    mu = cfg.mu0
    it = 0
    reason = "max_iters"
    if x.size == 0:
        return SolverResult(x, e, 0, energies, "empty")
    while it < cfg.max_iters:
        g = J.T @ r
        if np.linalg.norm(g) * 2 < cfg.grad_tol:
            reason = "grad_tol"
            break
        H = (J.T @ J).tocsc()
        d = H.diagonal()
        step = None
        while mu <= cfg.mu_max:
            A = H + sp.diags(mu * d + mu)
            try:
                dx = spla.spsolve(A.tocsc(), -g)
            except RuntimeError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                r_new, J_new = fun(x + dx)
                e_new = float(r_new @ r_new)
                if np.isfinite(e_new) and e_new < e:
                    step = (dx, r_new, J_new, e_new)
                    break
            mu *= cfg.mu_up
        if step is None:
            reason = "no_decrease"
            break
        dx, r, J, e_new = step
        x = x + dx
        it += 1
        rel = (e - e_new) / max(e, 1e-300)
        e = e_new
        energies.append(e)
        mu = max(mu * cfg.mu_down, 1e-12)
        if rel < cfg.rel_tol:
            reason = "rel_tol"
            break
    log.debug("least_squares: %d iterations, energy %.6g (%s)", it, e, reason)
    return SolverResult(x, e, it, energies, reason)


def block_coo(rows: np.ndarray, cols: np.ndarray, blocks: np.ndarray):
    """COO triplets for dense (m, p, q) blocks placed at (rows[i], cols[i])."""
    m, p, q = blocks.shape
    I = (np.asarray(rows)[:, None, None] + np.arange(p)[None, :, None]) + np.zeros((1, 1, q), dtype=np.int64)
    J = (np.asarray(cols)[:, None, None] + np.arange(q)[None, None, :]) + np.zeros((1, p, 1), dtype=np.int64)
    return I.ravel(), J.ravel(), blocks.ravel()
