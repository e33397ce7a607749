"""Entropic optimal transport (log-domain Sinkhorn) and an exact EMD oracle.

The Sinkhorn result carries the sharp transport cost (entropy excluded) plus
the dual potentials, which give envelope-theorem gradients of the entropic
objective with respect to the source weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import eye, kron, vstack
from scipy.special import logsumexp

MASS_TOL = 1e-9


@dataclass
class TransportResult:
    cost: float
    plan: np.ndarray
    f: np.ndarray
    g: np.ndarray
    dual_value: float
    iterations: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)


def _check_masses(mu: np.ndarray, nu: np.ndarray) -> None:
    if np.any(mu < 0) or np.any(nu < 0):
        raise ValueError("weights must be nonnegative")
    if abs(float(mu.sum()) - float(nu.sum())) > MASS_TOL:
        raise ValueError("source and target mass differ")


def sinkhorn(mu: np.ndarray, nu: np.ndarray, cost_matrix: np.ndarray,
             epsilon: float | None = None, max_iter: int = 500,
             tol: float = 1e-9,
             init: tuple[np.ndarray, np.ndarray] | None = None) -> TransportResult:
    """Log-domain Sinkhorn between two nonnegative weight vectors.

    epsilon defaults to 0.05 * mean(cost_matrix). Convergence is declared
    when the worst row-marginal violation drops below tol (columns are exact
    after every sweep). Zero-mass entries are supported and receive zero
    potentials. init warm-starts the dual potentials (skipping the annealing
    schedule), for callers solving a sequence of nearby problems.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    C = np.asarray(cost_matrix, dtype=float)
    if C.shape != (len(mu), len(nu)):
        raise ValueError("cost matrix shape mismatch")
    _check_masses(mu, nu)
    if epsilon is None:
        epsilon = 0.05 * float(np.mean(C))
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    with np.errstate(divide="ignore"):
        lmu = np.log(mu)
        lnu = np.log(nu)
    sup_f = np.isfinite(lmu)
    sup_g = np.isfinite(lnu)

    # potentials kept in cost units so they warm-start across epsilon levels;
    # the schedule anneals from the cost scale down to the requested epsilon
    levels: list[float] = []
    if init is None:
        f = np.zeros(len(mu))
        g = np.zeros(len(nu))
        e = max(float(np.mean(C)), epsilon)
        while e > epsilon * 1.0001:
            levels.append(e)
            e *= 0.5
    else:
        f = np.where(sup_f, np.asarray(init[0], dtype=float), -np.inf)
        g = np.where(sup_g, np.asarray(init[1], dtype=float), -np.inf)

    def sweep(eps: float) -> None:
        nonlocal f, g
        with np.errstate(invalid="ignore"):
            A = (g[None, :] - C) / eps
            m = A.max(axis=1)
            f = eps * lmu - eps * (m + np.log(np.exp(A - m[:, None]).sum(axis=1)))
            f[~sup_f] = -np.inf
            B = (f[:, None] - C) / eps
            mb = B.max(axis=0)
            g = eps * lnu - eps * (mb + np.log(np.exp(B - mb[None, :]).sum(axis=0)))
            g[~sup_g] = -np.inf

    it = 0
    converged = False
    trace: list[float] = []
    for eps in levels:
        for _ in range(6):
            if it >= max_iter:
                break
            it += 1
            sweep(eps)
    while it < max_iter:
        it += 1
        sweep(epsilon)
        P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
        # negative dual objective of the entropic problem: the quantity the
        # iteration provably descends at fixed epsilon
        fm = float(f[sup_f] @ mu[sup_f])
        gm = float(g[sup_g] @ nu[sup_g])
        trace.append(-(fm + gm - epsilon * float(P.sum())))
        err = float(np.max(np.abs(P.sum(axis=1) - mu)))
        if err < tol:
            converged = True
            break

    P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    f = np.where(sup_f, f, 0.0)
    g = np.where(sup_g, g, 0.0)
    if sup_f.any():
        shift = float(np.mean(f[sup_f]))
        f = np.where(sup_f, f - shift, 0.0)
        g = np.where(sup_g, g + shift, 0.0)
    cost = float(np.sum(P * C))
    dual_value = float(f @ mu + g @ nu)
    return TransportResult(cost=cost, plan=P, f=f, g=g, dual_value=dual_value,
                           iterations=it, converged=converged, objective_trace=trace)


def exact_emd(mu: np.ndarray, nu: np.ndarray, cost_matrix: np.ndarray) -> float:
    """Exact optimal transport cost on small instances via an LP solve."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    C = np.asarray(cost_matrix, dtype=float)
    n, m = len(mu), len(nu)
    if max(n, m) > 64:
        raise ValueError("exact_emd is a small-instance oracle (N <= 64)")
    if C.shape != (n, m):
        raise ValueError("cost matrix shape mismatch")
    _check_masses(mu, nu)

    row = kron(eye(n, format="csr"), np.ones((1, m)))
    col = kron(np.ones((1, n)), eye(m, format="csr"))
    A = vstack([row, col]).tocsr()
    b = np.concatenate([mu, nu])
    res = linprog(C.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0:
        raise ValueError(f"transport LP failed: {res.message}")
    return float(res.fun)
