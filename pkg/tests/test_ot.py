"""Tests for the entropic transport solver and the exact oracle."""
from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from gift.ot import exact_emd, sinkhorn


def random_instance(rng, n=8):
    mu = rng.uniform(0.1, 1.0, n)
    mu /= mu.sum()
    nu = rng.uniform(0.1, 1.0, n)
    nu /= nu.sum()
    C = rng.uniform(0.0, 1.0, (n, n))
    return mu, nu, C


def emd_1d(mu, nu):
    # W1 on the integer line: sum of |CDF gap| over unit-length cells.
    gaps = np.cumsum(mu - nu)[:-1]
    return float(np.abs(gaps).sum())


def test_identity_transport_cost_near_zero():
    rng = np.random.default_rng(0)
    for trial in range(5):
        mu = rng.uniform(0.1, 1.0, 8)
        mu /= mu.sum()
        C = rng.uniform(0.2, 1.0, (8, 8))
        np.fill_diagonal(C, 0.0)
        res = sinkhorn(mu, mu.copy(), C, epsilon=1e-3, max_iter=4000)
        assert res.cost <= 1e-6


def test_two_point_forced_coupling():
    mu = np.array([1.0, 0.0])
    nu = np.array([0.0, 1.0])
    c = 0.37
    C = np.array([[0.9, c], [0.1, 0.8]])
    # only one feasible plan exists, so the cost is exact at any epsilon
    for eps in (0.1, 1e-2, 1e-3):
        res = sinkhorn(mu, nu, C, epsilon=eps, max_iter=2000)
        assert abs(res.cost - c) <= 1e-9
        assert abs(res.plan[0, 1] - 1.0) <= 1e-9
        assert res.plan[1, :].sum() <= 1e-12


def test_sinkhorn_matches_exact_on_random_instances():
    rng = np.random.default_rng(7)
    for trial in range(10):
        mu, nu, C = random_instance(rng)
        ref = exact_emd(mu, nu, C)
        res = sinkhorn(mu, nu, C, epsilon=1e-3, max_iter=4000)
        assert abs(res.cost - ref) / ref < 1e-2


def test_exact_emd_identity_zero():
    rng = np.random.default_rng(1)
    mu = rng.uniform(0.1, 1.0, 6)
    mu /= mu.sum()
    C = rng.uniform(0.5, 1.0, (6, 6))
    np.fill_diagonal(C, 0.0)
    assert exact_emd(mu, mu.copy(), C) <= 1e-12


def test_exact_emd_matches_hungarian():
    # uniform marginals make the transport LP an assignment problem
    rng = np.random.default_rng(2)
    for trial in range(8):
        n = int(rng.integers(3, 9))
        C = rng.uniform(0.0, 1.0, (n, n))
        u = np.full(n, 1.0 / n)
        ri, ci = linear_sum_assignment(C)
        ref = C[ri, ci].sum() / n
        got = exact_emd(u, u.copy(), C)
        assert abs(got - ref) <= 1e-9 * max(1.0, ref)


def test_exact_emd_1d_closed_form():
    rng = np.random.default_rng(3)
    n = 8
    idx = np.arange(n, dtype=float)
    C = np.abs(idx[:, None] - idx[None, :])
    for trial in range(8):
        mu = rng.uniform(0.05, 1.0, n)
        mu /= mu.sum()
        nu = rng.uniform(0.05, 1.0, n)
        nu /= nu.sum()
        assert abs(exact_emd(mu, nu, C) - emd_1d(mu, nu)) <= 1e-9
    u = np.full(n, 1.0 / n)
    assert exact_emd(u, u.copy(), C) <= 1e-12


def test_mass_mismatch_and_bad_inputs_raise():
    mu = np.array([0.5, 0.5])
    nu = np.array([0.6, 0.5])
    C = np.ones((2, 2))
    with pytest.raises(ValueError):
        sinkhorn(mu, nu, C)
    with pytest.raises(ValueError):
        exact_emd(mu, nu, C)
    with pytest.raises(ValueError):
        sinkhorn(np.array([1.1, -0.1]), np.array([0.5, 0.5]), C)
    with pytest.raises(ValueError):
        sinkhorn(mu, mu.copy(), C, epsilon=0.0)
    with pytest.raises(ValueError):
        sinkhorn(mu, mu.copy(), np.ones((3, 2)))


def test_exact_emd_size_guard():
    n = 65
    u = np.full(n, 1.0 / n)
    with pytest.raises(ValueError):
        exact_emd(u, u.copy(), np.ones((n, n)))


def test_plan_marginals_and_cost_consistency():
    rng = np.random.default_rng(4)
    for trial in range(5):
        mu, nu, C = random_instance(rng)
        res = sinkhorn(mu, nu, C, max_iter=2000)
        assert res.converged
        assert np.all(res.plan >= 0.0)
        assert np.max(np.abs(res.plan.sum(axis=1) - mu)) <= 1e-8
        assert np.max(np.abs(res.plan.sum(axis=0) - nu)) <= 1e-8
        assert abs(res.cost - float((res.plan * C).sum())) <= 1e-12
        assert res.iterations <= 2000


def test_objective_trace_monotone():
    rng = np.random.default_rng(5)
    for trial in range(6):
        mu, nu, C = random_instance(rng)
        for eps in (None, 1e-3):
            res = sinkhorn(mu, nu, C, epsilon=eps, max_iter=1500)
            t = np.asarray(res.objective_trace)
            assert t.size >= 2
            assert np.all(np.diff(t) <= 1e-10)


def test_dual_feasibility_at_convergence():
    rng = np.random.default_rng(6)
    for trial in range(5):
        mu, nu, C = random_instance(rng)
        for eps in (None, 5e-3):
            res = sinkhorn(mu, nu, C, epsilon=eps, max_iter=6000)
            assert res.converged
            n = mu.size
            e = eps if eps is not None else 0.05 * float(C.mean())
            f, g = res.f, res.g
            slack = C + e * np.log(n) + 1e-6 - (f[:, None] + g[None, :])
            assert np.min(slack) >= 0.0


def test_envelope_gradient_matches_finite_differences():
    # centered potentials give the objective gradient along mass-preserving
    # directions: d/dh V(mu + h (e_i - e_j)) = f_i - f_j
    rng = np.random.default_rng(8)
    h = 1e-5
    for trial in range(4):
        mu, nu, C = random_instance(rng)
        eps = 0.05 * float(C.mean())
        res = sinkhorn(mu, nu, C, epsilon=eps, max_iter=4000, tol=1e-12)
        assert res.converged
        for _ in range(4):
            i, j = rng.choice(mu.size, size=2, replace=False)
            d = np.zeros_like(mu)
            d[i], d[j] = 1.0, -1.0
            vp = sinkhorn(mu + h * d, nu, C, epsilon=eps, max_iter=4000,
                          tol=1e-12).dual_value
            vm = sinkhorn(mu - h * d, nu, C, epsilon=eps, max_iter=4000,
                          tol=1e-12).dual_value
            fd = (vp - vm) / (2.0 * h)
            ref = res.f[i] - res.f[j]
            assert abs(fd - ref) / max(abs(ref), 1e-3) < 1e-4
