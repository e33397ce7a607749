"""Tests for the keypoint losses and the per-tool optimizer."""
from __future__ import annotations

import numpy as np
import pytest

from gift.geom import ToolShape, generate_tool, nearest_boundary
from gift import kp


def regular_ngon(n, radius=0.1):
    th = np.linspace(0.0, 2.0 * np.pi, n + 1)[:-1]
    return np.c_[np.cos(th), np.sin(th)] * radius


def unit_square():
    return np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_induced_distribution_uniform_at_center():
    shape = ToolShape.from_polygon(regular_ngon(64), tool_id="circle")
    P = kp.induced_distribution(shape, np.zeros(2))
    assert np.abs(P - 1.0 / 64).max() <= 1e-12


def test_induced_distribution_peaks_at_sample():
    tool = generate_tool(3, "T")
    for k in (0, 17, 40):
        P = kp.induced_distribution(tool, tool.boundary[k])
        assert int(np.argmax(P)) == k


def test_induced_distribution_normalized():
    tool = generate_tool(5, "L")
    rng = np.random.default_rng(0)
    lo, hi = tool.boundary.min(axis=0), tool.boundary.max(axis=0)
    for _ in range(1000):
        x = rng.uniform(lo - 0.1, hi + 0.1)
        P = kp.induced_distribution(tool, x)
        assert abs(P.sum() - 1.0) <= 1e-12
        assert np.all(P >= 0)


def test_coverage_full_set_beats_every_single_keypoint():
    tool = generate_tool(1, "T")
    full = kp.coverage_loss(tool, tool.boundary)
    singles = [kp.coverage_loss(tool, tool.boundary[k:k + 1])
               for k in range(len(tool.boundary))]
    assert full < min(singles)


def test_coverage_symmetric_circle_near_identity():
    shape = ToolShape.from_polygon(regular_ngon(64), tool_id="circle")
    K = shape.boundary[::8]  # 8 rotationally symmetric keypoints
    loss = kp.coverage_loss(shape, K)
    eps = 0.05 * float(shape.G.mean())
    assert loss <= eps * np.log(len(shape.boundary))


def rotate_shape(tool, angle, shift):
    R = np.array([[np.cos(angle), -np.sin(angle)],
                  [np.sin(angle), np.cos(angle)]])
    parts = []
    from gift.geom import ConvexPart
    for p in tool.parts:
        parts.append(ConvexPart(p.vertices @ R.T + shift, p.material, p.label))
    return ToolShape.build(tool.tool_id, tool.config, parts, tool.seed), R


def test_coverage_rigid_invariance_and_grad_equivariance():
    tool = generate_tool(3, "T")
    K = tool.boundary[[4, 20, 37, 55]]
    moved, R = rotate_shape(tool, 0.7, np.array([0.3, -0.2]))
    K2 = K @ R.T + np.array([0.3, -0.2])
    assert abs(kp.coverage_loss(tool, K) - kp.coverage_loss(moved, K2)) <= 1e-9
    g1 = kp.coverage_grad(tool, K)
    g2 = kp.coverage_grad(moved, K2)
    assert np.abs(g1 @ R.T - g2).max() <= 1e-9


def test_coverage_grad_matches_finite_differences():
    # FD of the entropic objective, the quantity the dual gradient is exact for
    rng = np.random.default_rng(11)
    for trial in range(6):
        tool = generate_tool(trial, ("T", "L", "X")[trial % 3])
        idx = rng.choice(len(tool.boundary), 4, replace=False)
        K = tool.boundary[idx] + rng.normal(0.0, 0.005, (4, 2))
        solver = kp.CoverageSolver(tool, tol=1e-12, max_iter=30000)
        _, g = solver.value_and_grad(K)
        h = 1e-5 * tool.bbox_diag
        for i in range(4):
            for c in range(2):
                Kp = K.copy()
                Kp[i, c] += h
                Km = K.copy()
                Km[i, c] -= h
                fd = (solver.value(Kp) - solver.value(Km)) / (2.0 * h)
                assert abs(fd - g[i, c]) / max(abs(g[i, c]), 1e-9) < 1e-3


def test_coverage_grad_zero_at_symmetric_square_corners():
    shape = ToolShape.from_polygon(unit_square(), tool_id="sq", n_samples=4)
    K = shape.boundary.copy()  # the four corners
    solver = kp.CoverageSolver(shape, tol=1e-12, max_iter=30000)
    _, g = solver.value_and_grad(K)
    assert np.abs(g).max() <= 1e-6


def test_quadric_loss_on_edge_and_offset():
    shape = ToolShape.from_polygon(unit_square(), tool_id="sq", n_samples=16)
    corners = {tuple(np.round(v, 9)) for v in unit_square()}
    k = next(i for i, b in enumerate(shape.boundary)
             if tuple(np.round(b, 9)) not in corners)
    b, n = shape.boundary[k], shape.normals[k]
    assert kp.quadric_loss(shape, b[None, :]) <= 1e-12
    d = 0.03
    x = b - d * n  # inward offset, still nearest to the same edge sample
    assert nearest_boundary(shape, x) == k
    assert abs(kp.quadric_loss(shape, x[None, :]) - d * d) <= 1e-12


def test_quadric_loss_matches_direct_sum():
    tool = generate_tool(7, "X")
    rng = np.random.default_rng(2)
    K = tool.boundary[rng.choice(64, 5, replace=False)] + rng.normal(0, 0.01, (5, 2))
    total = 0.0
    for x in K:
        Q = tool.quadrics[nearest_boundary(tool, x)]
        h = np.array([x[0], x[1], 1.0])
        total += h @ Q @ h
    assert abs(kp.quadric_loss(tool, K) - total) <= 1e-15


def test_quadric_grad_properties():
    shape = ToolShape.from_polygon(unit_square(), tool_id="sq", n_samples=16)
    corners = {tuple(np.round(v, 9)) for v in unit_square()}
    k = next(i for i, b in enumerate(shape.boundary)
             if tuple(np.round(b, 9)) not in corners)
    b, n = shape.boundary[k], shape.normals[k]
    # on the line: zero gradient
    assert np.abs(kp.quadric_grad(shape, b[None, :])).max() <= 1e-12
    # off the line: gradient opposes the displacement back to the line
    x = b - 0.04 * n
    g = kp.quadric_grad(shape, x[None, :])[0]
    assert g @ (b - x) < 0.0


def test_quadric_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    tool = generate_tool(4, "L")
    h = 1e-7
    checked = 0
    while checked < 10:
        x = tool.boundary[int(rng.integers(64))] + rng.normal(0, 0.008, 2)
        k = nearest_boundary(tool, x)
        # skip probes whose nearest-sample assignment changes within the stencil
        stable = all(nearest_boundary(tool, x + dx) == k for dx in
                     (np.array([h, 0]), np.array([-h, 0]),
                      np.array([0, h]), np.array([0, -h])))
        if not stable:
            continue
        g = kp.quadric_grad(tool, x[None, :])[0]
        for c in range(2):
            xp = x.copy()
            xp[c] += h
            xm = x.copy()
            xm[c] -= h
            fd = (kp.quadric_loss(tool, xp[None, :]) -
                  kp.quadric_loss(tool, xm[None, :])) / (2.0 * h)
            assert abs(fd - g[c]) <= 1e-6 * max(1.0, abs(g[c]))
        checked += 1


def test_separation_loss_values():
    K = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert kp.separation_loss(K, 0.5) == 0.0
    K2 = np.array([[0.2, 0.2], [0.2, 0.2], [5.0, 5.0]])
    assert abs(kp.separation_loss(K2, 0.1) - 0.01) <= 1e-15
    with pytest.raises(ValueError):
        kp.separation_loss(K, 0.0)


def test_optimize_keypoints_contracts():
    tool = generate_tool(3, "T")
    ks = kp.optimize_keypoints(tool)
    assert ks.M == 8 and ks.points.shape == (8, 2)
    # trace of accepted values never increases
    assert np.all(np.diff(np.asarray(ks.trace)) <= 0.0)
    # all points on the boundary after projection
    assert max(tool.project(p)[2] for p in ks.points) <= 1e-6
    # output sorted by arc position
    arcs = [tool.project(p)[1] for p in ks.points]
    assert all(a <= b for a, b in zip(arcs, arcs[1:]))
    # deterministic
    ks2 = kp.optimize_keypoints(tool)
    assert np.array_equal(ks.points, ks2.points)


def test_optimize_keypoints_geodesic_spread_beats_random():
    tool = generate_tool(3, "T")
    ks = kp.optimize_keypoints(tool)
    idx = [nearest_boundary(tool, p) for p in ks.points]
    iu = np.triu_indices(len(idx), k=1)
    opt_sep = tool.G[np.ix_(idx, idx)][iu].min()
    rng = np.random.default_rng(12)
    rand_seps = []
    for _ in range(50):
        ridx = rng.choice(64, 8, replace=False)
        rand_seps.append(tool.G[np.ix_(ridx, ridx)][iu].min())
    assert opt_sep > np.mean(rand_seps)


def test_optimize_keypoints_rigid_equivariance():
    tool = generate_tool(6, "L")
    ks = kp.optimize_keypoints(tool)
    shift = np.array([0.12, -0.3])
    moved, R = rotate_shape(tool, 0.7, shift)
    ks2 = kp.optimize_keypoints(moved)
    assert np.abs(ks.points @ R.T + shift - ks2.points).max() <= 1e-6


def test_separation_mode_drifts_more_than_coverage_mode():
    tool = generate_tool(2, "T")
    cov = kp.optimize_keypoints(tool, config=kp.KeypointObjectiveConfig(seed=1))
    sep = kp.optimize_keypoints(
        tool, config=kp.KeypointObjectiveConfig(seed=1, separation_mode=True))
    assert sep.drift > cov.drift


def test_config_validation():
    tool = generate_tool(0, "T")
    with pytest.raises(ValueError):
        kp.optimize_keypoints(tool, config=kp.KeypointObjectiveConfig(steps=0))
    with pytest.raises(ValueError):
        kp.optimize_keypoints(
            tool, config=kp.KeypointObjectiveConfig(lambda_coverage=-1.0))
    with pytest.raises(ValueError):
        kp.optimize_keypoints(tool, M=1)


def test_keypointset_roundtrip():
    tool = generate_tool(9, "X")
    ks = kp.optimize_keypoints(tool)
    d = ks.to_dict()
    back = kp.KeypointSet.from_dict(d)
    assert back.tool_id == ks.tool_id and back.M == ks.M
    assert np.allclose(back.points, ks.points, atol=0.0)
