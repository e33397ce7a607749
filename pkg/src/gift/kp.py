"""Keypoint objective and the per-tool keypoint optimizer.

A tool's keypoints are chosen by minimizing a two-term objective over M
points: a quadric term that pulls points onto the edge lines of the outline
(near edges and corners), and a coverage term that makes the mixture of
point-induced boundary distributions close, in transport cost under the
geodesic ground metric, to the uniform boundary distribution.

Each keypoint induces a softmax distribution over the N boundary samples
with logits equal to the negative Euclidean distance to each sample. The
coverage term feeds the mean of those M distributions into the entropic
transport solver against the uniform distribution with ground cost G.

Gradients for the coverage term come from the transport dual potentials
(envelope theorem) chained through the analytic softmax Jacobian, so the
quantity being differentiated is the entropic objective value; the sharp
transport cost is exposed separately as `coverage_loss` for reporting.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import ToolShape, nearest_boundary
from .ot import sinkhorn

DEFAULT_M = 8
DEFAULT_LAMBDA = 8.0
DIVERGENCE_LIMIT = 1e6


@dataclass
class KeypointObjectiveConfig:
    """Knobs for optimize_keypoints.

    lr is a step length as a fraction of the shape diameter (the largest
    pairwise distance between boundary samples), which keeps steps rigid-
    motion invariant. lambda_coverage=None selects the package default
    weight, sized so configuration-scale coverage differences outweigh the
    quadric's corner barriers at desk scale (a value-balanced weight leaves
    the coverage term too weak to move points at all). epsilon is forwarded
    to the transport solver.
    """

    lambda_coverage: float | None = None
    steps: int = 30
    lr: float = 0.05
    seed: int = 0
    epsilon: float | None = None
    separation_mode: bool = False
    separation_threshold: float = 0.08

    def validate(self) -> None:
        if self.lambda_coverage is not None and self.lambda_coverage < 0:
            raise ValueError("lambda_coverage must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class KeypointSet:
    tool_id: str
    points: np.ndarray  # (M, 2), ordered by boundary arc position
    M: int
    # objective value at init then after each accepted step (diagnostic)
    trace: list[float] = field(default_factory=list)
    # mean distance to boundary of the final pre-projection iterate
    drift: float = 0.0

    def to_dict(self) -> dict:
        return {"tool_id": self.tool_id, "M": self.M,
                "points": [[float(x), float(y)] for x, y in self.points]}

    @staticmethod
    def from_dict(d: dict) -> "KeypointSet":
        return KeypointSet(d["tool_id"], np.asarray(d["points"], dtype=float),
                           int(d["M"]))


def shape_diameter(shape: ToolShape) -> float:
    b = shape.boundary
    d2 = ((b[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.max()))


def induced_distribution(shape: ToolShape, x: np.ndarray) -> np.ndarray:
    """Softmax over boundary samples with logits -||x - v||."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("keypoint must be finite")
    z = -np.hypot(*(shape.boundary - x).T)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def _mixture(shape: ToolShape, K: np.ndarray):
    """Mean induced distribution plus softmax internals for the Jacobian."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    diff = K[:, None, :] - shape.boundary[None, :, :]  # (M, N, 2)
    d = np.hypot(diff[:, :, 0], diff[:, :, 1])
    z = -d
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    S = e / e.sum(axis=1, keepdims=True)  # (M, N) softmax rows
    # unit direction sample -> keypoint; zero where the keypoint sits on a sample
    safe = np.where(d > 1e-12, d, 1.0)
    U = diff / safe[:, :, None]
    U[d <= 1e-12] = 0.0
    return S.mean(axis=0), S, U


class CoverageSolver:
    """Transport solves against uniform with dual warm-starting.

    Repeated evaluations during keypoint descent move the mixture only a
    little, so reusing the previous potentials cuts each solve to a handful
    of sweeps. A fresh solver reproduces the cold-start result.
    """

    def __init__(self, shape: ToolShape, epsilon: float | None = None,
                 max_iter: int = 20000, tol: float = 1e-9):
        self.shape = shape
        n = shape.G.shape[0]
        self.uniform = np.full(n, 1.0 / n)
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.tol = tol
        self._warm: tuple[np.ndarray, np.ndarray] | None = None

    def solve(self, K: np.ndarray):
        mix, S, U = _mixture(self.shape, K)
        res = sinkhorn(mix, self.uniform, self.shape.G, epsilon=self.epsilon,
                       max_iter=self.max_iter, tol=self.tol, init=self._warm)
        if not res.converged:
            raise RuntimeError("transport solve did not converge in coverage")
        self._warm = (res.f, res.g)
        return res, S, U

    def value(self, K: np.ndarray) -> float:
        return self.solve(K)[0].dual_value

    def value_and_grad(self, K: np.ndarray):
        res, S, U = self.solve(K)
        return res.dual_value, _chain_grads(res.f, S, U)


def _chain_grads(f: np.ndarray, S: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Dual potential chained through the softmax Jacobian.

    d z_v / d x_i = -U[i, v]; the softmax Jacobian gives
    d mix_v / d x_i = S_iv (dz_v - sum_u S_iu dz_u) / m.
    """
    m = S.shape[0]
    fS = f[None, :] * S  # (M, N)
    term1 = -np.einsum("mn,mnk->mk", fS, U)
    term2 = fS.sum(axis=1, keepdims=True) * np.einsum("mn,mnk->mk", S, U)
    return (term1 + term2) / m


def coverage_loss(shape: ToolShape, K: np.ndarray,
                  epsilon: float | None = None) -> float:
    """Sharp transport cost between the keypoint mixture and uniform."""
    return CoverageSolver(shape, epsilon).solve(K)[0].cost


def coverage_objective(shape: ToolShape, K: np.ndarray,
                       epsilon: float | None = None,
                       with_grad: bool = True):
    """Entropic coverage objective and its exact per-keypoint gradient.

    Returns (value, grads) where value is the transport dual objective for
    the keypoint mixture vs uniform and grads is (M, 2). The dual potential
    is the gradient of that value in the mixture weights; moving a keypoint
    perturbs the weights through the softmax Jacobian.
    """
    solver = CoverageSolver(shape, epsilon)
    if not with_grad:
        return solver.value(K), None
    return solver.value_and_grad(K)


def coverage_grad(shape: ToolShape, K: np.ndarray,
                  epsilon: float | None = None) -> np.ndarray:
    return coverage_objective(shape, K, epsilon=epsilon)[1]


def quadric_loss(shape: ToolShape, K: np.ndarray) -> float:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    total = 0.0
    for x in K:
        Q = shape.quadrics[nearest_boundary(shape, x)]
        h = np.array([x[0], x[1], 1.0])
        total += float(h @ Q @ h)
    return total


def quadric_grad(shape: ToolShape, K: np.ndarray) -> np.ndarray:
    """Gradient with the nearest-sample assignment held fixed."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    out = np.zeros_like(K)
    for i, x in enumerate(K):
        Q = shape.quadrics[nearest_boundary(shape, x)]
        h = np.array([x[0], x[1], 1.0])
        out[i] = 2.0 * (Q @ h)[:2]
    return out


def separation_loss(K: np.ndarray, threshold: float) -> float:
    """Hinge penalty on pairs closer than threshold (comparison mode only)."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    K = np.atleast_2d(np.asarray(K, dtype=float))
    diff = K[:, None, :] - K[None, :, :]
    d = np.hypot(diff[:, :, 0], diff[:, :, 1])
    iu = np.triu_indices(K.shape[0], k=1)
    gap = np.maximum(0.0, threshold - d[iu])
    return float((gap ** 2).sum())


def _separation_grad(K: np.ndarray, threshold: float) -> np.ndarray:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    out = np.zeros_like(K)
    m = K.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            diff = K[i] - K[j]
            d = float(np.hypot(*diff))
            if d < threshold and d > 1e-12:
                g = -2.0 * (threshold - d) * diff / d
                out[i] += g
                out[j] -= g
    return out


def farthest_point_indices(shape: ToolShape, m: int, rng) -> np.ndarray:
    """Greedy farthest-point sampling on the geodesic matrix.

    Distances are quantized before each argmax so near-ties (symmetric
    shapes) resolve to the same index in every rigid frame.
    """
    n = shape.G.shape[0]
    q = max(1e-12, 1e-9 * float(shape.perimeter))
    first = int(rng.integers(n))
    chosen = [first]
    mind = shape.G[first].copy()
    while len(chosen) < m:
        nxt = int(np.argmax(np.round(mind / q).astype(np.int64)))
        chosen.append(nxt)
        mind = np.minimum(mind, shape.G[nxt])
    return np.asarray(chosen)


def _objective(shape, K, lam, cfg, solver, with_grad=True):
    """(descended value, gradient, sharp value) of the combined loss.

    The descended value uses the entropic coverage objective (the quantity
    the dual-potential gradient differentiates); the sharp value swaps in
    the plain transport cost and is what snapped candidates are ranked by.
    """
    q = quadric_loss(shape, K)
    if cfg.separation_mode:
        v = q + lam * separation_loss(K, cfg.separation_threshold)
        if not with_grad:
            return v, None, v
        g = quadric_grad(shape, K) + lam * _separation_grad(
            K, cfg.separation_threshold)
        return v, g, v
    res, S, U = solver.solve(K)
    v = q + lam * res.dual_value
    sharp = q + lam * res.cost
    if not with_grad:
        return v, None, sharp
    g = quadric_grad(shape, K) + lam * _chain_grads(res.f, S, U)
    return v, g, sharp


def _snap_to_outline(shape: ToolShape, K: np.ndarray):
    pts = np.empty_like(K)
    arcs = np.empty(K.shape[0])
    for i, x in enumerate(K):
        p, s, _ = shape.project(x)
        pts[i] = p
        arcs[i] = s
    return pts, arcs


def optimize_keypoints(shape: ToolShape, M: int = DEFAULT_M,
                       config: KeypointObjectiveConfig | None = None) -> KeypointSet:
    """Descend the keypoint objective from a farthest-point initialization.

    Normalized-gradient steps with backtracking halving; every few steps the
    current iterate is projected onto the outline and scored, and the best
    projected configuration seen (including the initialization) is returned,
    sorted by arc position. Deterministic for a fixed config.seed.
    """
    cfg = config or KeypointObjectiveConfig()
    cfg.validate()
    if M < 2:
        raise ValueError("M must be >= 2")
    lam = DEFAULT_LAMBDA if cfg.lambda_coverage is None else cfg.lambda_coverage
    rng = np.random.default_rng(np.random.SeedSequence([29, cfg.seed]))
    idx = farthest_point_indices(shape, M, rng)
    K = shape.boundary[idx].copy()
    scale = shape_diameter(shape)
    # descent only needs the objective to far less precision than the step
    # changes it, so the inner solves run at a loose marginal tolerance
    solver = None if cfg.separation_mode else CoverageSolver(
        shape, cfg.epsilon, tol=1e-5)

    # the initialization sits on the boundary, so it is its own projection
    val, grad, sharp = _objective(shape, K, lam, cfg, solver)
    trace: list[float] = [val]
    best_val, best_pts, best_arcs = sharp, K.copy(), shape.arc[idx].copy()
    for step in range(cfg.steps):
        if val > DIVERGENCE_LIMIT:
            raise RuntimeError(f"keypoint objective diverged: trace={trace}")
        gn = float(np.linalg.norm(grad))
        if gn < 1e-14:
            break
        direction = -grad / gn
        t = cfg.lr * scale
        accepted = False
        for _ in range(8):
            K_try = K + t * direction
            v_try, g_try, _ = _objective(shape, K_try, lam, cfg, solver)
            if v_try <= val:
                K, val, grad = K_try, v_try, g_try
                accepted = True
                break
            t *= 0.5
        trace.append(val)
        if not accepted:
            break
        if step % 2 == 0 or step == cfg.steps - 1:
            pts, arcs = _snap_to_outline(shape, K)
            _, _, v_snap = _objective(shape, pts, lam, cfg, solver,
                                      with_grad=False)
            if v_snap <= best_val:
                best_val, best_pts, best_arcs = v_snap, pts, arcs

    drift = float(np.mean([shape.project(x)[2] for x in K]))
    order = np.argsort(best_arcs, kind="stable")
    return KeypointSet(shape.tool_id, best_pts[order], M, trace, drift)
