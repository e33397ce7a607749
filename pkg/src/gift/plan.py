"""Grasp selection, MPPI planning, and episode rollouts.

A rollout pins the tool to the gripper at a grasp keypoint, then replans a
short action plan every step with model-predictive path integral control:
sample noisy variations of the current plan, score each on a cloned
environment, and blend them with exponential reward weights.  Episodes emit
experience tuples (keypoints, grasp index, interaction index, reward) that
the selector trains on.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import sim
from .geom import ToolShape, antipodal_pairs

# Action clamps mirror the simulator limits so stored plans match what runs.
SIM_LIMITS = (sim.CLAMP_XY, sim.CLAMP_XY, sim.CLAMP_TH)

DEFAULT_GRIPPER_WIDTH = 0.045
DEFAULT_FRICTION_ANGLE = 0.35
DEFAULT_GRASP_RADIUS = 0.05


class EpisodeDiscarded(RuntimeError):
    """Episode hit a simulation blow-up and produced no usable tuple."""


@dataclass(frozen=True)
class MppiConfig:
    horizon: int = 16
    n_rollouts: int = 32
    sigma: tuple[float, ...] = (0.01, 0.01, 0.03)
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be at least 1")
        if any(s < 0 for s in self.sigma):
            raise ValueError("sigma entries must be nonnegative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class GraspResult:
    valid: bool
    pair: tuple[int, int] | None
    grasp_point: tuple[float, float] | None
    distance_to_keypoint: float


@dataclass
class ExperienceTuple:
    tool_id: str
    keypoints: np.ndarray
    grasp_idx: int
    inter_idx: int
    reward: float
    grasp_success: bool
    task_success: bool
    mode: str

    def to_json(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "keypoints": [[float(x), float(y)] for x, y in self.keypoints],
            "grasp_idx": int(self.grasp_idx),
            "inter_idx": int(self.inter_idx),
            "reward": float(self.reward),
            "grasp_success": bool(self.grasp_success),
            "task_success": bool(self.task_success),
            "mode": self.mode,
        }

    @staticmethod
    def from_json(d: dict) -> "ExperienceTuple":
        return ExperienceTuple(
            d["tool_id"], np.asarray(d["keypoints"], float),
            int(d["grasp_idx"]), int(d["inter_idx"]), float(d["reward"]),
            bool(d["grasp_success"]), bool(d["task_success"]),
            d.get("mode", "train"))


@dataclass
class Trajectory:
    task: str
    records: list = field(default_factory=list)
    grasp_midpoint: tuple[float, float] | None = None
    bbox_diag: float = 0.0
    params: dict = field(default_factory=dict)
    init_poses: dict = field(default_factory=dict)


def _shape_diag(shape: ToolShape) -> float:
    lo = shape.boundary.min(axis=0)
    hi = shape.boundary.max(axis=0)
    return float(np.hypot(*(hi - lo)))


def plan_grasp(shape: ToolShape, k_grasp,
               gripper_width: float = DEFAULT_GRIPPER_WIDTH,
               friction_angle: float = DEFAULT_FRICTION_ANGLE,
               radius: float = DEFAULT_GRASP_RADIUS) -> GraspResult:
    """Pick the antipodal pinch near k_grasp whose midpoint is closest.

    Pairs come from antipodal_pairs (both contacts within radius of
    k_grasp, gap at most gripper_width, opposing friction cones).  A
    keypoint on a part wider than the gripper yields no pair; valid=False.
    """
    k = np.asarray(k_grasp, float)
    pairs = antipodal_pairs(shape, k, radius, friction_angle, gripper_width)
    if not pairs:
        return GraspResult(False, None, None, math.inf)
    best = None
    best_d = math.inf
    for i, j in pairs:
        mid = 0.5 * (shape.boundary[i] + shape.boundary[j])
        d = float(np.hypot(*(mid - k)))
        if d < best_d:
            best_d = d
            best = (i, j)
    i, j = best
    mid = 0.5 * (shape.boundary[i] + shape.boundary[j])
    return GraspResult(True, (int(i), int(j)), (float(mid[0]), float(mid[1])),
                       best_d)


def default_reward(env, events, terms) -> float:
    return float(terms.total)


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("GIFT_THREADS", "1")))
    except ValueError:
        return 1


def mppi_step(env, reward_fn, base_plan, cfg: MppiConfig, *,
              step_index: int = 0, step_fn=None, limits=None):
    """One replanning step: perturb, score, blend, return the first action.

    Each rollout m draws noise from its own generator keyed by
    (cfg.seed, step_index, m), so serial and concurrent evaluation give
    bit-identical plans.  Weights are a max-shifted softmax of rollout
    returns.  Returns (action, shifted base plan, diagnostics).
    """
    base = np.asarray(base_plan, float)
    if base.ndim != 2 or base.shape[0] != cfg.horizon:
        raise ValueError("base_plan must have shape (horizon, action_dim)")
    dim = base.shape[1]
    sigma = np.asarray(cfg.sigma, float)
    if sigma.shape != (dim,):
        raise ValueError("sigma length must match action dimension")
    if step_fn is None:
        step_fn = sim.step

    def shift(plan):
        return np.vstack([plan[1:], np.zeros((1, dim))])

    if not sigma.any():
        # No perturbation: every rollout is the base plan, so return it
        # exactly rather than averaging identical copies.
        plan = base.copy()
        diag = {"returns": None, "weights": None, "plan": plan,
                "n_diverged": 0}
        return plan[0].copy(), shift(plan), diag

    def eval_rollout(m):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed,
                                   spawn_key=(step_index, m)))
        plan = base + rng.normal(0.0, 1.0, base.shape) * sigma
        if limits is not None:
            lim = np.asarray(limits, float)
            plan = np.clip(plan, -lim, lim)
        trial = env.clone()
        total = 0.0
        try:
            for t in range(cfg.horizon):
                if trial.done:
                    break
                trial, events, terms = step_fn(trial, plan[t])
                total += reward_fn(trial, events, terms)
        except sim.SimulationBlowup:
            return plan, -math.inf
        if not math.isfinite(total):
            return plan, -math.inf
        return plan, total

    workers = _n_threads()
    if workers > 1 and cfg.n_rollouts > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_rollout, range(cfg.n_rollouts)))
    else:
        results = [eval_rollout(m) for m in range(cfg.n_rollouts)]

    plans = np.stack([p for p, _ in results])
    returns = np.array([r for _, r in results])
    finite = np.isfinite(returns)
    if not finite.any():
        raise RuntimeError(
            f"all {cfg.n_rollouts} MPPI rollouts diverged at step "
            f"{step_index}")
    best = returns[finite].max()
    w = np.exp((returns - best) / cfg.temperature)
    w_sum = w.sum()
    weights = w / w_sum
    plan = np.einsum("m,mhd->hd", weights, plans)
    diag = {"returns": returns, "weights": weights, "plan": plan,
            "n_diverged": int((~finite).sum())}
    return plan[0].copy(), shift(plan), diag


def rollout_episode(shape: ToolShape, keypoints, grasp_idx: int,
                    inter_idx: int, task: str, cfg: MppiConfig | None = None,
                    mode: str = "train", seed: int = 0, *,
                    tool_id: str = "tool", scene: dict | None = None,
                    max_steps: int | None = None, replan_every: int = 1,
                    gripper_width: float = DEFAULT_GRIPPER_WIDTH,
                    friction_angle: float = DEFAULT_FRICTION_ANGLE,
                    grasp_radius: float = DEFAULT_GRASP_RADIUS):
    """Run one grasp-plan-act episode and return (Trajectory, ExperienceTuple).

    The grasp gate comes first: no valid pinch near K[grasp_idx] means the
    episode ends with reward 0 and grasp_success=False.  Otherwise the tool
    attaches at the grasp keypoint and an MPPI loop replans until the
    environment finishes.  In train mode the output inter_idx is replaced by
    the keypoint nearest the first contact; in eval mode task reward is
    gated to zero whenever that keypoint differs from the selected one.
    A simulation blow-up discards the episode via EpisodeDiscarded.
    """
    if cfg is None:
        cfg = MppiConfig()
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if replan_every < 1:
        raise ValueError("replan_every must be at least 1")
    K = np.asarray(keypoints, float)
    m = len(K)
    if not (0 <= grasp_idx < m and 0 <= inter_idx < m):
        raise ValueError("keypoint indices out of range")

    traj = Trajectory(task=task, bbox_diag=_shape_diag(shape))
    grasp = plan_grasp(shape, K[grasp_idx], gripper_width, friction_angle,
                       grasp_radius)
    if not grasp.valid:
        return traj, ExperienceTuple(tool_id, K, grasp_idx, inter_idx, 0.0,
                                     False, False, mode)
    traj.grasp_midpoint = grasp.grasp_point

    env = sim.make_env(task, scene)
    env = sim.attach_tool(env, shape, K[grasp_idx], K[inter_idx],
                          keypoints=K, inter_idx=inter_idx,
                          eval_gating=(mode == "eval"))
    if max_steps is not None:
        env.max_steps = min(env.max_steps, int(max_steps))
    traj.params = dict(env.params)
    traj.init_poses = {b.body_id: (b.x, b.y, b.th) for b in env.bodies}

    ecfg = replace(cfg, seed=seed)
    base = np.zeros((cfg.horizon, 3))
    total = 0.0
    try:
        while not env.done:
            action, base, _ = mppi_step(env, default_reward, base, ecfg,
                                        step_index=env.step_count,
                                        limits=SIM_LIMITS)
            env, events, terms = sim.step(env, action)
            total += terms.total
            traj.records.append(sim.snapshot(env, events, terms))
            for _ in range(replan_every - 1):
                if env.done:
                    break
                action = base[0].copy()
                base = np.vstack([base[1:], np.zeros((1, 3))])
                env, events, terms = sim.step(env, action)
                total += terms.total
                traj.records.append(sim.snapshot(env, events, terms))
    except sim.SimulationBlowup as exc:
        raise EpisodeDiscarded(
            f"{task} episode for {tool_id} (grasp {grasp_idx}, inter "
            f"{inter_idx}, seed {seed}) diverged at step {env.step_count}: "
            f"{exc}") from exc

    out_inter = inter_idx
    if mode == "train" and env.first_hit is not None \
            and env.first_hit[3] is not None:
        out_inter = int(env.first_hit[3])
    succ = task_success(traj, task)
    return traj, ExperienceTuple(tool_id, K, grasp_idx, out_inter,
                                 float(total), True, bool(succ), mode)


def _first_tool_contact(trajectory: Trajectory):
    """First tool-body contact as (record, event), or None."""
    for rec in trajectory.records:
        for ev in rec.contacts:
            if ev.body_a.startswith("tool:"):
                return rec, ev
    return None


def is_compatible(trajectory: Trajectory, grasp_point, inter_point,
                  delta: float | None = None) -> bool:
    """True iff the realized grasp midpoint lies within delta of
    grasp_point and the first tool contact lies within delta of
    inter_point (both in the tool frame).  No contact means False."""
    if delta is None:
        delta = 0.1 * trajectory.bbox_diag
    if not delta > 0:
        raise ValueError("delta must be positive")
    if trajectory.grasp_midpoint is None:
        return False
    gp = np.asarray(grasp_point, float)
    mid = np.asarray(trajectory.grasp_midpoint, float)
    if np.hypot(*(mid - gp)) > delta:
        return False
    hit = _first_tool_contact(trajectory)
    if hit is None:
        return False
    rec, ev = hit
    tx, ty, th = rec.tool_pose
    c, s = math.cos(th), math.sin(th)
    dx = ev.point[0] - tx
    dy = ev.point[1] - ty
    local = np.array([c * dx + s * dy, -s * dx + c * dy])
    ip = np.asarray(inter_point, float)
    return bool(np.hypot(*(local - ip)) <= delta)


def task_success(trajectory: Trajectory, task: str | None = None) -> bool:
    """Task-specific completion read off the trajectory log.

    hook: final thermos-goal distance < 0.05 m with no penalty latched.
    reach: cylinder displacement from start > 0.05 m.
    hammer: inserted depth (initial + travel along the slide axis)
    exceeds half the peg length.
    """
    if task is None:
        task = trajectory.task
    if not trajectory.records:
        return False
    last = trajectory.records[-1]
    p = trajectory.params
    if task == "hook":
        gx, gy = p["goal"]
        x, y, _ = last.body_poses["thermos"]
        if any(last.reward.penalty_flags.values()):
            return False
        return math.hypot(x - gx, y - gy) < 0.05
    if task == "reach":
        x0, y0, _ = trajectory.init_poses["cylinder"]
        x, y, _ = last.body_poses["cylinder"]
        return math.hypot(x - x0, y - y0) > 0.05
    if task == "hammer":
        x0, y0, _ = trajectory.init_poses["peg"]
        x, y, _ = last.body_poses["peg"]
        ax, ay = p["goal_axis"]
        travel = (x - x0) * ax + (y - y0) * ay
        inserted = p["peg_inserted0"] + travel
        return inserted > 0.5 * p["peg_length"]
    raise ValueError(f"unknown task {task!r}")


@dataclass
class PointMass1D:
    """Tiny 1D double integrator used to sanity-check the planner."""
    x: float = 0.0
    v: float = 0.0
    goal: float = 0.37
    dt: float = 0.1
    step_count: int = 0
    done: bool = False

    def clone(self) -> "PointMass1D":
        return replace(self)


@dataclass(frozen=True)
class _ToyTerms:
    total: float


def point_mass_step(env: PointMass1D, action):
    a = float(np.clip(np.asarray(action, float).ravel()[0], -1.0, 1.0))
    nxt = replace(env)
    nxt.v = env.v + a * env.dt
    nxt.x = env.x + nxt.v * env.dt
    nxt.step_count = env.step_count + 1
    return nxt, [], _ToyTerms(-(nxt.x - nxt.goal) ** 2)
