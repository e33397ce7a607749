"""Planar impulse-based rigid world with a position-commanded tool.

The world is viewed top-down, so there is no gravity; table drag is modeled
as per-body viscous damping. The tool is welded to a gripper disc at a grasp
point and driven by clamped per-step pose increments. During contact it
exchanges impulses through its rotational inertia about the grasp pivot, so
both the lever arm of the strike and the tool's mass distribution shape the
impulse delivered to dynamic bodies; the commanded trajectory itself is never
altered by contact (moves into static geometry are simply reverted).

Three task scenes are provided: pulling a handled canister to a goal (hook),
pushing a cylinder through a narrow wall opening (reach), and driving a
sliding peg into a block (hammer). Rewards follow a shared shape: a weighted
task-completion term that is zeroed while any penalty flag is latched, plus a
guidance term pulling the selected interaction point toward the task target.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .geom import ToolShape

DT = 0.02
MAX_STEPS = 120
CLAMP_XY = 0.02
CLAMP_TH = 0.05

PEN_TOL = 1e-4      # max residual overlap after positional correction
PEN_SLOP = 2e-5     # overlap left in place so resting contacts stay stable
REVERT_TOL = 5e-5   # tool move rejected if it would overlap statics deeper
CORRECT_BETA = 0.8
CORRECT_ITERS = 10
VEL_PASSES = 3
TOUCH_TOL = 2e-3    # proximity that counts as the gripper touching something

GRIPPER_RADIUS = 0.02
GRIPPER_RESTITUTION = 0.3
GRIPPER_FRICTION = 0.6
WORLD_FRICTION = 0.4  # scene bodies; tool parts use their material value

W_TASK = {"hook": 10000.0, "reach": 10000.0, "hammer": 1.0}
DRIFT_MAX = 0.05
REACH_TOL = 0.03
HOOK_SUCCESS_DIST = 0.05
REACH_SUCCESS_DIST = 0.05
HAMMER_POST_CONTACT_STEPS = 10

TASKS = ("hook", "reach", "hammer")


class SimulationBlowup(RuntimeError):
    """Raised when integration produces a non-finite state."""


# ---------------------------------------------------------------------------
# bodies

@dataclass
class Body:
    """Rigid collider set with pose (x, y, th) and velocity (vx, vy, om).

    Colliders are body-frame tuples, either ("poly", ((x, y), ...)) with CCW
    vertices or ("disc", (cx, cy, r)). The body origin is its center of mass.
    kind "kinematic" and "static" bodies have zero inverse mass. A prismatic
    axis restricts motion to origin + travel * axis with travel in
    [0, travel_max]; such bodies do not rotate.
    """

    body_id: str
    kind: str
    colliders: tuple
    bounds: tuple = ()  # per-collider (cx, cy, r) in body frame
    x: float = 0.0
    y: float = 0.0
    th: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    om: float = 0.0
    mass: float = 0.0
    inertia: float = 0.0
    restitution: float = 0.5
    friction: float = WORLD_FRICTION
    lin_damping: float = 0.0
    ang_damping: float = 0.0
    axis: tuple | None = None
    travel: float = 0.0
    travel_max: float = 0.0
    damping_force: float = 0.0  # prismatic channel drag (N per m/s)
    bound_r: float = 0.0
    _static_wc: list | None = None

    def clone(self) -> "Body":
        b = Body(self.body_id, self.kind, self.colliders, self.bounds,
                 self.x, self.y,
                 self.th, self.vx, self.vy, self.om, self.mass, self.inertia,
                 self.restitution, self.friction,
                 self.lin_damping, self.ang_damping,
                 self.axis, self.travel, self.travel_max, self.damping_force,
                 self.bound_r, self._static_wc)
        return b

    def world_colliders(self) -> list[tuple]:
        """(collider, bound) pairs in world frame, in stored order.

        World polygon colliders carry their canonical face axes:
        ("poly", verts, axes). Static bodies cache the result.
        """
        if self.kind == "static" and self._static_wc is not None:
            return self._static_wc
        c = math.cos(self.th)
        s = math.sin(self.th)
        x = self.x
        y = self.y
        out = []
        for (kind, *data), (bx, by, br) in zip(self.colliders, self.bounds):
            wb = (x + c * bx - s * by, y + s * bx + c * by, br)
            if kind == "poly":
                verts, axes = data
                out.append((("poly",
                             tuple((x + c * px - s * py, y + s * px + c * py)
                                   for px, py in verts),
                             tuple((c * ax - s * ay, s * ax + c * ay)
                                   for ax, ay in axes)), wb))
            else:
                cx, cy, r = data[0]
                out.append((("disc", (x + c * cx - s * cy,
                                      y + s * cx + c * cy, r)), wb))
        if self.kind == "static":
            self._static_wc = out
        return out


def _poly_props(verts) -> tuple[float, float, float, float]:
    """(area, cx, cy, polar inertia about the centroid) for CCW vertices."""
    a = sx = sy = ip = 0.0
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        cr = x0 * y1 - x1 * y0
        a += cr
        sx += (x0 + x1) * cr
        sy += (y0 + y1) * cr
        ip += (x0 * x0 + x0 * x1 + x1 * x1 + y0 * y0 + y0 * y1 + y1 * y1) * cr
    a *= 0.5
    cx = sx / (6.0 * a)
    cy = sy / (6.0 * a)
    ip = ip / 12.0 - a * (cx * cx + cy * cy)
    return a, cx, cy, ip


def build_body(body_id: str, kind: str, pieces: list[tuple],
               pose: tuple = (0.0, 0.0, 0.0), restitution: float = 0.5,
               friction: float = WORLD_FRICTION,
               lin_damping: float = 0.0, ang_damping: float = 0.0,
               axis: tuple | None = None, travel_max: float = 0.0,
               damping_force: float = 0.0) -> Body:
    """Assemble a body from (collider, mass) pieces, recentered on its com.

    pieces entries are (("poly", verts), m) or (("disc", (cx, cy, r)), m).
    Static bodies may pass mass 0.
    """
    total = sum(m for _, m in pieces)
    if total > 0.0:
        cx = sum(_piece_com(c)[0] * m for c, m in pieces) / total
        cy = sum(_piece_com(c)[1] * m for c, m in pieces) / total
    else:
        cx = cy = 0.0
    colliders = []
    bounds = []
    inertia = 0.0
    bound = 0.0
    for (ckind, data), m in pieces:
        if ckind == "poly":
            verts = tuple((px - cx, py - cy) for px, py in data)
            colliders.append(("poly", verts, _canonical_axes(verts)))
            bounds.append(_poly_bound(verts))
            if m > 0.0:
                area, pcx, pcy, ip = _poly_props(verts)
                rho = m / area
                inertia += rho * ip + m * (pcx * pcx + pcy * pcy)
            bound = max(bound, max(math.hypot(px, py) for px, py in verts))
        else:
            dx, dy, r = data
            dx -= cx
            dy -= cy
            colliders.append(("disc", (dx, dy, r)))
            bounds.append((dx, dy, r))
            if m > 0.0:
                inertia += 0.5 * m * r * r + m * (dx * dx + dy * dy)
            bound = max(bound, math.hypot(dx, dy) + r)
    x0, y0, th0 = pose
    return Body(body_id, kind, tuple(colliders), tuple(bounds),
                x0 + cx, y0 + cy, th0,
                mass=total, inertia=inertia, restitution=restitution,
                friction=friction,
                lin_damping=lin_damping, ang_damping=ang_damping,
                axis=axis, travel_max=travel_max, damping_force=damping_force,
                bound_r=bound)


def _piece_com(collider) -> tuple[float, float]:
    kind, data = collider
    if kind == "poly":
        _, cx, cy, _ = _poly_props(data)
        return cx, cy
    return data[0], data[1]


# ---------------------------------------------------------------------------
# narrow-phase collision (single contact point per collider pair)

def _canonical_axes(poly) -> tuple[tuple[float, float], ...]:
    """Unit face normals deduplicated up to sign (interval tests are even)."""
    axes = []
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        ex = x1 - x0
        ey = y1 - y0
        ln = math.hypot(ex, ey)
        if ln < 1e-12:
            continue
        ax = ey / ln
        ay = -ex / ln
        if ax < 0.0 or (ax == 0.0 and ay < 0.0):
            ax, ay = -ax, -ay
        for bx, by in axes:
            if abs(ax - bx) < 1e-12 and abs(ay - by) < 1e-12:
                break
        else:
            axes.append((ax, ay))
    return tuple(axes)


def _rotate_axes(axes, c, s):
    return [(c * ax - s * ay, s * ax + c * ay) for ax, ay in axes]


def _project(poly, ax, ay):
    lo = hi = poly[0][0] * ax + poly[0][1] * ay
    for px, py in poly[1:]:
        d = px * ax + py * ay
        if d < lo:
            lo = d
        elif d > hi:
            hi = d
    return lo, hi


def collide_poly_poly(A, axes_a, B, axes_b):
    """Deepest-axis contact between convex CCW polygons.

    axes_* are the polygons' world-frame canonical face normals.  Returns
    (depth, nx, ny, px, py) with the normal pointing from A into B, or None
    when separated.
    """
    best_depth = 1e30
    best_nx = best_ny = 0.0
    best_from_a = True
    n_a = len(axes_a)
    for k, (ax, ay) in enumerate(axes_a + axes_b):
        a_lo, a_hi = _project(A, ax, ay)
        b_lo, b_hi = _project(B, ax, ay)
        o1 = a_hi - b_lo
        o2 = b_hi - a_lo
        if o1 <= 0.0 or o2 <= 0.0:
            return None
        if o1 < o2:
            depth, nx, ny = o1, ax, ay
        else:
            depth, nx, ny = o2, -ax, -ay
        if depth < best_depth:
            best_depth, best_nx, best_ny = depth, nx, ny
            best_from_a = k < n_a
    nx, ny = best_nx, best_ny
    if best_from_a:
        # reference face on A: contact at B's deepest vertex along -n
        px, py = min(B, key=lambda v: v[0] * nx + v[1] * ny)
    else:
        px, py = max(A, key=lambda v: v[0] * nx + v[1] * ny)
    return best_depth, nx, ny, px, py


def collide_poly_disc(P, cx, cy, r):
    """Contact between convex CCW polygon and disc; normal points P -> disc."""
    n = len(P)
    inside = True
    best_d = -1e30
    best_edge = 0
    for i in range(n):
        x0, y0 = P[i]
        x1, y1 = P[(i + 1) % n]
        ex = x1 - x0
        ey = y1 - y0
        ln = math.hypot(ex, ey)
        if ln < 1e-12:
            continue
        # signed distance of disc center along the outward edge normal
        d = ((cx - x0) * ey - (cy - y0) * ex) / ln
        if d > 0.0:
            inside = False
        if d > best_d:
            best_d = d
            best_edge = i
    if inside:
        x0, y0 = P[best_edge]
        x1, y1 = P[(best_edge + 1) % n]
        ex = x1 - x0
        ey = y1 - y0
        ln = math.hypot(ex, ey)
        nx = ey / ln
        ny = -ex / ln
        depth = r - best_d  # best_d <= 0 inside
        return depth, nx, ny, cx - nx * best_d, cy - ny * best_d
    # closest point on the boundary
    qx = qy = 0.0
    dq = 1e30
    for i in range(n):
        x0, y0 = P[i]
        x1, y1 = P[(i + 1) % n]
        ex = x1 - x0
        ey = y1 - y0
        ll = ex * ex + ey * ey
        if ll < 1e-24:
            continue
        t = ((cx - x0) * ex + (cy - y0) * ey) / ll
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        px = x0 + t * ex
        py = y0 + t * ey
        d2 = (cx - px) ** 2 + (cy - py) ** 2
        if d2 < dq:
            dq = d2
            qx, qy = px, py
    dist = math.sqrt(dq)
    if dist >= r:
        return None
    if dist > 1e-12:
        nx = (cx - qx) / dist
        ny = (cy - qy) / dist
    else:
        nx, ny = 1.0, 0.0
    return r - dist, nx, ny, qx, qy


def collide_disc_disc(c1x, c1y, r1, c2x, c2y, r2):
    dx = c2x - c1x
    dy = c2y - c1y
    d = math.hypot(dx, dy)
    if d >= r1 + r2:
        return None
    if d > 1e-12:
        nx, ny = dx / d, dy / d
    else:
        nx, ny = 1.0, 0.0
    depth = r1 + r2 - d
    return depth, nx, ny, c1x + nx * (r1 - 0.5 * depth), c1y + ny * (r1 - 0.5 * depth)


def _collide(ca, cb):
    """Dispatch on world-frame collider tuples; normal points a -> b.

    Polygon colliders are ("poly", verts, axes); discs are
    ("disc", (cx, cy, r)).
    """
    if ca[0] == "poly" and cb[0] == "poly":
        return collide_poly_poly(ca[1], ca[2], cb[1], cb[2])
    if ca[0] == "poly":
        db = cb[1]
        return collide_poly_disc(ca[1], db[0], db[1], db[2])
    da = ca[1]
    if cb[0] == "poly":
        hit = collide_poly_disc(cb[1], da[0], da[1], da[2])
        if hit is None:
            return None
        depth, nx, ny, px, py = hit
        return depth, -nx, -ny, px, py
    db = cb[1]
    return collide_disc_disc(da[0], da[1], da[2], db[0], db[1], db[2])


def _poly_bound(verts) -> tuple[float, float, float]:
    cx = sum(p[0] for p in verts) / len(verts)
    cy = sum(p[1] for p in verts) / len(verts)
    r = max(math.hypot(p[0] - cx, p[1] - cy) for p in verts)
    return cx, cy, r


# ---------------------------------------------------------------------------
# tool state

@dataclass
class ToolState:
    """Kinematic tool welded to the gripper at a grasp point.

    part_polys holds (vertices, restitution, friction, label) per convex
    part in the tool frame; keypoints, grasp and interaction points share
    that frame.
    Contact impulses are exchanged through the tool's inertia about the grasp
    pivot; recoil_om is the transient pivot recoil within a single step and is
    discarded afterwards (the commanded pose is authoritative).
    """

    shape: ToolShape
    part_polys: tuple
    part_bounds: tuple
    part_axes: tuple
    grasp_t: tuple
    inter_t: tuple
    keypoints: tuple | None
    inter_idx: int | None
    mass: float
    com_t: tuple
    inertia_grasp: float
    bound_r: float = 0.0  # circle about the tool origin covering every probe
    x: float = 0.0
    y: float = 0.0
    th: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    om: float = 0.0
    recoil_om: float = 0.0

    def clone(self) -> "ToolState":
        return ToolState(self.shape, self.part_polys, self.part_bounds,
                         self.part_axes, self.grasp_t,
                         self.inter_t, self.keypoints, self.inter_idx,
                         self.mass, self.com_t, self.inertia_grasp,
                         self.bound_r,
                         self.x, self.y, self.th, self.vx, self.vy, self.om,
                         self.recoil_om)

    def world_point(self, p: tuple) -> tuple[float, float]:
        c = math.cos(self.th)
        s = math.sin(self.th)
        return (self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1])

    def tool_frame(self, px: float, py: float) -> tuple[float, float]:
        c = math.cos(self.th)
        s = math.sin(self.th)
        dx = px - self.x
        dy = py - self.y
        return (c * dx + s * dy, -s * dx + c * dy)

    def grasp_world(self) -> tuple[float, float]:
        return self.world_point(self.grasp_t)

    def world_probes(self) -> list[tuple]:
        """(("poly", world verts, world axes), restitution, friction,
        label, bound)."""
        c = math.cos(self.th)
        s = math.sin(self.th)
        out = []
        for (verts, e, mu, label), (bx, by, br), axes in zip(
                self.part_polys, self.part_bounds, self.part_axes):
            wb = (self.x + c * bx - s * by, self.y + s * bx + c * by, br)
            wv = tuple((self.x + c * px - s * py, self.y + s * px + c * py)
                       for px, py in verts)
            wa = tuple((c * ax - s * ay, s * ax + c * ay) for ax, ay in axes)
            out.append((("poly", wv, wa), e, mu, label, wb))
        return out

    def point_velocity(self, px: float, py: float) -> tuple[float, float]:
        gx, gy = self.grasp_world()
        w = self.om + self.recoil_om
        return (self.vx - w * (py - gy), self.vy + w * (px - gx))


def tool_mass_properties(shape: ToolShape) -> tuple[float, tuple, float]:
    """(mass, com in tool frame, inertia about the com).

    Where the two parts overlap the head material wins, so the overlap
    integrals are removed from the handle's contribution.
    """
    m = sx = sy = ip = 0.0
    for part in shape.parts:
        a, psx, psy, pip = shape.region_integrals[part.label]
        rho = part.material.density
        m += rho * a
        sx += rho * psx
        sy += rho * psy
        ip += rho * pip
    if len(shape.parts) == 2:
        a, psx, psy, pip = shape.region_integrals["overlap"]
        rho = shape.part_by_label("handle").material.density
        m -= rho * a
        sx -= rho * psx
        sy -= rho * psy
        ip -= rho * pip
    cx = sx / m
    cy = sy / m
    return m, (cx, cy), ip - m * (cx * cx + cy * cy)


# ---------------------------------------------------------------------------
# contacts and rewards

@dataclass
class ContactEvent:
    step: int
    body_a: str
    body_b: str
    point: tuple
    normal: tuple  # unit, pointing from body_a into body_b
    impulse: float
    rel_speed: float
    part_a: str = ""
    part_b: str = ""

    def to_dict(self) -> dict:
        return {"step": self.step, "a": self.body_a, "b": self.body_b,
                "point": [self.point[0], self.point[1]],
                "normal": [self.normal[0], self.normal[1]],
                "impulse": self.impulse, "rel_speed": self.rel_speed,
                "part_a": self.part_a, "part_b": self.part_b}


@dataclass
class RewardTerms:
    c_task: float
    guidance: float
    weight: float
    penalty_flags: dict
    total: float

    def to_dict(self) -> dict:
        return {"c_task": self.c_task, "guidance": self.guidance,
                "weight": self.weight, "penalty_flags": dict(self.penalty_flags),
                "total": self.total}


# ---------------------------------------------------------------------------
# task environment

@dataclass
class TaskEnv:
    task: str
    bodies: list
    tool: ToolState | None = None
    dt: float = DT
    max_steps: int = MAX_STEPS
    step_count: int = 0
    time: float = 0.0
    masks: tuple = ()
    params: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    eval_gating: bool = False
    ct_allowed: bool = True
    first_hit: tuple | None = None  # (step, px, py, nearest_kp, axial_impulse)
    done: bool = False
    done_reason: str = ""

    def clone(self) -> "TaskEnv":
        env = TaskEnv(self.task, [b.clone() for b in self.bodies],
                      self.tool.clone() if self.tool else None,
                      self.dt, self.max_steps, self.step_count, self.time,
                      self.masks, self.params, dict(self.flags),
                      self.eval_gating, self.ct_allowed, self.first_hit,
                      self.done, self.done_reason)
        return env

    def body(self, body_id: str) -> Body:
        for b in self.bodies:
            if b.body_id == body_id:
                return b
        raise KeyError(body_id)

    def x_target(self) -> tuple[float, float]:
        """Current world position of the task target point."""
        if self.task == "hook":
            b = self.body("thermos")
            pc = self.params["tab_center"]
            c = math.cos(b.th)
            s = math.sin(b.th)
            return (b.x + c * pc[0] - s * pc[1], b.y + s * pc[0] + c * pc[1])
        if self.task == "reach":
            return self.params["hole_entrance"]
        peg = self.body("peg")
        return (peg.x, peg.y + 0.5 * self.params["peg_length"])

    def state_vector(self) -> tuple:
        """Flat float tuple of all evolving state (for determinism checks)."""
        out = [self.time, float(self.step_count)]
        for b in self.bodies:
            out.extend((b.x, b.y, b.th, b.vx, b.vy, b.om, b.travel))
        if self.tool is not None:
            t = self.tool
            out.extend((t.x, t.y, t.th))
        return tuple(out)


def default_scene(task: str) -> dict:
    """Serializable scene constants for a task."""
    if task == "hook":
        return {
            "task": "hook",
            "thermos_radius": 0.045,
            "tab_size": [0.07, 0.016],
            "thermos_start": [0.0, 0.42],
            "goal": [0.0, 0.18],
            "thermos_mass": 0.4,
            "restitution": 0.3,
            "damping": 8.0,
            "drift_max": DRIFT_MAX,
        }
    if task == "reach":
        return {
            "task": "reach",
            "wall_y": [0.235, 0.265],
            "wall_x": 0.6,
            "hole_half_width": 0.0175,
            "cylinder_radius": 0.02,
            "cylinder_start": [0.0, 0.34],
            "cylinder_mass": 0.15,
            "restitution": 0.3,
            "damping": 8.0,
            "reach_tol": REACH_TOL,
        }
    if task == "hammer":
        return {
            "task": "hammer",
            "box_x": 0.08,
            "box_y": [0.24, 0.30],
            "peg_width": 0.02,
            "peg_length": 0.08,
            "peg_exposed": 0.06,
            "peg_mass": 0.01,
            "peg_restitution": 0.7,
            "peg_drag": 0.7,
            "travel_max": 0.04,
        }
    raise ValueError(f"task must be one of {TASKS}")


def make_env(task: str, scene: dict | None = None) -> TaskEnv:
    """Build the static/dynamic bodies of a task scene (no tool attached)."""
    scene = scene or default_scene(task)
    if task == "hook":
        r = scene["thermos_radius"]
        tw, th = scene["tab_size"]
        sx, sy = scene["thermos_start"]
        tab = ((r, -th / 2), (r + tw, -th / 2), (r + tw, th / 2), (r, th / 2))
        m = scene["thermos_mass"]
        disc_m = 0.85 * m
        tab_m = 0.15 * m
        thermos = build_body(
            "thermos", "dynamic",
            [(("disc", (0.0, 0.0, r)), disc_m), (("poly", tab), tab_m)],
            pose=(sx, sy, 0.0), restitution=scene["restitution"],
            lin_damping=scene["damping"], ang_damping=scene["damping"])
        # tab center in the recentered body frame
        tab_cx = r + tw / 2 - (thermos.x - sx)
        tab_cy = -(thermos.y - sy)
        env = TaskEnv("hook", [thermos])
        env.params = {
            "goal": tuple(scene["goal"]),
            "tab_center": (tab_cx, tab_cy),
            "drift_max": scene["drift_max"],
            "start_x": thermos.x,
            "start": (thermos.x, thermos.y),
        }
        env.flags = {"dropped": False, "gripper_target": False,
                     "body_contact": False, "x_drift": False}
        return env
    if task == "reach":
        y0, y1 = scene["wall_y"]
        wx = scene["wall_x"]
        hw = scene["hole_half_width"]
        left = ((-wx, y0), (-hw, y0), (-hw, y1), (-wx, y1))
        right = ((hw, y0), (wx, y0), (wx, y1), (hw, y1))
        wall = build_body("wall", "static",
                          [(("poly", left), 0.0), (("poly", right), 0.0)],
                          restitution=0.4)
        cx, cy = scene["cylinder_start"]
        cyl = build_body("cylinder", "dynamic",
                         [(("disc", (0.0, 0.0, scene["cylinder_radius"])),
                           scene["cylinder_mass"])],
                         pose=(cx, cy, 0.0), restitution=scene["restitution"],
                         lin_damping=scene["damping"])
        env = TaskEnv("reach", [wall, cyl])
        env.params = {
            "hole_entrance": (0.0, y0 - 0.015),
            "cyl_init": (cx, cy),
            "reach_tol": scene["reach_tol"],
        }
        env.flags = {"dropped": False, "gripper_target": False}
        return env
    if task == "hammer":
        bx = scene["box_x"]
        y0, y1 = scene["box_y"]
        box = build_body("box", "static",
                         [(("poly", ((-bx, y0), (bx, y0), (bx, y1), (-bx, y1))), 0.0)],
                         restitution=0.4)
        w = scene["peg_width"]
        length = scene["peg_length"]
        exposed = scene["peg_exposed"]
        top = y1 + exposed
        rect = ((-w / 2, -length / 2), (w / 2, -length / 2),
                (w / 2, length / 2), (-w / 2, length / 2))
        peg = build_body("peg", "dynamic", [(("poly", rect), scene["peg_mass"])],
                         pose=(0.0, top - length / 2, 0.0),
                         restitution=scene["peg_restitution"],
                         axis=(0.0, -1.0), travel_max=scene["travel_max"],
                         damping_force=scene["peg_drag"])
        env = TaskEnv("hammer", [box, peg], masks=(frozenset(("peg", "box")),))
        env.params = {
            "peg_length": length,
            "peg_inserted0": length - exposed,
            "goal_axis": (0.0, -1.0),
        }
        env.flags = {"dropped": False, "gripper_target": False}
        return env
    raise ValueError(f"task must be one of {TASKS}")


# approach geometry per task: the interaction point starts at
# x_target + standoff * lift, with the grasp offset along -heading
_APPROACH = {
    "hook": {"lift": (0.0, 1.0), "heading": (0.0, -1.0), "standoff": 0.08},
    "reach": {"lift": (0.0, -1.0), "heading": (0.0, 1.0), "standoff": 0.10},
    "hammer": {"lift": (0.0, 1.0), "heading": (1.0, 0.0), "standoff": 0.06},
}


def attach_tool(env: TaskEnv, shape: ToolShape, k_grasp, k_inter,
                keypoints=None, inter_idx: int | None = None,
                eval_gating: bool = False, tol: float = 1e-5) -> TaskEnv:
    """Weld the tool to the gripper at k_grasp and pose it for the task.

    k_grasp and k_inter are tool-frame points that must lie on the outline.
    The tool is posed so k_inter sits on the approach line to the target at a
    standoff, with the grasp trailing away along the task heading; the pose
    backs off along the lift direction until nothing overlaps.
    """
    gx, gy = float(k_grasp[0]), float(k_grasp[1])
    ix, iy = float(k_inter[0]), float(k_inter[1])
    _, _, d = shape.project((gx, gy))
    if d > tol:
        raise ValueError(f"grasp point is {d:.2e} m off the tool outline")
    mass, com, i_com = tool_mass_properties(shape)
    dgx = gx - com[0]
    dgy = gy - com[1]
    i_grasp = i_com + mass * (dgx * dgx + dgy * dgy)
    parts = tuple((tuple(map(tuple, p.vertices)), p.material.restitution,
                   p.material.friction, p.label)
                  for p in shape.parts)
    part_bounds = tuple(_poly_bound(verts) for verts, *_ in parts)
    part_axes = tuple(_canonical_axes(verts) for verts, *_ in parts)
    bound_r = max(max(math.hypot(bx, by) + br for bx, by, br in part_bounds),
                  math.hypot(gx, gy) + GRIPPER_RADIUS)
    kps = tuple(map(tuple, keypoints)) if keypoints is not None else None
    tool = ToolState(shape, parts, part_bounds, part_axes, (gx, gy), (ix, iy),
                     kps, inter_idx, mass, com, i_grasp, bound_r)

    ap = _APPROACH[env.task]
    hx, hy = ap["heading"]
    ang = math.atan2(hy, hx) - math.atan2(iy - gy, ix - gx)
    tool.th = ang
    span = math.hypot(ix - gx, iy - gy)
    tx, ty = env.x_target()
    lx, ly = ap["lift"]
    standoff = ap["standoff"]
    c = math.cos(ang)
    s = math.sin(ang)
    for _ in range(30):
        px = tx + lx * standoff
        py = ty + ly * standoff
        gwx = px - hx * span
        gwy = py - hy * span
        tool.x = px - (c * ix - s * iy)
        tool.y = py - (s * ix + c * iy)
        # keep the weld exact in the face of rounding
        tool.x += gwx - (tool.x + c * gx - s * gy)
        tool.y += gwy - (tool.y + s * gx + c * gy)
        if not _attach_overlaps(env, tool):
            break
        standoff += 0.02
    env.tool = tool
    env.eval_gating = eval_gating
    env.ct_allowed = True
    return env


def _attach_overlaps(env: TaskEnv, tool: ToolState) -> bool:
    """Does the posed tool or gripper overlap anything in the scene?"""
    probes = _tool_probes(tool)
    for b in env.bodies:
        for wc, (bx, by, br) in b.world_colliders():
            for pc, _, _, _, (ax, ay, ar) in probes:
                dx = ax - bx
                dy = ay - by
                rr = ar + br
                if dx * dx + dy * dy > rr * rr:
                    continue
                if _collide(pc, wc) is not None:
                    return True
    return False


# ---------------------------------------------------------------------------
# stepping

def step(env: TaskEnv, action) -> tuple[TaskEnv, list, RewardTerms]:
    """Advance one control period; returns (env, contact events, rewards).

    The env is mutated in place. Raises SimulationBlowup on non-finite state.
    """
    if env.tool is None:
        raise ValueError("attach a tool before stepping")
    if env.done:
        terms = RewardTerms(0.0, 0.0, W_TASK[env.task], dict(env.flags), 0.0)
        return env, [], terms
    dx = _clamp(float(action[0]), CLAMP_XY)
    dy = _clamp(float(action[1]), CLAMP_XY)
    dth = _clamp(float(action[2]), CLAMP_TH)

    tool = env.tool
    dt = env.dt
    gx, gy = tool.grasp_world()
    new_th = tool.th + dth
    c = math.cos(new_th)
    s = math.sin(new_th)
    new_x = gx + dx - (c * tool.grasp_t[0] - s * tool.grasp_t[1])
    new_y = gy + dy - (s * tool.grasp_t[0] + c * tool.grasp_t[1])

    probes = _probes_at(tool, new_x, new_y, new_th)
    if _tool_blocked(env, new_x, new_y, probes):
        tool.vx = tool.vy = tool.om = 0.0
        probes = _tool_probes(tool)
    else:
        tool.x, tool.y, tool.th = new_x, new_y, new_th
        tool.vx = dx / dt
        tool.vy = dy / dt
        tool.om = dth / dt
    tool.recoil_om = 0.0

    contacts = _find_contacts(env, probes)
    events = _resolve(env, contacts)
    _integrate(env)
    _correct_positions(env, probes)
    _check_finite(env)

    env.step_count += 1
    env.time += dt
    for ev in events:
        ev.step = env.step_count
    _update_first_hit(env, events)
    terms = _reward(env, events)
    _update_done(env, terms)
    return env, events, terms


def _clamp(v: float, lim: float) -> float:
    if v > lim:
        return lim
    if v < -lim:
        return -lim
    return v


def _probes_at(tool: ToolState, x: float, y: float, th: float) -> list[tuple]:
    """Tool part and gripper probes posed at (x, y, th):
    (collider, restitution, friction, label, bound) in world frame."""
    c = math.cos(th)
    s = math.sin(th)
    probes = []
    for (verts, e, mu, label), (bx, by, br), axes in zip(
            tool.part_polys, tool.part_bounds, tool.part_axes):
        wb = (x + c * bx - s * by, y + s * bx + c * by, br)
        wv = tuple((x + c * px - s * py, y + s * px + c * py)
                   for px, py in verts)
        wa = tuple((c * ax - s * ay, s * ax + c * ay) for ax, ay in axes)
        probes.append((("poly", wv, wa), e, mu, label, wb))
    ggx = x + c * tool.grasp_t[0] - s * tool.grasp_t[1]
    ggy = y + s * tool.grasp_t[0] + c * tool.grasp_t[1]
    probes.append((("disc", (ggx, ggy, GRIPPER_RADIUS)), GRIPPER_RESTITUTION,
                   GRIPPER_FRICTION, "gripper",
                   (ggx, ggy, GRIPPER_RADIUS)))
    return probes


def _tool_blocked(env: TaskEnv, x: float, y: float, probes: list) -> bool:
    """Would the tool or gripper overlap a static body (or pin the peg
    sideways) at this pose? Such moves are rejected outright."""
    tr = env.tool.bound_r
    for b in env.bodies:
        pinned_axis = b.axis is not None
        if b.kind != "static" and not pinned_axis:
            continue
        dx = x - b.x
        dy = y - b.y
        rr = tr + b.bound_r
        if dx * dx + dy * dy > rr * rr:
            continue
        for wc, (wbx, wby, wbr) in b.world_colliders():
            for pc, _, _, _, (ax, ay, ar) in probes:
                ddx = ax - wbx
                ddy = ay - wby
                rr = ar + wbr
                if ddx * ddx + ddy * ddy > rr * rr:
                    continue
                hit = _collide(pc, wc)
                if hit is None:
                    continue
                depth, nx, ny = hit[0], hit[1], hit[2]
                if b.kind == "static":
                    if depth > REVERT_TOL:
                        return True
                elif depth > REVERT_TOL:
                    # prismatic body: only contacts it cannot yield to block,
                    # i.e. side hits and pushes past the travel stops
                    along = nx * b.axis[0] + ny * b.axis[1]
                    if abs(along) < 0.7:
                        return True
                    if along > 0.0 and b.travel >= b.travel_max - 1e-9:
                        return True
                    if along < 0.0 and b.travel <= 1e-9:
                        return True
    return False


def _tool_probes(tool: ToolState) -> list[tuple]:
    """Probes at the tool's current pose."""
    return _probes_at(tool, tool.x, tool.y, tool.th)


def _find_contacts(env: TaskEnv, probes: list | None = None) -> list:
    """Contact records: (kind, refs..., depth, nx, ny, px, py, e, mu).

    kind "tb" = tool part or gripper vs dynamic body, "bs" = dynamic body vs
    static collider, "bb" = dynamic vs dynamic. Normals point first -> second.
    """
    out = []
    tool = env.tool
    if probes is None:
        probes = _tool_probes(tool)
    dyn = [b for b in env.bodies if b.kind == "dynamic"]
    stat = [b for b in env.bodies if b.kind == "static"]
    dyn_wcs = [b.world_colliders() for b in dyn]
    tx, ty, tr = tool.x, tool.y, tool.bound_r

    for b, bcs in zip(dyn, dyn_wcs):
        dx = tx - b.x
        dy = ty - b.y
        rr = tr + b.bound_r
        if dx * dx + dy * dy > rr * rr:
            continue
        tags = _collider_tags(b)
        best = None
        for pc, pe, pmu, plabel, (ax, ay, ar) in probes:
            for (wc, (bx, by, br)), tag in zip(bcs, tags):
                dx = ax - bx
                dy = ay - by
                rr = ar + br
                if dx * dx + dy * dy > rr * rr:
                    continue
                hit = _collide(pc, wc)
                if hit is None:
                    continue
                if best is None or hit[0] > best[0][0]:
                    best = (hit, pe, pmu, plabel, tag)
        if best is not None:
            (depth, nx, ny, px, py), pe, pmu, plabel, tag = best
            e = min(pe, b.restitution)
            mu = math.sqrt(pmu * b.friction)
            out.append(("tb", b, plabel, tag, depth, nx, ny, px, py, e, mu))

    for b, bcs in zip(dyn, dyn_wcs):
        for srec in stat:
            if frozenset((b.body_id, srec.body_id)) in env.masks:
                continue
            for wc_s, (sx, sy, sr) in srec.world_colliders():
                best = None
                for wc, (bx, by, br) in bcs:
                    dx = bx - sx
                    dy = by - sy
                    rr = br + sr
                    if dx * dx + dy * dy > rr * rr:
                        continue
                    hit = _collide(wc, wc_s)
                    if hit is None:
                        continue
                    if best is None or hit[0] > best[0]:
                        best = hit
                if best is not None:
                    depth, nx, ny, px, py = best
                    e = min(b.restitution, srec.restitution)
                    mu = math.sqrt(b.friction * srec.friction)
                    out.append(("bs", b, srec.body_id, depth, nx, ny,
                                px, py, e, mu))

    for i in range(len(dyn)):
        for j in range(i + 1, len(dyn)):
            a, b = dyn[i], dyn[j]
            if frozenset((a.body_id, b.body_id)) in env.masks:
                continue
            best = None
            for wa, (ax, ay, ar) in dyn_wcs[i]:
                for wb, (bx, by, br) in dyn_wcs[j]:
                    dx = ax - bx
                    dy = ay - by
                    rr = ar + br
                    if dx * dx + dy * dy > rr * rr:
                        continue
                    hit = _collide(wa, wb)
                    if hit is None:
                        continue
                    if best is None or hit[0] > best[0]:
                        best = hit
            if best is not None:
                depth, nx, ny, px, py = best
                e = min(a.restitution, b.restitution)
                mu = math.sqrt(a.friction * b.friction)
                out.append(("bb", a, b, depth, nx, ny, px, py, e, mu))
    return out


def _collider_tags(b: Body) -> list[str]:
    if b.body_id == "thermos":
        return ["disc", "tab"][: len(b.colliders)]
    return [""] * len(b.colliders)


def _body_point_velocity(b: Body, px: float, py: float) -> tuple[float, float]:
    return (b.vx - b.om * (py - b.y), b.vy + b.om * (px - b.x))


def _body_inv_eff_mass(b: Body, nx: float, ny: float, px: float, py: float) -> float:
    if b.kind != "dynamic":
        return 0.0
    if b.axis is not None:
        a = nx * b.axis[0] + ny * b.axis[1]
        return a * a / b.mass
    rx = px - b.x
    ry = py - b.y
    rn = rx * ny - ry * nx
    return 1.0 / b.mass + rn * rn / b.inertia


def _apply_body_impulse(b: Body, jx: float, jy: float, px: float, py: float) -> None:
    if b.kind != "dynamic":
        return
    if b.axis is not None:
        u = (b.vx * b.axis[0] + b.vy * b.axis[1]
             + (jx * b.axis[0] + jy * b.axis[1]) / b.mass)
        b.vx = u * b.axis[0]
        b.vy = u * b.axis[1]
        return
    b.vx += jx / b.mass
    b.vy += jy / b.mass
    b.om += ((px - b.x) * jy - (py - b.y) * jx) / b.inertia


def _resolve(env: TaskEnv, contacts: list) -> list[ContactEvent]:
    """Sequential normal impulses with Coulomb friction; restitution on the
    first pass only. Logged impulses are the normal components."""
    tool = env.tool
    events: dict[int, ContactEvent] = {}
    for p in range(VEL_PASSES):
        for idx, rec in enumerate(contacts):
            kind = rec[0]
            if kind == "tb":
                _, b, plabel, tag, depth, nx, ny, px, py, e, mu = rec
                gx, gy = tool.grasp_world()
                rx = px - gx
                ry = py - gy
                rn = rx * ny - ry * nx
                inv_a = rn * rn / tool.inertia_grasp
                inv_b = _body_inv_eff_mass(b, nx, ny, px, py)
                vax, vay = tool.point_velocity(px, py)
                vbx, vby = _body_point_velocity(b, px, py)
                vrel = (vax - vbx) * nx + (vay - vby) * ny
                if vrel <= 1e-12:
                    continue
                ecur = e if p == 0 else 0.0
                j = (1.0 + ecur) * vrel / (inv_a + inv_b)
                tool.recoil_om -= j * rn / tool.inertia_grasp
                _apply_body_impulse(b, j * nx, j * ny, px, py)
                if mu > 0.0:
                    tx_, ty_ = -ny, nx
                    rt = rx * ty_ - ry * tx_
                    inv_at = rt * rt / tool.inertia_grasp
                    inv_bt = _body_inv_eff_mass(b, tx_, ty_, px, py)
                    kt = inv_at + inv_bt
                    if kt > 0.0:
                        vax, vay = tool.point_velocity(px, py)
                        vbx, vby = _body_point_velocity(b, px, py)
                        vt = (vax - vbx) * tx_ + (vay - vby) * ty_
                        jt = max(-mu * j, min(mu * j, vt / kt))
                        if jt != 0.0:
                            tool.recoil_om -= jt * rt / tool.inertia_grasp
                            _apply_body_impulse(b, jt * tx_, jt * ty_, px, py)
                aid = "gripper" if plabel == "gripper" else f"tool:{plabel}"
                _log_event(events, idx, env, aid, b.body_id,
                           px, py, nx, ny, j, vrel if p == 0 else 0.0,
                           part_a=plabel, part_b=tag)
            elif kind == "bs":
                _, b, sid, depth, nx, ny, px, py, e, mu = rec
                inv_b = _body_inv_eff_mass(b, nx, ny, px, py)
                if inv_b == 0.0:
                    continue
                vbx, vby = _body_point_velocity(b, px, py)
                vrel = vbx * nx + vby * ny  # closing when moving along +n
                if vrel <= 1e-12:
                    continue
                ecur = e if p == 0 else 0.0
                j = (1.0 + ecur) * vrel / inv_b
                _apply_body_impulse(b, -j * nx, -j * ny, px, py)
                if mu > 0.0:
                    tx_, ty_ = -ny, nx
                    inv_bt = _body_inv_eff_mass(b, tx_, ty_, px, py)
                    if inv_bt > 0.0:
                        vbx, vby = _body_point_velocity(b, px, py)
                        vt = vbx * tx_ + vby * ty_
                        jt = max(-mu * j, min(mu * j, vt / inv_bt))
                        if jt != 0.0:
                            _apply_body_impulse(b, -jt * tx_, -jt * ty_,
                                                px, py)
                _log_event(events, idx, env, b.body_id, sid, px, py, nx, ny,
                           j, vrel if p == 0 else 0.0)
            else:
                _, a, b, depth, nx, ny, px, py, e, mu = rec
                inv_a = _body_inv_eff_mass(a, nx, ny, px, py)
                inv_b = _body_inv_eff_mass(b, nx, ny, px, py)
                vax, vay = _body_point_velocity(a, px, py)
                vbx, vby = _body_point_velocity(b, px, py)
                vrel = (vax - vbx) * nx + (vay - vby) * ny
                if vrel <= 1e-12:
                    continue
                ecur = e if p == 0 else 0.0
                j = (1.0 + ecur) * vrel / (inv_a + inv_b)
                _apply_body_impulse(a, -j * nx, -j * ny, px, py)
                _apply_body_impulse(b, j * nx, j * ny, px, py)
                if mu > 0.0:
                    tx_, ty_ = -ny, nx
                    inv_at = _body_inv_eff_mass(a, tx_, ty_, px, py)
                    inv_bt = _body_inv_eff_mass(b, tx_, ty_, px, py)
                    kt = inv_at + inv_bt
                    if kt > 0.0:
                        vax, vay = _body_point_velocity(a, px, py)
                        vbx, vby = _body_point_velocity(b, px, py)
                        vt = (vax - vbx) * tx_ + (vay - vby) * ty_
                        jt = max(-mu * j, min(mu * j, vt / kt))
                        if jt != 0.0:
                            _apply_body_impulse(a, -jt * tx_, -jt * ty_,
                                                px, py)
                            _apply_body_impulse(b, jt * tx_, jt * ty_,
                                                px, py)
                _log_event(events, idx, env, a.body_id, b.body_id, px, py,
                           nx, ny, j, vrel if p == 0 else 0.0)
    return [events[k] for k in sorted(events)]


def _log_event(events: dict, idx: int, env: TaskEnv, aid: str, bid: str,
               px: float, py: float, nx: float, ny: float, j: float,
               vrel: float, part_a: str = "", part_b: str = "") -> None:
    ev = events.get(idx)
    if ev is None:
        events[idx] = ContactEvent(env.step_count, aid, bid, (px, py),
                                   (nx, ny), j, vrel, part_a, part_b)
    else:
        ev.impulse += j
        if vrel > ev.rel_speed:
            ev.rel_speed = vrel


def _integrate(env: TaskEnv) -> None:
    dt = env.dt
    for b in env.bodies:
        if b.kind != "dynamic":
            continue
        if b.axis is not None:
            u = b.vx * b.axis[0] + b.vy * b.axis[1]
            if b.damping_force > 0.0:
                u *= math.exp(-b.damping_force * dt / b.mass)
            t_new = b.travel + u * dt
            if t_new < 0.0:
                t_new = 0.0
                u = 0.0
            elif t_new > b.travel_max:
                t_new = b.travel_max
                u = 0.0
            b.x += (t_new - b.travel) * b.axis[0]
            b.y += (t_new - b.travel) * b.axis[1]
            b.travel = t_new
            b.vx = u * b.axis[0]
            b.vy = u * b.axis[1]
            continue
        b.x += b.vx * dt
        b.y += b.vy * dt
        b.th += b.om * dt
        if b.lin_damping > 0.0:
            f = math.exp(-b.lin_damping * dt)
            b.vx *= f
            b.vy *= f
        if b.ang_damping > 0.0:
            b.om *= math.exp(-b.ang_damping * dt)


def _correct_positions(env: TaskEnv, probes: list | None = None) -> None:
    """Project dynamic bodies out of residual overlap (tool never moves)."""
    for _ in range(CORRECT_ITERS):
        worst = 0.0
        for rec in _find_contacts(env, probes):
            kind = rec[0]
            if kind == "tb":
                _, b, _, _, depth, nx, ny, px, py, _, _ = rec
                push = CORRECT_BETA * (depth - PEN_SLOP)
                if depth > worst:
                    worst = depth
                if push <= 0.0:
                    continue
                _push_body(b, nx, ny, push)
            elif kind == "bs":
                _, b, _, depth, nx, ny, px, py, _, _ = rec
                push = CORRECT_BETA * (depth - PEN_SLOP)
                if depth > worst:
                    worst = depth
                if push <= 0.0:
                    continue
                _push_body(b, -nx, -ny, push)
            else:
                _, a, b, depth, nx, ny, px, py, _, _ = rec
                push = 0.5 * CORRECT_BETA * (depth - PEN_SLOP)
                if depth > worst:
                    worst = depth
                if push <= 0.0:
                    continue
                _push_body(a, -nx, -ny, push)
                _push_body(b, nx, ny, push)
        if worst <= PEN_TOL:
            break


def _push_body(b: Body, nx: float, ny: float, dist: float) -> None:
    if b.kind != "dynamic":
        return
    if b.axis is not None:
        along = nx * b.axis[0] + ny * b.axis[1]
        if abs(along) < 0.2:
            return
        move = dist * (1.0 if along > 0 else -1.0) / abs(along)
        t_new = b.travel + move
        if t_new < 0.0:
            t_new = 0.0
        elif t_new > b.travel_max:
            t_new = b.travel_max
        b.x += (t_new - b.travel) * b.axis[0]
        b.y += (t_new - b.travel) * b.axis[1]
        b.travel = t_new
        return
    b.x += nx * dist
    b.y += ny * dist


def _check_finite(env: TaskEnv) -> None:
    total = 0.0
    for b in env.bodies:
        total += b.x + b.y + b.th + b.vx + b.vy + b.om
    t = env.tool
    total += t.x + t.y + t.th
    if not math.isfinite(total):
        raise SimulationBlowup(f"non-finite state at step {env.step_count}")


def _target_body(task: str) -> str:
    return {"hook": "thermos", "reach": "cylinder", "hammer": "peg"}[task]


def _update_first_hit(env: TaskEnv, events: list) -> None:
    if env.first_hit is not None:
        return
    target = _target_body(env.task)
    for ev in events:
        if ev.body_a.startswith("tool:") and ev.body_b == target:
            px, py = ev.point
            nearest = None
            if env.tool.keypoints is not None:
                tx, ty = env.tool.tool_frame(px, py)
                best = 1e30
                for k, (kx, ky) in enumerate(env.tool.keypoints):
                    d = (kx - tx) ** 2 + (ky - ty) ** 2
                    if d < best:
                        best = d
                        nearest = k
            axial = ev.impulse
            if env.task == "hammer":
                gx, gy = env.params["goal_axis"]
                axial = max(0.0, ev.impulse * (ev.normal[0] * gx + ev.normal[1] * gy))
            env.first_hit = (env.step_count, px, py, nearest, axial)
            if env.eval_gating and env.tool.inter_idx is not None:
                env.ct_allowed = (nearest == env.tool.inter_idx)
            return


def first_contact(records: list, target: str) -> ContactEvent | None:
    """Earliest tool-target contact event in a recorded trajectory."""
    for rec in records:
        for ev in rec.contacts:
            if ev.body_a.startswith("tool:") and ev.body_b == target:
                return ev
    return None


# ---------------------------------------------------------------------------
# rewards

def _guidance(env: TaskEnv) -> float:
    tool = env.tool
    ix, iy = tool.world_point(tool.inter_t)
    tx, ty = env.x_target()
    return -math.tanh(math.hypot(ix - tx, iy - ty))


def _terms(env: TaskEnv, c: float) -> RewardTerms:
    if any(env.flags.values()) or not env.ct_allowed:
        c = 0.0
    w = W_TASK[env.task]
    g = _guidance(env)
    return RewardTerms(c, g, w, dict(env.flags), w * c + g)


def reward_hook(env: TaskEnv, events: list) -> RewardTerms:
    """Goal-distance reward while the tool touches the tab, else guidance.

    Latches the penalty flags: gripper touches the thermos, tool touches the
    thermos anywhere but the tab, thermos drifts in x beyond drift_max.
    """
    b = env.body("thermos")
    if abs(b.x - env.params["start_x"]) > env.params["drift_max"]:
        env.flags["x_drift"] = True
    touching_tab = False
    for ev in events:
        if ev.body_b != "thermos":
            continue
        if ev.body_a == "gripper":
            env.flags["gripper_target"] = True
        elif ev.body_a.startswith("tool:"):
            if ev.part_b == "tab":
                touching_tab = True
            else:
                env.flags["body_contact"] = True
    _gripper_proximity(env, "thermos")
    c = 0.0
    if touching_tab:
        gx, gy = env.params["goal"]
        c = 1.0 - math.tanh(math.hypot(b.x - gx, b.y - gy))
    return _terms(env, c)


def reward_reach(env: TaskEnv, events: list) -> RewardTerms:
    """Cylinder displacement reward while the tool reaches the hole entrance.

    Latches the gripper-wall penalty flag.
    """
    for ev in events:
        if ev.body_a == "gripper" and ev.body_b == "wall":
            env.flags["gripper_target"] = True
    _gripper_proximity(env, "wall")
    c = 0.0
    if _tool_near(env, env.x_target(), env.params["reach_tol"]):
        b = env.body("cylinder")
        x0, y0 = env.params["cyl_init"]
        c = math.tanh(math.hypot(b.x - x0, b.y - y0))
    return _terms(env, c)


def reward_hammer(env: TaskEnv, events: list) -> RewardTerms:
    """Squared axial peg acceleration, paid only at the first-contact step.

    Latches the gripper-peg penalty flag.
    """
    for ev in events:
        if ev.body_a == "gripper" and ev.body_b == "peg":
            env.flags["gripper_target"] = True
    _gripper_proximity(env, "peg")
    c = 0.0
    hit = env.first_hit
    if hit is not None and hit[0] == env.step_count:
        peg = env.body("peg")
        a = hit[4] / (peg.mass * env.dt)
        c = a * a
    return _terms(env, c)


_REWARD_FNS = {"hook": reward_hook, "reach": reward_reach,
               "hammer": reward_hammer}


def _reward(env: TaskEnv, events: list) -> RewardTerms:
    return _REWARD_FNS[env.task](env, events)


def _gripper_proximity(env: TaskEnv, body_id: str) -> None:
    """Latch the gripper-contact penalty when the gripper grazes the body."""
    if env.flags.get("gripper_target"):
        return
    try:
        body = env.body(body_id)
    except KeyError:
        return
    tool = env.tool
    gx, gy = tool.world_point(tool.grasp_t)
    r = GRIPPER_RADIUS + TOUCH_TOL
    probe = ("disc", (gx, gy, r))
    for wc, (bx, by, br) in body.world_colliders():
        dx = gx - bx
        dy = gy - by
        rr = r + br
        if dx * dx + dy * dy > rr * rr:
            continue
        if _collide(probe, wc) is not None:
            env.flags["gripper_target"] = True
            return


def _tool_near(env: TaskEnv, point: tuple, tol: float) -> bool:
    """Is any point of the tool outline within tol of the given point?"""
    px, py = point
    tool = env.tool
    if math.hypot(px - tool.x, py - tool.y) > tool.bound_r + tol:
        return False
    for (_, verts, _), _, _, _, (bx, by, br) in tool.world_probes():
        dx = px - bx
        dy = py - by
        rr = tol + br
        if dx * dx + dy * dy > rr * rr:
            continue
        if collide_poly_disc(verts, px, py, tol) is not None:
            return True
    return False


def _update_done(env: TaskEnv, terms: RewardTerms) -> None:
    if env.step_count >= env.max_steps:
        env.done = True
        env.done_reason = "steps"
        return
    if any(terms.penalty_flags.values()):
        env.done = True
        env.done_reason = "penalty"
        return
    if env.task == "hook":
        b = env.body("thermos")
        gx, gy = env.params["goal"]
        if math.hypot(b.x - gx, b.y - gy) < 0.9 * HOOK_SUCCESS_DIST:
            env.done = True
            env.done_reason = "success"
    elif env.task == "reach":
        b = env.body("cylinder")
        x0, y0 = env.params["cyl_init"]
        if math.hypot(b.x - x0, b.y - y0) > 1.1 * REACH_SUCCESS_DIST:
            env.done = True
            env.done_reason = "success"
    else:
        hit = env.first_hit
        if hit is not None and env.step_count >= hit[0] + HAMMER_POST_CONTACT_STEPS:
            env.done = True
            env.done_reason = "post_contact"


# ---------------------------------------------------------------------------
# diagnostics and serialization

def max_overlap(env: TaskEnv) -> float:
    """Deepest residual overlap among all collidable pairs (0 if none)."""
    worst = 0.0
    for rec in _find_contacts(env):
        depth = rec[4] if rec[0] == "tb" else rec[3]
        if depth > worst:
            worst = depth
    return worst


@dataclass
class StepRecord:
    step: int
    t: float
    tool_pose: tuple
    body_poses: dict
    contacts: list
    reward: RewardTerms

    def to_dict(self) -> dict:
        return {"step": self.step, "t": self.t,
                "tool_pose": list(self.tool_pose),
                "body_poses": {k: list(v) for k, v in self.body_poses.items()},
                "contacts": [ev.to_dict() for ev in self.contacts],
                "reward_terms": self.reward.to_dict()}


def snapshot(env: TaskEnv, contacts: list, terms: RewardTerms) -> StepRecord:
    tool = env.tool
    poses = {b.body_id: (b.x, b.y, b.th) for b in env.bodies}
    return StepRecord(env.step_count, env.time, (tool.x, tool.y, tool.th),
                      poses, contacts, terms)


def write_trajectory(records: list, path: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def scene_to_json(task: str, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(default_scene(task), fh, indent=1)
        fh.write("\n")
