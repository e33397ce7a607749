"""Procedural planar tools built from two overlapping convex parts.

A tool is a head and a handle merged into a single outline. All downstream
work (keypoints, grasps, contacts) runs on a fixed-size resampling of that
outline, so this module also owns boundary geodesics, per-sample edge
quadrics, and antipodal grasp-pair search.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from shapely.geometry import (GeometryCollection, LineString, MultiLineString,
                              Point, Polygon)
from shapely.geometry.polygon import orient
from shapely.ops import unary_union

N_BOUNDARY = 64
CONFIGS = ("T", "L", "X")

# arc positions this close (relative to perimeter) are treated as coincident
ARC_SNAP_REL = 1e-9


@dataclass(frozen=True)
class Material:
    """Planar sheet material; density is per unit area (kg/m^2)."""

    name: str
    density: float
    restitution: float
    friction: float


STEEL = Material("steel", 120.0, 0.7, 0.4)
WOOD = Material("wood", 18.0, 0.25, 0.5)


@dataclass
class ConvexPart:
    vertices: np.ndarray  # (k, 2) CCW
    material: Material
    label: str  # "handle" | "head"

    def polygon(self) -> Polygon:
        return Polygon(self.vertices.tolist())


@dataclass
class DimRanges:
    """Uniform sampling ranges (meters) for part dimensions."""

    handle_length: tuple[float, float] = (0.18, 0.32)
    handle_width: tuple[float, float] = (0.02, 0.05)
    head_length: tuple[float, float] = (0.08, 0.16)
    head_width: tuple[float, float] = (0.03, 0.06)
    # X config: junction position as a fraction of handle length
    junction_frac: tuple[float, float] = (0.35, 0.65)

    def validate(self) -> None:
        for name in ("handle_length", "handle_width", "head_length", "head_width", "junction_frac"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"bad range for {name}: ({lo}, {hi})")
        # the head must stick out past the handle on at least one side
        if self.head_length[0] <= self.handle_width[1]:
            raise ValueError("head_length range must exceed handle_width range")


def polygon_integrals(verts: np.ndarray) -> tuple[float, float, float, float]:
    """Area, first moments and polar second moment about the origin (CCW positive)."""
    x = verts[:, 0]
    y = verts[:, 1]
    x1 = np.roll(x, -1)
    y1 = np.roll(y, -1)
    cr = x * y1 - x1 * y
    area = 0.5 * float(np.sum(cr))
    sx = float(np.sum((x + x1) * cr)) / 6.0
    sy = float(np.sum((y + y1) * cr)) / 6.0
    ixx = float(np.sum((y * y + y * y1 + y1 * y1) * cr)) / 12.0
    iyy = float(np.sum((x * x + x * x1 + x1 * x1) * cr)) / 12.0
    return area, sx, sy, ixx + iyy


def _edge_line(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Homogeneous line [a, b, c] with a^2 + b^2 = 1 through segment pq."""
    d = q - p
    n = np.array([d[1], -d[0]])
    ln = float(np.hypot(n[0], n[1]))
    n = n / ln
    return np.array([n[0], n[1], -float(n @ p)])


def _canonical_ring(poly: Polygon) -> np.ndarray:
    """CCW exterior ring, rotated to start at the vertex farthest from the centroid.

    Ties (mirror-symmetric outlines) are broken by the CCW sequence of edge
    lengths. Both keys only use distances, so the choice is stable under
    rigid motions of the input.
    """
    ring = orient(poly, sign=1.0).exterior
    verts = np.asarray(ring.coords)[:-1]
    c = np.asarray(poly.centroid.coords)[0]
    d = np.hypot(verts[:, 0] - c[0], verts[:, 1] - c[1])
    edges = np.linalg.norm(np.roll(verts, -1, axis=0) - verts, axis=1)
    q = max(1e-12, 1e-9 * float(edges.sum()))
    dq = np.round(d / q).astype(np.int64)
    eq = np.round(edges / q).astype(np.int64)
    cands = np.where(dq == dq.max())[0]
    k = int(cands[0])
    if len(cands) > 1:
        m = len(verts)
        best = None
        for i in cands:
            key = tuple(eq[(int(i) + np.arange(m)) % m])
            if best is None or key > best:
                best, k = key, int(i)
    return np.roll(verts, -k, axis=0)


@dataclass
class ToolShape:
    """A merged two-part tool with cached boundary machinery.

    boundary holds N_BOUNDARY points at uniform arc spacing along the union
    outline; arc, normals, G and quadrics are aligned with it index-for-index.
    """

    tool_id: str
    config: str
    parts: list[ConvexPart]
    seed: int
    outline: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    arc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    perimeter: float = 0.0
    sample_part: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    G: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    quadrics: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    bbox_diag: float = 0.0
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(2))
    junctions: list[tuple[float, float, float]] = field(default_factory=list)
    graph_edges: list[tuple[int, int, float]] = field(default_factory=list)
    n_graph_nodes: int = 0
    region_integrals: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)

    @staticmethod
    def build(tool_id: str, config: str, parts: list[ConvexPart], seed: int,
              n_samples: int = N_BOUNDARY) -> "ToolShape":
        if len(parts) not in (1, 2):
            raise ValueError("a tool has one or two convex parts")
        polys = [p.polygon() for p in parts]
        union = unary_union(polys)
        if union.geom_type != "Polygon":
            raise ValueError("parts must overlap into a single outline")
        shape = ToolShape(tool_id=tool_id, config=config, parts=parts, seed=seed)
        shape.outline = _canonical_ring(union)
        shape.boundary, shape.arc, shape.normals, shape.perimeter = resample_boundary(
            shape.outline, n_samples)
        xs = shape.outline[:, 0]
        ys = shape.outline[:, 1]
        shape.bbox_diag = float(np.hypot(xs.max() - xs.min(), ys.max() - ys.min()))
        shape.centroid = np.asarray(union.centroid.coords)[0]

        shape.sample_part = _classify_samples(shape.boundary, polys)
        shape.junctions = _junction_shortcuts(shape, polys)
        shape.G, shape.graph_edges, shape.n_graph_nodes = _geodesic_from_graph(
            shape.arc, shape.perimeter, shape.junctions)
        shape.quadrics = _sample_quadrics(shape.outline, shape.arc, shape.perimeter)

        shape.region_integrals = {}
        for part, poly in zip(parts, polys):
            shape.region_integrals[part.label] = polygon_integrals(
                np.asarray(poly.exterior.coords)[:-1])
        if len(polys) == 2:
            overlap = polys[0].intersection(polys[1])
            if overlap.is_empty or overlap.geom_type != "Polygon":
                shape.region_integrals["overlap"] = (0.0, 0.0, 0.0, 0.0)
            else:
                ov = np.asarray(orient(overlap, sign=1.0).exterior.coords)[:-1]
                shape.region_integrals["overlap"] = polygon_integrals(ov)
        else:
            shape.region_integrals["overlap"] = (0.0, 0.0, 0.0, 0.0)
        return shape

    @staticmethod
    def from_polygon(vertices: np.ndarray, material: Material = STEEL,
                     tool_id: str = "single", n_samples: int = N_BOUNDARY) -> "ToolShape":
        """Single-part shape, mostly for tests and reference geometry."""
        part = ConvexPart(np.asarray(vertices, dtype=float), material, "handle")
        return ToolShape.build(tool_id, "single", [part], 0, n_samples)

    def part_by_label(self, label: str) -> ConvexPart:
        for p in self.parts:
            if p.label == label:
                return p
        raise KeyError(label)

    def with_materials(self, by_label: dict[str, Material]) -> "ToolShape":
        """Same geometry, different part materials (used by the flip experiment)."""
        parts = [ConvexPart(p.vertices.copy(), by_label.get(p.label, p.material), p.label)
                 for p in self.parts]
        return ToolShape.build(self.tool_id, self.config, parts, self.seed,
                               n_samples=len(self.boundary))

    def point_at_arc(self, s: float) -> np.ndarray:
        return point_at_arc(self.outline, self.perimeter, s)

    def project(self, p: np.ndarray) -> tuple[np.ndarray, float, float]:
        return project_to_outline(self.outline, self.perimeter, p)


def resample_boundary(outline: np.ndarray, n: int,
                      offset: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Uniform arc-length resampling of a closed CCW polyline.

    Returns (points, arc positions, outward normals, perimeter). Samples that
    land on a vertex get the normalized average of the two edge normals.
    """
    seg = np.roll(outline, -1, axis=0) - outline
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    perimeter = float(cum[-1])
    if perimeter <= 0:
        raise ValueError("degenerate outline")
    arc = (offset + np.arange(n) * (perimeter / n)) % perimeter
    snap = ARC_SNAP_REL * perimeter

    pts = np.empty((n, 2))
    nrm = np.empty((n, 2))
    edge_normals = np.stack([seg[:, 1], -seg[:, 0]], axis=1)
    edge_normals /= seg_len[:, None]
    m = len(outline)
    for k, s in enumerate(arc):
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, m - 1)
        t = (s - cum[i]) / seg_len[i]
        pts[k] = outline[i] + t * seg[i]
        at_start = s - cum[i] <= snap
        at_end = cum[i + 1] - s <= snap
        if at_start or at_end:
            j = (i - 1) % m if at_start else (i + 1) % m
            v = edge_normals[i] + edge_normals[j]
            ln = np.hypot(v[0], v[1])
            nrm[k] = v / ln if ln > 1e-12 else edge_normals[i]
            if at_start:
                pts[k] = outline[i]
            else:
                pts[k] = outline[(i + 1) % m]
        else:
            nrm[k] = edge_normals[i]
    return pts, arc, nrm, perimeter


def point_at_arc(outline: np.ndarray, perimeter: float, s: float) -> np.ndarray:
    s = s % perimeter
    seg = np.roll(outline, -1, axis=0) - outline
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    i = min(int(np.searchsorted(cum, s, side="right") - 1), len(outline) - 1)
    t = (s - cum[i]) / seg_len[i]
    return outline[i] + t * seg[i]


def project_to_outline(outline: np.ndarray, perimeter: float,
                       p: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Closest point on the outline: (point, arc position, distance)."""
    a = outline
    b = np.roll(outline, -1, axis=0)
    ab = b - a
    ll = np.sum(ab * ab, axis=1)
    t = np.clip(np.sum((p - a) * ab, axis=1) / ll, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.hypot(proj[:, 0] - p[0], proj[:, 1] - p[1])
    i = int(np.argmin(d))
    seg_len = np.sqrt(ll)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    return proj[i], float((cum[i] + t[i] * seg_len[i]) % perimeter), float(d[i])


def _classify_samples(boundary: np.ndarray, polys: list[Polygon]) -> np.ndarray:
    """Which part's exterior each sample lies on (ties to the lower index)."""
    rings = [LineString(p.exterior.coords) for p in polys]
    out = np.zeros(len(boundary), dtype=int)
    for k, p in enumerate(boundary):
        pt = Point(p[0], p[1])
        dists = [ring.distance(pt) for ring in rings]
        out[k] = int(np.argmin(dists))
    return out


def _line_pieces(geometry) -> list[LineString]:
    """LineString members of an intersection result, any nesting.

    Depending on frame jitter the same overlap can come back as a bare
    LineString, a MultiLineString, or a GeometryCollection that also holds
    degenerate points; only the line parts matter here.
    """
    if isinstance(geometry, LineString):
        return [geometry]
    if isinstance(geometry, (MultiLineString, GeometryCollection)):
        out: list[LineString] = []
        for g in geometry.geoms:
            out.extend(_line_pieces(g))
        return out
    return []


def _junction_shortcuts(shape: ToolShape, polys: list[Polygon]) -> list[tuple[float, float, float]]:
    """Hidden part-boundary segments inside the other part.

    Each hidden run connects two points of the union outline, which keeps the
    geodesic domain from over-estimating travel across the part junction.
    Returned as (arc_u, arc_v, hidden length).
    """
    if len(polys) != 2:
        return []
    out: list[tuple[float, float, float]] = []
    for a, b in ((0, 1), (1, 0)):
        hidden = LineString(polys[a].exterior.coords).intersection(polys[b])
        pieces = _line_pieces(hidden)
        for piece in pieces:
            if piece.length <= 1e-9:
                continue
            coords = np.asarray(piece.coords)
            proj = [project_to_outline(shape.outline, shape.perimeter, c)
                    for c in coords]
            # endpoints must sit on the union outline; interior-only pieces
            # (e.g. a ring fully swallowed by the other part) are skipped
            if proj[0][2] > 1e-7 or proj[-1][2] > 1e-7:
                continue
            # a piece may mix shared collinear runs (on the outline) with
            # genuinely hidden runs, and where it splits varies with frame
            # jitter, so cut it at every outline contact and emit each hidden
            # sub-run as its own edge
            contacts = [i for i, (_, _, d) in enumerate(proj) if d <= 1e-7]
            for i, j in zip(contacts, contacts[1:]):
                seg = coords[i:j + 1]
                length = float(np.hypot(*np.diff(seg, axis=0).T).sum())
                if length <= 1e-9:
                    continue
                # collinear shared-boundary sub-runs lie on the outline and
                # would just duplicate the cycle path
                mids = 0.5 * (seg[:-1] + seg[1:])
                dmid = max(project_to_outline(shape.outline, shape.perimeter,
                                              m)[2] for m in mids)
                if dmid <= 1e-9:
                    continue
                out.append((proj[i][1], proj[j][1], length))
    out.sort()
    return out


def _geodesic_from_graph(arc: np.ndarray, perimeter: float,
                         junctions: list[tuple[float, float, float]]):
    """All-pairs boundary geodesics via Dijkstra on the cycle + shortcut graph."""
    n = len(arc)
    node_arc = list(map(float, arc))
    snap = max(1e-12, ARC_SNAP_REL * perimeter)

    def node_for(a: float) -> int:
        a = a % perimeter
        for idx, na in enumerate(node_arc):
            d = abs(na - a)
            if min(d, perimeter - d) <= snap:
                return idx
        node_arc.append(a)
        return len(node_arc) - 1

    shortcut_edges = [(node_for(su), node_for(sv), length) for su, sv, length in junctions]

    order = sorted(range(len(node_arc)), key=lambda i: node_arc[i])
    # parallel edges keep the shorter weight (a shortcut can tie two adjacent
    # outline nodes that the cycle also joins)
    best: dict[tuple[int, int], float] = {}

    def add(i: int, j: int, w: float) -> None:
        if i == j:
            return
        key = (i, j) if i < j else (j, i)
        if key not in best or w < best[key]:
            best[key] = w

    for k in range(len(order)):
        i = order[k]
        j = order[(k + 1) % len(order)]
        gap = node_arc[j] - node_arc[i]
        if k == len(order) - 1:
            gap += perimeter
        add(i, j, float(gap))
    for i, j, w in shortcut_edges:
        add(i, j, float(w))

    edges = [(i, j, w) for (i, j), w in sorted(best.items())]
    nn = len(node_arc)
    rows = [e[0] for e in edges]
    cols = [e[1] for e in edges]
    vals = [e[2] for e in edges]
    mat = coo_matrix((vals, (rows, cols)), shape=(nn, nn)).tocsr()
    dist = dijkstra(mat, directed=False, indices=np.arange(n))
    G = dist[:, :n]
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, 0.0)
    return G, edges, nn


def _sample_quadrics(outline: np.ndarray, arc: np.ndarray, perimeter: float) -> np.ndarray:
    """Per-sample quadric Q = sum p p^T over the sample's incident edge lines."""
    seg = np.roll(outline, -1, axis=0) - outline
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    lines = [
        _edge_line(outline[i], outline[(i + 1) % len(outline)]) for i in range(len(outline))
    ]
    snap = ARC_SNAP_REL * perimeter
    m = len(outline)
    Q = np.zeros((len(arc), 3, 3))
    for k, s in enumerate(arc):
        i = min(int(np.searchsorted(cum, s, side="right") - 1), m - 1)
        incident = [i]
        if s - cum[i] <= snap:
            incident.append((i - 1) % m)
        elif cum[i + 1] - s <= snap:
            incident.append((i + 1) % m)
        used: list[np.ndarray] = []
        for e in incident:
            p = lines[e]
            # incident lines share the sample point, so parallel means identical;
            # collinear duplicates (possible on union outlines) count once
            if any(abs(p[0] * q[1] - p[1] * q[0]) < 1e-12 for q in used):
                continue
            used.append(p)
            Q[k] += np.outer(p, p)
    return Q


def nearest_boundary(shape: ToolShape, x: np.ndarray) -> int:
    """Index of the boundary sample nearest to x; ties go to the lowest index."""
    d = shape.boundary - np.asarray(x, dtype=float)
    return int(np.argmin(np.einsum("ij,ij->i", d, d)))


def antipodal_pairs(shape: ToolShape, center: np.ndarray, radius: float,
                    friction_angle: float = 0.35,
                    gripper_width: float = 0.045) -> list[tuple[int, int]]:
    """Sample index pairs that admit a two-jaw squeeze near center.

    Conditions: both samples within radius of center, gap at most
    gripper_width, normals anti-parallel within friction_angle, and each
    normal pointing away from the other contact so the jaws squeeze material
    rather than an outside notch.
    """
    c = np.asarray(center, dtype=float)
    d = shape.boundary - c
    near = np.where(np.hypot(d[:, 0], d[:, 1]) <= radius)[0]
    out: list[tuple[int, int]] = []
    cos_lim = math.cos(friction_angle)
    for a in range(len(near)):
        i = int(near[a])
        xi = shape.boundary[i]
        ni = shape.normals[i]
        for b in range(a + 1, len(near)):
            j = int(near[b])
            xj = shape.boundary[j]
            gap = float(np.hypot(xi[0] - xj[0], xi[1] - xj[1]))
            if gap > gripper_width or gap < 1e-12:
                continue
            nj = shape.normals[j]
            if -(float(ni @ nj)) < cos_lim:
                continue
            u = (xi - xj) / gap
            if float(ni @ u) < 0.0 or float(nj @ (-u)) < 0.0:
                continue
            out.append((i, j))
    return out


def generate_tool(seed: int, config: str, dims: DimRanges | None = None,
                  head_material: Material = STEEL,
                  handle_material: Material = WOOD) -> ToolShape:
    """Deterministic two-part tool for a seed and a T/L/X configuration."""
    if config not in CONFIGS:
        raise ValueError(f"config must be one of {CONFIGS}")
    dims = dims or DimRanges()
    dims.validate()
    rng = np.random.default_rng(np.random.SeedSequence([17, seed]))
    lh = rng.uniform(*dims.handle_length)
    wh = rng.uniform(*dims.handle_width)
    lhead = rng.uniform(*dims.head_length)
    whead = rng.uniform(*dims.head_width)
    u = rng.uniform(*dims.junction_frac)

    handle = np.array([
        [0.0, -wh / 2], [lh, -wh / 2], [lh, wh / 2], [0.0, wh / 2]])
    if config == "T":
        cx = lh
        head = np.array([
            [cx - whead / 2, -lhead / 2], [cx + whead / 2, -lhead / 2],
            [cx + whead / 2, lhead / 2], [cx - whead / 2, lhead / 2]])
    elif config == "L":
        head = np.array([
            [lh - whead, -wh / 2], [lh, -wh / 2],
            [lh, -wh / 2 + lhead], [lh - whead, -wh / 2 + lhead]])
    else:  # X
        cx = u * lh
        head = np.array([
            [cx - whead / 2, -lhead / 2], [cx + whead / 2, -lhead / 2],
            [cx + whead / 2, lhead / 2], [cx - whead / 2, lhead / 2]])

    parts = [ConvexPart(handle, handle_material, "handle"),
             ConvexPart(head, head_material, "head")]
    tool_id = f"{config}{seed:06d}"
    return ToolShape.build(tool_id, config, parts, seed)


# ---------------------------------------------------------------------------
# serialization

def _sig9(x: float) -> float:
    return float(f"{x:.9g}")


def tool_to_dict(shape: ToolShape) -> dict:
    return {
        "tool_id": shape.tool_id,
        "config": shape.config,
        "parts": [
            {
                "label": p.label,
                "material": {
                    "density": _sig9(p.material.density),
                    "restitution": _sig9(p.material.restitution),
                    "friction": _sig9(p.material.friction),
                },
                "vertices": [[_sig9(v[0]), _sig9(v[1])] for v in p.vertices],
            }
            for p in shape.parts
        ],
        "seed": shape.seed,
    }


def _material_from_dict(d: dict) -> Material:
    for known in (STEEL, WOOD):
        if (d["density"] == known.density and d["restitution"] == known.restitution
                and d["friction"] == known.friction):
            return known
    return Material(f"mat{d['density']:g}", d["density"], d["restitution"], d["friction"])


def tool_from_dict(d: dict) -> ToolShape:
    parts = [
        ConvexPart(np.asarray(p["vertices"], dtype=float),
                   _material_from_dict(p["material"]), p["label"])
        for p in d["parts"]
    ]
    return ToolShape.build(d["tool_id"], d["config"], parts, int(d["seed"]))


def save_tools(shapes: list[ToolShape], path: str) -> None:
    with open(path, "w") as fh:
        json.dump([tool_to_dict(s) for s in shapes], fh, indent=1)
        fh.write("\n")


def load_tools(path: str) -> list[ToolShape]:
    with open(path) as fh:
        data = json.load(fh)
    return [tool_from_dict(d) for d in data]
