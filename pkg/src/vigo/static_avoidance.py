"""Static-collision machinery for the trajectory optimizer.

Collision control points are grouped into segments, a local grid search
finds a bypass path, and each collision point is paired with a guide point
on that path by sweeping direction angles over a semicircle. The static
cost penalizes control points whose signed distance to their guide point
falls short of the safety distance.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bspline import ControlPointSet
from .errors import PathSearchError, PlanningError
from .voxel_map import OccupancyGrid

_SQRT3 = float(np.sqrt(3.0))


@dataclass
class CollisionSegment:
    """A maximal run of in-collision control points with free brackets."""

    indices: list[int]
    start_free: int
    end_free: int


@dataclass
class GuideAssignment:
    """Guide points for one collision segment.

    ``pairs`` maps control-point index to its guide point on ``path``.
    ``anchors`` stores the control-point position at assignment time; the
    static gradient direction stays frozen to it. ``blocked`` records the
    occupied voxels each anchor-to-guide segment crossed at assignment time
    (the obstacle being escaped), used by the re-guide check.
    """

    pairs: dict[int, np.ndarray]
    path: np.ndarray
    anchors: dict[int, np.ndarray] = field(default_factory=dict)
    thetas: dict[int, float] = field(default_factory=dict)
    blocked: dict[int, frozenset] = field(default_factory=dict)
    fallback_indices: set = field(default_factory=set)


def find_collision_segments(s: ControlPointSet, grid: OccupancyGrid) -> list[CollisionSegment]:
    """Maximal runs of occupied interior control points with free brackets.

    The pinned endpoint copies are never part of a segment; an occupied
    start or goal is an unrecoverable planning error.
    """
    if grid.is_occupied(s.start):
        raise PlanningError("start position is inside an obstacle")
    if grid.is_occupied(s.goal):
        raise PlanningError("goal position is inside an obstacle")

    lo = s.n_pinned
    hi = s.n - s.n_pinned
    occ, _ = grid.query_points(s.points[lo:hi])
    segments = []
    i = 0
    m = hi - lo
    while i < m:
        if not occ[i]:
            i += 1
            continue
        j = i
        while j + 1 < m and occ[j + 1]:
            j += 1
        segments.append(
            CollisionSegment(
                indices=list(range(lo + i, lo + j + 1)),
                start_free=lo + i - 1,
                end_free=lo + j + 1,
            )
        )
        i = j + 1
    return segments


_NEIGHBORS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)
_NEIGHBOR_COSTS = np.linalg.norm(_NEIGHBORS, axis=1)
_DILATE_OFFSETS = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                   for dz in (-1, 0, 1)]


def path_search(start, end, grid: OccupancyGrid, box_margin: float = 2.0) -> np.ndarray:
    """26-connected A* between two free points, restricted to a local box.

    The search box is the start/end AABB inflated by ``box_margin`` per axis;
    on failure it is doubled once before a PathSearchError is raised. Ties in
    the open list break on lexicographic voxel index. Returns a polyline
    [start, voxel centers..., end].
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    if grid.is_occupied(start):
        raise PlanningError("path search start is occupied")
    if grid.is_occupied(end):
        raise PlanningError("path search end is occupied")

    for margin in (box_margin, 2.0 * box_margin):
        path = _astar(start, end, grid, margin)
        if path is not None:
            return path
    raise PathSearchError("no collision-free local path between segment brackets")


def _astar(start, end, grid, margin):
    res = grid.resolution
    lo_box = np.maximum(grid.world_to_index(np.minimum(start, end) - margin), 0)
    hi_box = np.minimum(grid.world_to_index(np.maximum(start, end) + margin) + 1,
                        np.array(grid.dims))
    occ_box = np.ascontiguousarray(
        grid.logodds[lo_box[0]:hi_box[0], lo_box[1]:hi_box[1], lo_box[2]:hi_box[2]]
        > grid.occ_threshold
    )
    s_idx = tuple((grid.world_to_index(start) - lo_box).tolist())
    e_idx = tuple((grid.world_to_index(end) - lo_box).tolist())

    # cheap reachability gate: 26-connected components of free space
    labels, _ = ndimage.label(~occ_box, structure=np.ones((3, 3, 3), dtype=int))
    if labels[s_idx] == 0 or labels[s_idx] != labels[e_idx]:
        return None

    nx, ny, nz = occ_box.shape
    occ_flat = occ_box.ravel()
    neighbors = [(int(o[0]), int(o[1]), int(o[2]), res * c)
                 for o, c in zip(_NEIGHBORS, _NEIGHBOR_COSTS)]
    ex, ey, ez = e_idx

    def h(x, y, z):
        return res * math.sqrt((x - ex) ** 2 + (y - ey) ** 2 + (z - ez) ** 2)

    open_heap = [(h(*s_idx), s_idx)]
    g_score = {s_idx: 0.0}
    came = {}
    closed = set()
    while open_heap:
        _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == e_idx:
            chain = [cur]
            while chain[-1] in came:
                chain.append(came[chain[-1]])
            chain.reverse()
            centers = [grid.origin + (lo_box + c + 0.5) * res for c in chain]
            pts = [start] + centers[1:-1] + [end] if len(centers) > 2 else [start, end]
            return np.asarray(pts)
        closed.add(cur)
        gc = g_score[cur]
        x, y, z = cur
        for dx, dy, dz, step_cost in neighbors:
            xn, yn, zn = x + dx, y + dy, z + dz
            if not (0 <= xn < nx and 0 <= yn < ny and 0 <= zn < nz):
                continue
            nxt = (xn, yn, zn)
            if occ_flat[(xn * ny + yn) * nz + zn] or nxt in closed:
                continue
            ng = gc + step_cost
            if ng < g_score.get(nxt, np.inf) - 1e-12:
                g_score[nxt] = ng
                came[nxt] = cur
                heapq.heappush(open_heap, (ng + h(xn, yn, zn), nxt))
    return None


def _working_plane(path: np.ndarray):
    """Plane axes (origin, e1 along the start-end line, e2 toward the path).

    e2 points at the path vertex of maximum deviation from the line; when the
    path is collinear with the line, a horizontal perpendicular is used.
    """
    origin = path[0]
    line = path[-1] - path[0]
    llen = np.linalg.norm(line)
    if llen < 1e-12:
        raise PlanningError("degenerate guide line: path start equals path end")
    e1 = line / llen
    rel = path - origin
    dev = rel - np.outer(rel @ e1, e1)
    dn = np.linalg.norm(dev, axis=1)
    imax = int(np.argmax(dn))
    if dn[imax] > 1e-9:
        e2 = dev[imax] / dn[imax]
    else:
        e2 = np.cross([0.0, 0.0, 1.0], e1)
        if np.linalg.norm(e2) < 1e-9:
            e2 = np.array([1.0, 0.0, 0.0])
        e2 = e2 - (e2 @ e1) * e1
        e2 /= np.linalg.norm(e2)
    return origin, e1, e2, llen


def assign_guide_points(seg: CollisionSegment, path: np.ndarray,
                        s: ControlPointSet) -> GuideAssignment:
    """Pair each collision control point with a guide point on the path.

    Each collision point is projected onto the line through the path
    endpoints; a ray from the projection at angle theta = n/(|seg|+1) * pi
    (swept in the working plane, toward the path's side) is intersected with
    the path, segment by segment. The first intersection is the guide point.
    If the ray numerically misses, the nearest path vertex to the ray is
    used and the index is flagged.
    """
    path = np.asarray(path, dtype=np.float64)
    origin, e1, e2, _ = _working_plane(path)
    # path in plane coordinates
    rel = path - origin
    pu = rel @ e1
    pw = rel @ e2

    big_n = len(seg.indices) + 1
    out = GuideAssignment(pairs={}, path=path)
    for n, ci in enumerate(seg.indices, start=1):
        pc = s.points[ci]
        theta = np.pi * n / big_n
        u0 = float((pc - origin) @ e1)
        d = np.array([np.cos(theta), np.sin(theta)])

        best = None  # (ray_param, seg_index, seg_param)
        for k in range(len(path) - 1):
            au, aw = pu[k], pw[k]
            su, sw = pu[k + 1] - au, pw[k + 1] - aw
            # solve [d, -(b-a)] [rho, tau]^T = a - ray_origin
            det = -d[0] * sw + su * d[1]
            if abs(det) < 1e-14:
                continue
            r0, r1 = au - u0, aw
            rho = (-r0 * sw + su * r1) / det
            tau = (d[0] * r1 - d[1] * r0) / det
            if rho >= 1e-12 and -1e-9 <= tau <= 1.0 + 1e-9:
                if best is None or rho < best[0]:
                    best = (rho, k, min(max(tau, 0.0), 1.0))

        if best is not None:
            _, k, tau = best
            guide = path[k] + tau * (path[k + 1] - path[k])
        else:
            # nearest path vertex to the ideal ray (perpendicular distance,
            # forward of the ray origin)
            du = pu - u0
            dw = pw
            along = du * d[0] + dw * d[1]
            perp = np.abs(du * d[1] - dw * d[0])
            perp[along < 0] = np.inf
            k = int(np.argmin(perp))
            guide = path[k]
            out.fallback_indices.add(ci)

        out.pairs[ci] = np.asarray(guide)
        out.anchors[ci] = pc.copy()
        out.thetas[ci] = float(theta)
    return out


def record_blocked_voxels(assignment: GuideAssignment, grid: OccupancyGrid,
                          step: float | None = None) -> None:
    """Remember which occupied voxels each anchor-to-guide segment crosses.

    The set is dilated by one voxel so sampling jitter against the same
    obstacle does not masquerade as a new one."""
    step = step or grid.resolution / 2.0
    for ci, guide in assignment.pairs.items():
        a = assignment.anchors[ci]
        core = _occupied_voxels_on_segment(a, guide, grid, step)
        dilated = set()
        for v in core:
            for off in _DILATE_OFFSETS:
                dilated.add((v[0] + off[0], v[1] + off[1], v[2] + off[2]))
        assignment.blocked[ci] = frozenset(dilated)


def _occupied_voxels_on_segment(a, b, grid, step):
    length = float(np.linalg.norm(b - a))
    n = max(2, int(np.ceil(length / step)) + 1)
    ts = np.linspace(0.0, 1.0, n)
    pts = a[None, :] + ts[:, None] * (b - a)[None, :]
    occ, _ = grid.query_points(pts)
    idx = np.floor((pts[occ] - grid.origin) / grid.resolution).astype(np.int64)
    return {tuple(v) for v in idx}


def segment_crosses_new_obstacle(p, guide, blocked: frozenset, grid: OccupancyGrid) -> bool:
    """True if the straight p-to-guide segment hits occupied voxels outside ``blocked``."""
    voxels = _occupied_voxels_on_segment(np.asarray(p, dtype=np.float64),
                                         np.asarray(guide, dtype=np.float64),
                                         grid, grid.resolution / 2.0)
    return bool(voxels - blocked)


def static_cost(s: ControlPointSet, g: GuideAssignment, grid: OccupancyGrid,
                d_safe: float):
    """Cubic penalty on signed guide distance below d_safe (one segment).

    signDist is +|P - guide| when P's voxel is free and -|P - guide| when
    occupied; the sign tracks current occupancy while the gradient direction
    stays frozen at the assignment-time control point. Returns (cost, grad)
    with grad shaped like the full control-point array.
    """
    if d_safe <= 0:
        raise ValueError("d_safe must be positive")
    grad = np.zeros_like(s.points)
    cost = 0.0
    for ci, guide in g.pairs.items():
        p = s.points[ci]
        dist = float(np.linalg.norm(p - guide))
        sign = -1.0 if grid.is_occupied(p) else 1.0
        short = d_safe - sign * dist
        if short <= 0.0:
            continue
        # fixed escape direction: the negative gradient always drives the
        # point from its assignment-time position through the guide point,
        # even after it crosses into free space
        anchor = g.anchors.get(ci, p)
        adir = anchor - guide
        alen = float(np.linalg.norm(adir))
        if alen > 1e-12:
            direction = adir / alen
        else:
            direction = -_outward_direction(p, grid)
        cost += short**3
        grad[ci] += 3.0 * short**2 * direction
    return cost, grad


def _outward_direction(p, grid: OccupancyGrid):
    """Average direction toward free neighbor voxels; fallback when the
    control point sits exactly on its guide point."""
    idx = grid.world_to_index(p)
    acc = np.zeros(3)
    for off in _NEIGHBORS:
        nidx = idx + off
        if not grid.index_in_bounds(nidx)[0]:
            continue
        if grid.logodds[tuple(nidx)] <= grid.occ_threshold:
            acc += off / np.linalg.norm(off)
    n = np.linalg.norm(acc)
    if n < 1e-12:
        return np.array([0.0, 0.0, 1.0])
    return acc / n


def guide_csv_rows(assignments) -> list[tuple]:
    """Debug rows ``cp_index,cx,cy,cz,gx,gy,gz,theta`` over all assignments."""
    rows = []
    for g in assignments:
        for ci in sorted(g.pairs):
            c = g.anchors.get(ci)
            gp = g.pairs[ci]
            rows.append((ci, c[0], c[1], c[2], gp[0], gp[1], gp[2], g.thetas[ci]))
    return rows
