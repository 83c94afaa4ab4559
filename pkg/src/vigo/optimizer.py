"""Weighted objective assembly and the iterative re-guide planning loop.

One planning call resets the collision weights, solves the unconstrained
problem with a limited-memory quasi-Newton method, and loops: reassign
guide points when optimization pushed control points toward new obstacles,
otherwise inflate whichever collision weight still fails its dense
trajectory check, until the trajectory is clean or the iteration cap makes
the outcome "frozen".
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .bspline import ControlPointSet, control_cost, smoothness_cost
from .dynamic_avoidance import FieldBatch, build_field, dynamic_cost
from .errors import NumericError, PathSearchError, PlanningError
from .static_avoidance import (
    GuideAssignment,
    assign_guide_points,
    find_collision_segments,
    path_search,
    record_blocked_voxels,
    segment_crosses_new_obstacle,
    static_cost,
)
from .voxel_map import OccupancyGrid


@dataclass
class CostWeights:
    """Objective weights; the collision alphas inflate by ``lambda_inflate``
    inside one planning call and reset between calls."""

    alpha_control: float = 0.1
    alpha_smooth: float = 1.0
    alpha_static: float = 5.0
    alpha_dynamic: float = 5.0
    lambda_inflate: float = 1.5
    alpha0_static: float = None
    alpha0_dynamic: float = None

    def __post_init__(self):
        if self.alpha0_static is None:
            self.alpha0_static = self.alpha_static
        if self.alpha0_dynamic is None:
            self.alpha0_dynamic = self.alpha_dynamic
        for name in ("alpha_control", "alpha_smooth", "alpha_static", "alpha_dynamic"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.lambda_inflate <= 1:
            raise ValueError("lambda_inflate must exceed 1")

    def reset_copy(self) -> "CostWeights":
        return replace(self, alpha_static=self.alpha0_static,
                       alpha_dynamic=self.alpha0_dynamic)

    def to_dict(self) -> dict:
        return {
            "alpha_control": self.alpha_control,
            "alpha_smooth": self.alpha_smooth,
            "alpha_static": self.alpha_static,
            "alpha_dynamic": self.alpha_dynamic,
        }


@dataclass
class PlannerParams:
    """Geometry and loop parameters for one planning call."""

    v_max: float = 2.0
    a_max: float = 3.0
    d_safe: float = 0.5
    horizon_k: int = 10
    dt_pred: float = 0.1
    margin: float = 0.2
    max_reguide_iters: int = 20
    rh_enabled: bool = True  # False: cones collapse to spheres at o0


@dataclass
class PlanContext:
    grid: OccupancyGrid
    assignments: list
    fields: list
    weights: CostWeights
    params: PlannerParams


@dataclass
class SolveResult:
    points: ControlPointSet
    cost: float
    iterations: int
    stalled: bool = False


@dataclass
class PlanResult:
    trajectory: ControlPointSet
    status: str  # "success" | "frozen"
    iterations: int
    reguide_events: int
    final_weights: CostWeights
    assignments: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    solve_ms: float = 0.0


def total_objective(s: ControlPointSet, ctx: PlanContext):
    """Weighted sum of the four cost terms; pinned endpoints get zero gradient."""
    w = ctx.weights
    der = s.derivatives()
    cost = 0.0
    grad = np.zeros_like(s.points)

    for name, alpha, fn in (
        ("control", w.alpha_control,
         lambda: control_cost(der, ctx.params.v_max, ctx.params.a_max)),
        ("smooth", w.alpha_smooth, lambda: smoothness_cost(der)),
    ):
        if alpha > 0:
            c, g = fn()
            _check_finite(name, c)
            cost += alpha * c
            grad += alpha * g

    if w.alpha_static > 0:
        for g_assign in ctx.assignments:
            c, g = static_cost(s, g_assign, ctx.grid, ctx.params.d_safe)
            _check_finite("static", c)
            cost += w.alpha_static * c
            grad += w.alpha_static * g

    if w.alpha_dynamic > 0 and ctx.fields:
        c, g = dynamic_cost(s, ctx.fields)
        _check_finite("dynamic", c)
        cost += w.alpha_dynamic * c
        grad += w.alpha_dynamic * g

    pin = s.n_pinned
    grad[:pin] = 0.0
    grad[-pin:] = 0.0
    return cost, grad


def _check_finite(name, value):
    if not np.isfinite(value):
        raise NumericError(f"{name} cost is non-finite")


def solve(s0: ControlPointSet, ctx: PlanContext = None, objective=None,
          maxiter: int = 200) -> SolveResult:
    """Quasi-Newton (L-BFGS) descent over the interior control points.

    Terminates on max-norm gradient < 1e-4, relative cost decrease < 1e-6,
    or the iteration cap; returns the best iterate seen. A line-search
    failure returns the best iterate with the stall flag set.
    """
    if objective is None:
        objective = lambda pts: total_objective(s0.with_points(pts), ctx)
    pin = s0.n_pinned
    n = s0.n
    lo, hi = pin, n - pin
    template = s0.points.copy()
    best = {"cost": np.inf, "x": template[lo:hi].ravel().copy()}

    def fun(x):
        pts = template.copy()
        pts[lo:hi] = x.reshape(-1, 3)
        c, g = objective(pts)
        if c < best["cost"]:
            best["cost"] = c
            best["x"] = x.copy()
        return c, g[lo:hi].ravel()

    res = minimize(
        fun,
        template[lo:hi].ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxiter, "ftol": 1e-6, "gtol": 1e-4, "maxls": 40},
    )
    x = best["x"] if best["cost"] <= res.fun else res.x
    pts = template.copy()
    pts[lo:hi] = x.reshape(-1, 3)
    return SolveResult(
        points=s0.with_points(pts),
        cost=min(best["cost"], float(res.fun)),
        iterations=int(res.nit),
        stalled=bool(res.status == 2),
    )


def is_reguide_required(s: ControlPointSet, assignments, grid: OccupancyGrid):
    """Indices whose guide data went stale: occupied without a guide, or the
    straight point-to-guide segment now crosses obstacles other than the one
    recorded at assignment time."""
    pairs = {}
    blocked = {}
    for g in assignments or []:
        pairs.update(g.pairs)
        blocked.update(g.blocked)
    required = set()
    lo, hi = s.n_pinned, s.n - s.n_pinned
    occ, _ = grid.query_points(s.points[lo:hi])
    for off, i in enumerate(range(lo, hi)):
        if i in pairs:
            if segment_crosses_new_obstacle(s.points[i], pairs[i],
                                            blocked.get(i, frozenset()), grid):
                required.add(i)
        elif occ[off]:
            required.add(i)
    return bool(required), required


def _assign_all(s: ControlPointSet, grid: OccupancyGrid):
    segments = find_collision_segments(s, grid)
    assignments = []
    for seg in segments:
        path = path_search(s.points[seg.start_free], s.points[seg.end_free], grid)
        g = assign_guide_points(seg, path, s)
        record_blocked_voxels(g, grid)
        assignments.append(g)
    return assignments


def _dense_sample_times(s: ControlPointSet, spacing: float) -> np.ndarray:
    """Sample times guaranteeing consecutive arc spacing <= ``spacing``
    (curve speed is bounded by the max velocity control point norm)."""
    der_v = np.diff(s.points, axis=0) / s.dt
    vmax = float(np.max(np.linalg.norm(der_v, axis=1), initial=0.0))
    T = s.duration
    if vmax < 1e-9 or T <= 0:
        return np.array([0.0, T])
    n = int(np.ceil(T * vmax / spacing)) + 1
    return np.linspace(0.0, T, max(n, 2))


def check_static_collision(s: ControlPointSet, grid: OccupancyGrid) -> bool:
    """Dense occupancy scan of the evaluated curve at half-voxel spacing."""
    ts = _dense_sample_times(s, grid.resolution / 2.0)
    pts, _ = s.evaluate_many(ts)
    occ, _ = grid.query_points(pts)
    return bool(occ.any())


def check_dynamic_collision(s: ControlPointSet, fields, resolution: float = 0.1) -> bool:
    """Dense scan for positive distance-to-safe inside any field."""
    if not fields:
        return False
    batch = fields if isinstance(fields, FieldBatch) else FieldBatch(fields)
    if not batch.fields:
        return False
    ts = _dense_sample_times(s, resolution / 2.0)
    pts, _ = s.evaluate_many(ts)
    dd, _, gate = batch.penetrations(pts)
    return bool(np.any((dd > 0.0) & gate))


def reguide_optimize(s0: ControlPointSet, grid: OccupancyGrid, obstacles,
                     weights: CostWeights, params: PlannerParams) -> PlanResult:
    """Iterative re-guide optimization until the dense checks pass.

    Collision weights reset to their initial values at entry. Each loop
    iteration either (re)assigns guide points (first pass, or when stale
    guides are detected) or inflates the weight of whichever collision check
    still fails, then re-solves. A zero collision weight disables its check
    so ablations degrade to collisions rather than freezes. Exhausting the
    iteration cap or failing local path search yields status "frozen".
    """
    t_start = time.perf_counter()
    w = weights.reset_copy()
    fields = [
        build_field(ob, params.horizon_k, params.dt_pred, params.margin,
                    force_static=not params.rh_enabled)
        for ob in obstacles
    ]
    batch = FieldBatch(fields) if fields else None
    s = s0
    assignments = []
    reguide_events = 0
    iterations = 0
    status = "frozen"
    t_sc = t_dc = True

    for it in range(params.max_reguide_iters):
        try:
            if it == 0:
                assignments = _assign_all(s, grid)
                if assignments:
                    reguide_events += 1
            else:
                required, _ = is_reguide_required(s, assignments, grid)
                if required:
                    assignments = _assign_all(s, grid)
                    reguide_events += 1
                elif t_sc:
                    w.alpha_static *= w.lambda_inflate
                elif t_dc:
                    w.alpha_dynamic *= w.lambda_inflate
        except (PathSearchError, PlanningError):
            iterations = it + 1
            break

        ctx = PlanContext(grid=grid, assignments=assignments,
                          fields=batch if batch is not None else [],
                          weights=w, params=params)
        s = solve(s, ctx).points
        t_sc = check_static_collision(s, grid) if w.alpha_static > 0 else False
        t_dc = (check_dynamic_collision(s, batch, grid.resolution)
                if w.alpha_dynamic > 0 and batch is not None else False)
        iterations = it + 1
        if not (t_sc or t_dc):
            status = "success"
            break

    return PlanResult(
        trajectory=s,
        status=status,
        iterations=iterations,
        reguide_events=reguide_events,
        final_weights=w,
        assignments=assignments,
        fields=fields,
        solve_ms=(time.perf_counter() - t_start) * 1e3,
    )
