"""Uniform B-spline trajectories: parameterization, evaluation, penalty costs.

Control points are the optimization variable. The first and last k-1 points
repeat the start and goal, which clamps the curve endpoints and gives zero
boundary velocity on a uniform knot vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ControlPointSet:
    """Ordered control points of a uniform B-spline of order ``order``.

    The valid parameter domain is [0, duration] with
    duration = (N - order + 1) * dt.
    """

    points: np.ndarray  # (N, 3)
    order: int = 4
    dt: float = 0.5
    degenerate: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        n_min = 2 * (self.order - 1) + 1
        if len(self.points) < n_min:
            raise ValueError(f"need at least {n_min} control points for order {self.order}")

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def n_pinned(self) -> int:
        """Number of repeated control points pinned at each end."""
        return self.order - 1

    @property
    def duration(self) -> float:
        return (self.n - self.order + 1) * self.dt

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def goal(self) -> np.ndarray:
        return self.points[-1]

    def interior_slice(self) -> slice:
        return slice(self.n_pinned, self.n - self.n_pinned)

    def with_points(self, points) -> "ControlPointSet":
        return ControlPointSet(np.asarray(points, dtype=np.float64), self.order, self.dt, self.degenerate)

    # -- evaluation -------------------------------------------------------------

    def evaluate(self, t, der: int = 0, with_flags: bool = False):
        """Curve point (or derivative) at time t, de Boor on uniform knots.

        Out-of-range t is clamped to the nearest endpoint; pass
        ``with_flags=True`` to also receive the clamped indicator.
        """
        out, clamped = self.evaluate_many(np.atleast_1d(np.asarray(t, dtype=np.float64)), der)
        if np.isscalar(t) or np.ndim(t) == 0:
            out, clamped = out[0], bool(clamped[0])
        if with_flags:
            return out, clamped
        return out

    def evaluate_many(self, ts, der: int = 0):
        """Vectorized evaluation at an array of times. Returns (points, clamped)."""
        pts, k, dt = self.points, self.order, self.dt
        for _ in range(der):
            pts = np.diff(pts, axis=0) / dt
            k -= 1
        if k < 1:
            raise ValueError("derivative order too high for spline order")
        ts = np.asarray(ts, dtype=np.float64)
        T = self.duration
        clamped = (ts < 0) | (ts > T)
        ts = np.clip(ts, 0.0, T)

        p = k - 1
        if p == 0:
            # piecewise-constant: value on span j is pts[j]
            j = np.minimum((ts / dt).astype(np.int64), len(pts) - 1)
            return pts[j], clamped
        # span index: knots u_i = (i - p) * dt, t in [u_j, u_{j+1})
        j = np.clip(p + np.floor(ts / dt).astype(np.int64), p, len(pts) - 1)
        # de Boor over the k active control points, vectorized across queries
        d = pts[j[:, None] + np.arange(-p, 1)[None, :]].copy()  # (m, k, 3)
        for r in range(1, p + 1):
            denom = (p - r + 1) * dt
            for i in range(p, r - 1, -1):
                left = (i + j - 2 * p) * dt  # u_{i+j-p}
                alpha = (ts - left) / denom
                d[:, i, :] = (1.0 - alpha[:, None]) * d[:, i - 1, :] + alpha[:, None] * d[:, i, :]
        return d[:, p, :], clamped

    # -- derivative control points ------------------------------------------------

    def derivatives(self) -> "DerivativeSet":
        """Velocity, acceleration, and jerk control points (finite differences)."""
        if self.n < 4:
            raise ValueError("need at least 4 control points for jerk")
        V = np.diff(self.points, axis=0) / self.dt
        A = np.diff(V, axis=0) / self.dt
        J = np.diff(A, axis=0) / self.dt
        return DerivativeSet(V=V, A=A, J=J, dt=self.dt, n_points=self.n)

    # -- export -------------------------------------------------------------------

    def sample_csv_rows(self, rate_hz: float):
        """Rows ``t,x,y,z,vx,vy,vz`` sampled at the given rate."""
        ts = np.arange(0.0, self.duration + 1e-9, 1.0 / rate_hz)
        pos, _ = self.evaluate_many(ts)
        vel, _ = self.evaluate_many(ts, der=1)
        return [
            (t, p[0], p[1], p[2], v[0], v[1], v[2])
            for t, p, v in zip(ts, pos, vel)
        ]

    def control_point_csv_rows(self):
        return [(i, p[0], p[1], p[2]) for i, p in enumerate(self.points)]


@dataclass
class DerivativeSet:
    """Velocity/acceleration/jerk control points of a uniform spline."""

    V: np.ndarray
    A: np.ndarray
    J: np.ndarray
    dt: float
    n_points: int = field(default=0)


def parameterize(start, goal, seed_path=None, n_interior: int = 5, dt: float = 0.5,
                 order: int = 4) -> ControlPointSet:
    """Build control points from start to goal along an optional seed polyline.

    Interior points are spaced at equal arc length along the seed path (a
    straight segment when absent); k-1 copies of start and goal pin the ends.
    Coincident start/goal produce a degenerate constant set, flagged.
    """
    if n_interior < 1:
        raise ValueError("n_interior must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    n_pin = order - 1

    if seed_path is None:
        path = np.stack([start, goal])
    else:
        path = np.asarray(seed_path, dtype=np.float64)
        if len(path) < 2:
            path = np.stack([start, goal])

    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    total = float(seg.sum())
    if total < 1e-9:
        pts = np.repeat(start[None, :], n_interior + 2 * n_pin, axis=0)
        return ControlPointSet(pts, order=order, dt=dt, degenerate=True)

    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = total * np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = np.stack([np.interp(targets, cum, path[:, a]) for a in range(3)], axis=1)
    pts = np.concatenate([
        np.repeat(start[None, :], n_pin, axis=0),
        interior,
        np.repeat(goal[None, :], n_pin, axis=0),
    ])
    return ControlPointSet(pts, order=order, dt=dt)


def control_cost(d: DerivativeSet, v_max: float, a_max: float):
    """One-sided limit penalty on velocity/acceleration control points.

    Per axis and per point, (|V| - v_max)^2 / v_max^2 is charged only where
    |V| exceeds v_max (likewise acceleration with a_max^2). Returns the cost
    and its gradient with respect to the position control points.
    """
    if v_max <= 0 or a_max <= 0:
        raise ValueError("limits must be positive")
    dt = d.dt
    grad = np.zeros((d.n_points, 3))

    ev = np.abs(d.V) - v_max
    mv = ev > 0
    cost = float(np.sum(ev[mv] ** 2) / v_max**2)
    gv = np.zeros_like(d.V)
    gv[mv] = 2.0 * ev[mv] * np.sign(d.V[mv]) / v_max**2
    grad[1:] += gv / dt
    grad[:-1] -= gv / dt

    ea = np.abs(d.A) - a_max
    ma = ea > 0
    cost += float(np.sum(ea[ma] ** 2) / a_max**2)
    ga = np.zeros_like(d.A)
    ga[ma] = 2.0 * ea[ma] * np.sign(d.A[ma]) / a_max**2
    grad[2:] += ga / dt**2
    grad[1:-1] -= 2.0 * ga / dt**2
    grad[:-2] += ga / dt**2

    return cost, grad


def smoothness_cost(d: DerivativeSet):
    """Sum of squared jerk control points, gradient chained to positions."""
    cost = float(np.sum(d.J**2))
    grad = np.zeros((d.n_points, 3))
    gj = 2.0 * d.J / d.dt**3
    grad[:-3] -= gj
    grad[1:-2] += 3.0 * gj
    grad[2:-1] -= 3.0 * gj
    grad[3:] += gj
    return cost, grad
