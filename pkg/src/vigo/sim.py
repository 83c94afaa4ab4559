"""Deterministic closed-loop simulator and benchmark harness.

Each cycle renders an analytic depth image, updates the map (and the
obstacle tracker unless vision is ablated), replans toward the goal from
the current state, and advances the robot along the planned path at cruise
speed. Episodes end in success, collision, or freezing.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import ControlPointSet, parameterize
from .config import PlannerConfig
from .errors import ValidationError, VigoError
from .optimizer import reguide_optimize
from .perception import DepthImage, ObstacleTracker, intrinsics_from_fov
from .scenario import BoxShape, CylinderShape, Scenario, scenario_from_dict
from .voxel_map import OccupancyGrid

GOAL_RADIUS = 0.3
SIM_TIMEOUT = 120.0
FROZEN_LIMIT = 10
CRUISE_FRACTION = 0.5  # execution speed relative to v_max
VARIANTS = ("full", "no_vision", "no_rh")


@dataclass
class EpisodeResult:
    outcome: str  # "success" | "collision" | "freezing"
    time_to_goal: float
    path_length: float
    min_clearance: float
    planner_ms: list = field(default_factory=list)
    tracking_errors: dict = None
    first_contact_time: float = None
    executed: np.ndarray = None
    planned: np.ndarray = None
    scenario: str = ""
    goal_index: int = 0
    run: int = 0
    seed: int = 0
    variant: str = "full"

    def csv_row(self) -> str:
        parts = [
            self.variant, self.scenario, str(self.goal_index), str(self.run),
            str(self.seed), self.outcome,
            f"{self.time_to_goal:.6f}" if np.isfinite(self.time_to_goal) else "",
            f"{self.path_length:.6f}",
            f"{self.min_clearance:.6f}" if np.isfinite(self.min_clearance) else "",
            f"{self.first_contact_time:.6f}" if self.first_contact_time is not None else "",
        ]
        return ",".join(parts)


EPISODE_CSV_HEADER = ("config,scenario,goal,run,seed,outcome,time_to_goal,"
                     "path_length,min_clearance,first_contact_time")


class DepthRenderer:
    """Analytic per-pixel ray casting against boxes and vertical cylinders.

    Rays are parameterized by camera-frame z, so intersection parameters are
    depth values directly. Closed-form hits are exact at zero noise.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        s = scenario.sensor
        self.fx, self.fy, self.cx, self.cy = intrinsics_from_fov(s.width, s.height, s.fov)
        us, vs = np.meshgrid(np.arange(s.width), np.arange(s.height))
        self.dirs_cam = np.stack([
            (us - self.cx) / self.fx,
            (vs - self.cy) / self.fy,
            np.ones_like(us, dtype=np.float64),
        ], axis=-1).reshape(-1, 3)

    @staticmethod
    def camera_rotation(forward) -> np.ndarray:
        """Camera-to-world rotation: z along ``forward``, x right, y down."""
        z_c = np.asarray(forward, dtype=np.float64)
        n = np.linalg.norm(z_c)
        z_c = np.array([1.0, 0.0, 0.0]) if n < 1e-9 else z_c / n
        x_c = np.cross(z_c, [0.0, 0.0, 1.0])
        n = np.linalg.norm(x_c)
        x_c = np.array([0.0, -1.0, 0.0]) if n < 1e-9 else x_c / n
        y_c = np.cross(z_c, x_c)
        return np.stack([x_c, y_c, z_c], axis=1)

    def render(self, t: float, position, forward, rng=None) -> DepthImage:
        scn = self.scenario
        sensor = scn.sensor
        R = self.camera_rotation(forward)
        origin = np.asarray(position, dtype=np.float64)
        d = self.dirs_cam @ R.T  # (n, 3) world, parameter = camera z

        z = np.full(len(d), np.inf)
        shapes = list(scn.static_shapes) + [m.box_at(t) for m in scn.movers]
        for shape in shapes:
            if isinstance(shape, BoxShape):
                zi = _ray_box(origin, d, shape)
            elif isinstance(shape, CylinderShape):
                zi = _ray_cylinder(origin, d, shape)
            else:
                continue
            z = np.minimum(z, zi)

        z[(z > sensor.max_range) | ~np.isfinite(z)] = 0.0
        if sensor.noise > 0 and rng is not None:
            valid = z > 0
            z[valid] += rng.normal(0.0, sensor.noise, size=int(valid.sum()))
            z[z < 0.05] = 0.0
        depths = z.reshape(sensor.height, sensor.width).astype(np.float32)
        pose = np.eye(4)
        pose[:3, :3] = R
        pose[:3, 3] = origin
        return DepthImage(depths=depths, fx=self.fx, fy=self.fy,
                          cx=self.cx, cy=self.cy, pose=pose)


def _ray_box(origin, d, box: BoxShape, eps: float = 1e-9):
    lo = box.center - 0.5 * box.size
    hi = box.center + 0.5 * box.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - origin[None, :]) / d
        t2 = (hi[None, :] - origin[None, :]) / d
    tn = np.fmin(t1, t2)
    tf = np.fmax(t1, t2)
    # rays parallel to a slab: inside comparison via origin
    par = np.abs(d) < 1e-15
    inside = (origin >= lo) & (origin <= hi)
    tn[par] = -np.inf
    tf[par] = np.inf
    bad = par & ~inside[None, :].repeat(len(d), axis=0)
    tmin = tn.max(axis=1)
    tmax = tf.min(axis=1)
    hit = (tmax >= tmin) & (tmin > eps) & ~bad.any(axis=1)
    out = np.where(hit, tmin, np.inf)
    return out


def _ray_cylinder(origin, d, cyl: CylinderShape, eps: float = 1e-9):
    ox, oy, oz = origin - np.array([cyl.center[0], cyl.center[1], cyl.center[2]])
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    zlo, zhi = -0.5 * cyl.height, 0.5 * cyl.height
    r2 = cyl.radius**2

    best = np.full(len(d), np.inf)
    a = dx**2 + dy**2
    b = 2.0 * (ox * dx + oy * dy)
    c = ox**2 + oy**2 - r2
    disc = b**2 - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            tb = (-b + sign * sq) / (2 * a)
            zb = oz + tb * dz
            good = ok & (tb > eps) & (zb >= zlo) & (zb <= zhi)
            best = np.where(good & (tb < best), tb, best)
        for zcap in (zlo, zhi):
            tc = np.where(np.abs(dz) > 1e-15, (zcap - oz) / dz, np.inf)
            xc = ox + tc * dx
            yc = oy + tc * dy
            good = (tc > eps) & (xc**2 + yc**2 <= r2)
            best = np.where(good & (tc < best), tc, best)
    return best


class TrajectoryFollower:
    """Advances along a planned curve by arc length (ideal path tracking)."""

    def __init__(self, trajectory):
        self.traj = trajectory
        self.tau = 0.0
        self.pos = trajectory.evaluate(0.0)

    @property
    def done(self) -> bool:
        return self.tau >= self.traj.duration - 1e-9

    def advance(self, arc: float) -> np.ndarray:
        remaining = arc
        step = self.traj.dt / 10.0
        while remaining > 1e-12 and not self.done:
            nxt = min(self.tau + step, self.traj.duration)
            p = self.traj.evaluate(nxt)
            d = float(np.linalg.norm(p - self.pos))
            if d <= remaining or d < 1e-12:
                remaining -= d
                self.tau, self.pos = nxt, p
            else:
                frac = remaining / d
                self.pos = self.pos + frac * (p - self.pos)
                self.tau += frac * (nxt - self.tau)
                remaining = 0.0
        return self.pos.copy()


class RecedingHorizonPlanner:
    """Plans from the current state to the goal each cycle.

    A successful plan's interior control points seed the next cycle
    directly (with already-passed ones dropped), so steady-state replans
    start near the optimum and converge in a few iterations.
    """

    def __init__(self, config: PlannerConfig, resolution: float):
        self.config = config
        self.cp_spacing = max(3.0 * resolution, 0.15)
        self._prev = None
        self._prev_goal = None

    def _warm_points(self, position, goal):
        prev = self._prev
        pin = prev.n_pinned
        interior = prev.points[pin:prev.n - pin]
        # drop interior points the robot has already passed (by chordal
        # arc position along the previous plan)
        chain = np.vstack([prev.points[0], interior])
        arc = np.concatenate([[0.0], np.cumsum(
            np.linalg.norm(np.diff(chain, axis=0), axis=1))])[1:]
        d_robot = float(np.linalg.norm(position - prev.points[0]))
        keep = interior[arc > d_robot + 1e-6]
        if len(keep) < 1:
            return None
        pts = np.vstack([
            np.repeat(position[None, :], pin, axis=0),
            keep,
            np.repeat(goal[None, :], pin, axis=0),
        ])
        return ControlPointSet(pts, order=prev.order, dt=prev.dt)

    def plan(self, position, goal, grid, obstacles, rh_enabled=True):
        cfg = self.config
        s0 = None
        if self._prev is not None and self._prev_goal is not None \
                and np.allclose(self._prev_goal, goal):
            s0 = self._warm_points(position, goal)
        if s0 is None:
            dist = float(np.linalg.norm(goal - position))
            n_interior = int(np.clip(np.ceil(dist / self.cp_spacing), 1, 60))
            seg = dist / (n_interior + 1) if dist > 0 else self.cp_spacing
            dt = cfg.dt if cfg.dt else max(seg / (CRUISE_FRACTION * cfg.v_max), 0.05)
            s0 = parameterize(position, goal, n_interior=n_interior, dt=dt,
                              order=cfg.order)
        result = reguide_optimize(s0, grid, obstacles, cfg.cost_weights(),
                                  cfg.planner_params(rh_enabled=rh_enabled))
        if result.status == "success":
            self._prev = result.trajectory
            self._prev_goal = np.asarray(goal, dtype=np.float64).copy()
        else:
            self._prev = None
        return result


def _integration_points(img: DepthImage, max_rays: int = 4000):
    """Subsampled valid depth pixels back-projected to world points."""
    d = img.depths
    h, w = d.shape
    stride = max(1, int(np.ceil(np.sqrt(h * w / max_rays))))
    sub = d[::stride, ::stride]
    rows, cols = np.nonzero(sub > 0)
    if len(rows) == 0:
        return np.zeros((0, 3))
    return img.backproject(rows * stride, cols * stride, sub[rows, cols])


def run_episode(scenario: Scenario, config: PlannerConfig, goal_index: int = 0,
                variant: str = "full", seed: int = None, run: int = 0,
                record_paths: bool = False, debug_sink=None) -> EpisodeResult:
    """One closed-loop episode toward ``scenario.goals[goal_index]``."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant: {variant}")
    if goal_index >= len(scenario.goals):
        raise ValidationError(f"goal index {goal_index} out of range")
    seed = scenario.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    vision = variant != "no_vision"
    rh_enabled = variant != "no_rh"

    grid = OccupancyGrid.from_bounds(scenario.bounds[0], scenario.bounds[1],
                                     scenario.resolution)
    renderer = DepthRenderer(scenario)
    tracker = ObstacleTracker(config.perception) if vision else None
    planner = RecedingHorizonPlanner(config, scenario.resolution)
    goal = scenario.goals[goal_index]

    dt = 1.0 / scenario.sensor.rate
    robot = scenario.start.copy()
    heading = goal - robot
    follower = None
    frozen_streak = 0
    path_length = 0.0
    min_clearance = float(scenario.clearance(robot, 0.0) - scenario.robot.radius)
    planner_ms = []
    executed = [robot.copy()]
    outcome = None
    time_to_goal = np.nan
    first_contact = None
    planned_path = None

    t = 0.0
    while t < SIM_TIMEOUT:
        img = renderer.render(t, robot, heading, rng)
        pts = _integration_points(img)
        if len(pts):
            grid.integrate_pointcloud(robot, pts)

        obstacles = []
        if vision:
            snap = grid.snapshot()
            obstacles = tracker.process(img, snap, t, dt)
            grid.clear_dynamic_regions(tracker.dynamic_histories())

        t0 = time.perf_counter()
        plan = planner.plan(robot, goal, grid.snapshot(), obstacles, rh_enabled)
        planner_ms.append((time.perf_counter() - t0) * 1e3)

        if plan.status == "success":
            follower = TrajectoryFollower(plan.trajectory)
            frozen_streak = 0
            if record_paths and planned_path is None:
                ts = np.linspace(0, plan.trajectory.duration, 120)
                planned_path, _ = plan.trajectory.evaluate_many(ts)
        else:
            follower = None
            frozen_streak += 1
            if frozen_streak >= FROZEN_LIMIT:
                outcome = "freezing"
                break
        if debug_sink is not None:
            debug_sink(t, plan, obstacles)

        t_next = t + dt
        if follower is not None:
            new_pos = follower.advance(CRUISE_FRACTION * scenario.robot.v_max * dt)
            if np.any(new_pos < scenario.bounds[0]) or np.any(new_pos > scenario.bounds[1]):
                new_pos = np.clip(new_pos, scenario.bounds[0] + 1e-3,
                                  scenario.bounds[1] - 1e-3)
            step_heading = new_pos - robot
            if np.linalg.norm(step_heading) > 1e-6:
                heading = step_heading
        else:
            new_pos = robot

        path_length += float(np.linalg.norm(new_pos - robot))
        robot = new_pos
        if record_paths:
            executed.append(robot.copy())

        clearance = float(scenario.clearance(robot, t_next) - scenario.robot.radius)
        min_clearance = min(min_clearance, clearance)
        if clearance <= 0.0:
            outcome = "collision"
            first_contact = t_next
            break
        if np.linalg.norm(robot - goal) <= GOAL_RADIUS:
            outcome = "success"
            time_to_goal = t_next
            break
        t = t_next

    if outcome is None:
        outcome = "freezing"  # timeout: forced stop without reaching the goal

    return EpisodeResult(
        outcome=outcome,
        time_to_goal=time_to_goal,
        path_length=path_length,
        min_clearance=min_clearance,
        planner_ms=planner_ms,
        first_contact_time=first_contact,
        executed=np.asarray(executed) if record_paths else None,
        planned=planned_path,
        scenario=scenario.name,
        goal_index=goal_index,
        run=run,
        seed=seed,
        variant=variant,
    )


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _episode_worker(args):
    scn_dict, name, cfg_dict, goal_index, variant, seed, run = args
    scn = scenario_from_dict(scn_dict, name=name)
    cfg = PlannerConfig.from_dict(cfg_dict)
    return run_episode(scn, cfg, goal_index=goal_index, variant=variant,
                       seed=seed, run=run)


def episode_seed(base: int, run: int, goal_index: int) -> int:
    return base + 9973 * run + 101 * goal_index


def benchmark(scenarios, config: PlannerConfig, runs: int = 20,
              variants=VARIANTS, threads: int = None):
    """Outcome rates per variant over scenarios x goals x seeded runs.

    Episodes are independent; ``threads`` (default: VIGO_THREADS or 1)
    fans them out over processes, with results merged in submission order.
    Returns (metrics, results).
    """
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    if threads is None:
        threads = int(os.environ.get("VIGO_THREADS", "1"))

    jobs = []
    for variant in variants:
        for scn in scenarios:
            for goal_index in range(len(scn.goals)):
                for run in range(runs):
                    seed = episode_seed(scn.seed, run, goal_index)
                    jobs.append((scn.to_json(), scn.name, config.to_dict(),
                                 goal_index, variant, seed, run))

    if threads > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(threads) as pool:
            results = pool.map(_episode_worker, jobs, chunksize=4)
    else:
        results = [_episode_worker(j) for j in jobs]

    metrics = {}
    for variant in variants:
        rs = [r for r in results if r.variant == variant]
        n = len(rs)
        metrics[variant] = {
            "episodes": n,
            "collision_rate": 100.0 * sum(r.outcome == "collision" for r in rs) / n,
            "freezing_rate": 100.0 * sum(r.outcome == "freezing" for r in rs) / n,
            "success_rate": 100.0 * sum(r.outcome == "success" for r in rs) / n,
        }
    return metrics, results


# ---------------------------------------------------------------------------
# tracking evaluation
# ---------------------------------------------------------------------------

def eval_tracking(scenario: Scenario, config: PlannerConfig, frames: int = 200):
    """Perception error against simulator ground truth, camera held at start.

    Returns (summary means, per-frame rows ``t,pos_err,vel_err,size_err``).
    """
    if not scenario.movers:
        raise ValidationError("scenario has no movers to track")
    rng = np.random.default_rng(scenario.seed)
    grid = OccupancyGrid.from_bounds(scenario.bounds[0], scenario.bounds[1],
                                     scenario.resolution)
    renderer = DepthRenderer(scenario)
    tracker = ObstacleTracker(config.perception)
    dt = 1.0 / scenario.sensor.rate
    position = scenario.start
    forward = scenario.goals[0] - position

    rows = []
    for k in range(frames):
        t = k * dt
        img = renderer.render(t, position, forward, rng)
        pts = _integration_points(img)
        if len(pts):
            grid.integrate_pointcloud(position, pts)
        snap = grid.snapshot()
        dynamic = tracker.process(img, snap, t, dt)
        grid.clear_dynamic_regions(tracker.dynamic_histories())
        for tr in dynamic:
            gts = [(np.linalg.norm(tr.position - m.position(t)), m) for m in scenario.movers]
            dist, m = min(gts, key=lambda x: x[0])
            if dist > 2.0:
                continue
            pos_err = float(np.linalg.norm(tr.position - m.position(t)))
            vel_err = float(np.linalg.norm(tr.velocity - m.velocity(t)))
            size_err = float(np.mean(np.abs(tr.size - m.size)))
            rows.append((t, pos_err, vel_err, size_err))

    if not rows:
        raise VigoError("no mover was ever tracked")
    arr = np.asarray(rows)
    summary = {
        "frames": frames,
        "samples": len(rows),
        "pos_err": float(arr[:, 1].mean()),
        "vel_err": float(arr[:, 2].mean()),
        "size_err": float(arr[:, 3].mean()),
    }
    return summary, rows
