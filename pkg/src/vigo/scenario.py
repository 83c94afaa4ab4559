"""Scenario files: analytic world description for the simulator.

JSON schema: ``bounds, resolution, static[], movers[], start, goals[],
sensor{}, robot{}, seed``. Shapes are boxes or vertical cylinders; movers
follow waypoint polylines at constant speed, looping or ping-ponging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class BoxShape:
    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)

    def sdf(self, p) -> float:
        """Signed distance (negative inside)."""
        q = np.abs(np.asarray(p) - self.center) - 0.5 * self.size
        outside = np.linalg.norm(np.maximum(q, 0.0))
        inside = min(float(q.max()), 0.0)
        return outside + inside

    def to_json(self) -> dict:
        return {"type": "box", "center": self.center.tolist(), "size": self.size.tolist()}


@dataclass
class CylinderShape:
    """Vertical cylinder: ``center`` is the mid-height axis point."""

    center: np.ndarray
    radius: float
    height: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def sdf(self, p) -> float:
        p = np.asarray(p)
        d_xy = np.linalg.norm(p[:2] - self.center[:2]) - self.radius
        d_z = abs(p[2] - self.center[2]) - 0.5 * self.height
        outside = np.linalg.norm(np.maximum([d_xy, d_z], 0.0))
        inside = min(max(d_xy, d_z), 0.0)
        return outside + inside

    def to_json(self) -> dict:
        return {"type": "cylinder", "center": self.center.tolist(),
                "radius": self.radius, "height": self.height}


@dataclass
class Mover:
    """Box obstacle moving at constant speed along a waypoint polyline.

    ``loop`` closes the polyline back to the first waypoint; otherwise the
    mover ping-pongs between the ends.
    """

    size: np.ndarray
    speed: float
    waypoints: np.ndarray
    loop: bool = True

    def __post_init__(self):
        self.size = np.asarray(self.size, dtype=np.float64)
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        pts = self.waypoints
        if self.loop and len(pts) > 1:
            pts = np.vstack([pts, pts[0]])
        self._pts = pts
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1) if len(pts) > 1 else np.array([])
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        self._total = float(self._cum[-1])

    def _arc_at(self, t: float) -> float:
        if self._total <= 0 or self.speed <= 0:
            return 0.0
        s = self.speed * t
        if self.loop:
            return s % self._total
        period = 2.0 * self._total
        s = s % period
        return s if s <= self._total else period - s

    def position(self, t: float) -> np.ndarray:
        if self._total <= 0:
            return self.waypoints[0].copy()
        s = self._arc_at(t)
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._pts) - 2)
        seg_len = self._cum[i + 1] - self._cum[i]
        u = 0.0 if seg_len <= 0 else (s - self._cum[i]) / seg_len
        return self._pts[i] + u * (self._pts[i + 1] - self._pts[i])

    def velocity(self, t: float) -> np.ndarray:
        if self._total <= 0 or self.speed <= 0:
            return np.zeros(3)
        eps = 1e-4
        return (self.position(t + eps) - self.position(t - eps)) / (2 * eps)

    def box_at(self, t: float) -> "BoxShape":
        return BoxShape(center=self.position(t), size=self.size)

    def to_json(self) -> dict:
        return {"size": self.size.tolist(), "speed": self.speed,
                "waypoints": self.waypoints.tolist(), "loop": self.loop}


@dataclass
class SensorSpec:
    width: int = 640
    height: int = 480
    fov: float = 87.0
    max_range: float = 5.0
    rate: float = 15.0
    noise: float = 0.0


@dataclass
class RobotSpec:
    v_max: float = 2.0
    a_max: float = 3.0
    radius: float = 0.25


@dataclass
class Scenario:
    bounds: np.ndarray  # (2, 3): lo, hi
    resolution: float = 0.1
    static_shapes: list = field(default_factory=list)
    movers: list = field(default_factory=list)
    start: np.ndarray = None
    goals: list = field(default_factory=list)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    robot: RobotSpec = field(default_factory=RobotSpec)
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.start is not None:
            self.start = np.asarray(self.start, dtype=np.float64)
        self.goals = [np.asarray(g, dtype=np.float64) for g in self.goals]

    def static_sdf(self, p) -> float:
        if not self.static_shapes:
            return np.inf
        return min(s.sdf(p) for s in self.static_shapes)

    def clearance(self, p, t: float) -> float:
        """Distance from a point to the nearest obstacle surface at time t."""
        d = self.static_sdf(p)
        for m in self.movers:
            d = min(d, m.box_at(t).sdf(p))
        return float(d)

    def inside_bounds(self, p) -> bool:
        return bool(np.all(p >= self.bounds[0]) and np.all(p <= self.bounds[1]))

    def to_json(self) -> dict:
        return {
            "bounds": self.bounds.tolist(),
            "resolution": self.resolution,
            "static": [s.to_json() for s in self.static_shapes],
            "movers": [m.to_json() for m in self.movers],
            "start": self.start.tolist(),
            "goals": [g.tolist() for g in self.goals],
            "sensor": vars(self.sensor).copy(),
            "robot": vars(self.robot).copy(),
            "seed": self.seed,
        }


def _require(data, key, ctx=""):
    if key not in data:
        raise ValidationError(f"missing key: {ctx}{key}")
    return data[key]


def _parse_shape(d, ctx):
    kind = _require(d, "type", ctx)
    if kind == "box":
        return BoxShape(center=_require(d, "center", ctx), size=_require(d, "size", ctx))
    if kind == "cylinder":
        return CylinderShape(center=_require(d, "center", ctx),
                             radius=_require(d, "radius", ctx),
                             height=_require(d, "height", ctx))
    raise ValidationError(f"unknown shape type at {ctx}type: {kind!r}")


def scenario_from_dict(data: dict, name: str = "scenario") -> Scenario:
    bounds = np.asarray(_require(data, "bounds"), dtype=np.float64)
    if bounds.shape != (2, 3):
        raise ValidationError("bounds must be [[x,y,z],[x,y,z]]")
    if np.any(bounds[0] >= bounds[1]):
        raise ValidationError("bounds: lower corner must be below upper corner")

    shapes = [_parse_shape(s, f"static[{i}].")
              for i, s in enumerate(data.get("static", []))]
    movers = []
    for i, m in enumerate(data.get("movers", [])):
        ctx = f"movers[{i}]."
        mv = Mover(size=_require(m, "size", ctx), speed=_require(m, "speed", ctx),
                   waypoints=_require(m, "waypoints", ctx), loop=m.get("loop", True))
        if mv.speed < 0:
            raise ValidationError(f"{ctx}speed must be nonnegative")
        if len(mv.waypoints) < 1:
            raise ValidationError(f"{ctx}waypoints must not be empty")
        movers.append(mv)

    sensor = SensorSpec(**data.get("sensor", {}))
    robot = RobotSpec(**data.get("robot", {}))
    scn = Scenario(
        bounds=bounds,
        resolution=float(data.get("resolution", 0.1)),
        static_shapes=shapes,
        movers=movers,
        start=np.asarray(_require(data, "start"), dtype=np.float64),
        goals=[np.asarray(g, dtype=np.float64) for g in _require(data, "goals")],
        sensor=sensor,
        robot=robot,
        seed=int(data.get("seed", 0)),
        name=name,
    )

    if not scn.inside_bounds(scn.start):
        raise ValidationError("start outside bounds")
    if scn.static_sdf(scn.start) <= robot.radius:
        raise ValidationError("start inside a static obstacle")
    if not scn.goals:
        raise ValidationError("goals must not be empty")
    for i, g in enumerate(scn.goals):
        if not scn.inside_bounds(g):
            raise ValidationError(f"goals[{i}] outside bounds")
        if scn.static_sdf(g) <= robot.radius:
            raise ValidationError(f"goals[{i}] inside a static obstacle")
    for i, m in enumerate(scn.movers):
        for j, w in enumerate(m.waypoints):
            if not scn.inside_bounds(w):
                raise ValidationError(f"movers[{i}].waypoints[{j}] outside bounds")
    return scn


def load_scenario(path) -> Scenario:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"invalid scenario JSON: {e}") from None
    name = str(path).rsplit("/", 1)[-1].removesuffix(".json")
    return scenario_from_dict(data, name=name)


def save_scenario(path, scn: Scenario) -> None:
    with open(path, "w") as f:
        json.dump(scn.to_json(), f, indent=2)
        f.write("\n")
