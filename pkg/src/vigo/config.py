"""Planner configuration: JSON round trip and dotted-key overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError
from .optimizer import CostWeights, PlannerParams
from .perception import PerceptionConfig


@dataclass
class PlannerConfig:
    """Everything the planner needs, all CLI-overridable.

    ``dt`` of None derives the knot step from the control-point spacing at
    half the velocity limit.
    """

    order: int = 4
    dt: float = None
    v_max: float = 2.0
    a_max: float = 3.0
    d_safe: float = 0.5
    weights: dict = field(default_factory=lambda: {
        "alpha_control": 0.1,
        "alpha_smooth": 1.0,
        "alpha_static": 5.0,
        "alpha_dynamic": 5.0,
    })
    lambda_inflate: float = 1.5
    max_reguide_iters: int = 20
    horizon_k: int = 10
    dt_pred: float = 0.1
    margin: float = 0.2
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)

    # -- conversions ------------------------------------------------------------

    def cost_weights(self) -> CostWeights:
        return CostWeights(lambda_inflate=self.lambda_inflate, **self.weights)

    def planner_params(self, rh_enabled: bool = True) -> PlannerParams:
        return PlannerParams(
            v_max=self.v_max, a_max=self.a_max, d_safe=self.d_safe,
            horizon_k=self.horizon_k, dt_pred=self.dt_pred, margin=self.margin,
            max_reguide_iters=self.max_reguide_iters, rh_enabled=rh_enabled,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PlannerConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValidationError(f"unknown config key: {key}")
        if "perception" in data and isinstance(data["perception"], dict):
            pknown = {f.name for f in fields(PerceptionConfig)}
            for key in data["perception"]:
                if key not in pknown:
                    raise ValidationError(f"unknown config key: perception.{key}")
            data["perception"] = PerceptionConfig(**data["perception"])
        if "weights" in data:
            wknown = {"alpha_control", "alpha_smooth", "alpha_static", "alpha_dynamic"}
            for key in data["weights"]:
                if key not in wknown:
                    raise ValidationError(f"unknown config key: weights.{key}")
            merged = cls().weights
            merged.update(data["weights"])
            data["weights"] = merged
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PlannerConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    # -- overrides ---------------------------------------------------------------

    def flat_keys(self) -> list[str]:
        """Every dotted override key, for --help and validation."""
        keys = []
        for f_ in fields(self):
            if f_.name == "weights":
                keys.extend(f"weights.{k}" for k in self.weights)
            elif f_.name == "perception":
                keys.extend(f"perception.{p.name}" for p in fields(PerceptionConfig))
            else:
                keys.append(f_.name)
        return keys

    def apply_override(self, key: str, raw: str) -> None:
        """Set a dotted config key from its string form (CLI --override)."""
        if key not in self.flat_keys():
            raise ValidationError(f"unknown override key: {key}")
        parts = key.split(".")
        if parts[0] == "weights":
            self.weights[parts[1]] = _cast(raw, float)
            return
        if parts[0] == "perception":
            cur = getattr(self.perception, parts[1])
            setattr(self.perception, parts[1], _cast(raw, type(cur) if cur is not None else float))
            return
        cur = getattr(self, key)
        target = type(cur) if cur is not None else float
        setattr(self, key, _cast(raw, target))


def _cast(raw: str, target):
    if raw.lower() in ("none", "null"):
        return None
    if target is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"cannot parse boolean from {raw!r}")
    try:
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
    except ValueError as e:
        raise ValidationError(f"cannot parse {raw!r}: {e}") from None
    return raw
