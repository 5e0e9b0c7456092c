"""Experiment configuration: flat dotted-key files and the named experiment grid.

A config file is a list of ``key = value`` lines, one setting per line, with
``#`` comments. Keys are the dotted names in ``ExperimentConfig.fields()``;
values are TOML scalars (``"text"``, ``12``, ``0.5``, ``true``) or, for
``seeds``, a list of integers such as ``[0, 1, 2]``. Unknown keys are errors.

    identifier = "M-1"
    policy = "mmcts"
    mcts.iterations = 250
    mcts.horizon_min = 120.0
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .mcts import OtherAgentPolicy, PlannerConfig

POLICIES = ("none", "queue", "mmcts")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    identifier: str = "BASE"
    policy: str = "none"
    fleet_size: int = 26
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # world
    grid_width: int = 30
    grid_height: int = 30
    cell_size: float = 1.0  # miles
    speed: float = 0.5  # miles per minute
    service_minutes: float = 20.0
    exponential_service: bool = False
    post_service: str = "return"
    depots_path: str = ""  # empty: a generated lattice layout
    n_depots: int = 30
    depot_capacity: int = 1
    depot_seed: int = 0
    # incidents; an empty path means a synthetic workload drawn per seed
    incidents_path: str = ""
    train_minutes: float = 30 * 1440.0
    eval_minutes: float = 2400.0
    n_hotspots: int = 10
    base_rate: float = 2e-4  # incidents per minute per cell
    hotspot_rate: float = 5e-3
    # rebalancing
    rebalance_min: float = 60.0
    roi: float = 3.0
    iterations: int = 250
    horizon_min: float = 120.0
    psi: float = 10.0
    alpha: float = 0.99995
    chains: int = 5
    ucb_c: float = math.sqrt(2)
    other_agent_policy: str = "static"
    oracle: bool = False

    # dotted file key for every field
    _KEYS = {
        "identifier": "identifier",
        "policy": "policy",
        "fleet_size": "fleet_size",
        "seeds": "seeds",
        "grid_width": "grid.width",
        "grid_height": "grid.height",
        "cell_size": "grid.cell_size",
        "speed": "travel.speed",
        "service_minutes": "service.minutes",
        "exponential_service": "service.exponential",
        "post_service": "service.after",
        "depots_path": "depots.path",
        "n_depots": "depots.count",
        "depot_capacity": "depots.capacity",
        "depot_seed": "depots.seed",
        "incidents_path": "incidents.path",
        "train_minutes": "incidents.train_min",
        "eval_minutes": "incidents.eval_min",
        "n_hotspots": "synthetic.hotspots",
        "base_rate": "synthetic.base_rate",
        "hotspot_rate": "synthetic.hotspot_rate",
        "rebalance_min": "rebalance.period_min",
        "roi": "queue.roi",
        "iterations": "mcts.iterations",
        "horizon_min": "mcts.horizon_min",
        "psi": "mcts.psi",
        "alpha": "mcts.alpha",
        "chains": "mcts.chains",
        "ucb_c": "mcts.ucb_c",
        "other_agent_policy": "mcts.other_agent_policy",
        "oracle": "mcts.oracle",
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.policy not in POLICIES:
            problems.append(f"policy: must be one of {', '.join(POLICIES)}, got {self.policy!r}")
        if self.fleet_size < 1:
            problems.append("fleet_size: must be >= 1")
        if not self.seeds:
            problems.append("seeds: need at least one seed")
        if self.grid_width < 1 or self.grid_height < 1 or not self.cell_size > 0:
            problems.append("grid: width, height and cell_size must be positive")
        if not self.speed > 0:
            problems.append("travel.speed: must be positive")
        if not self.service_minutes > 0:
            problems.append("service.minutes: must be positive")
        if self.post_service not in ("return", "idle"):
            problems.append("service.after: must be 'return' or 'idle'")
        if not self.depots_path and self.n_depots * self.depot_capacity < self.fleet_size:
            problems.append("depots.count: total capacity is below fleet_size")
        for name in ("depots_path", "incidents_path"):
            path = getattr(self, name)
            if path and not Path(path).is_file():
                problems.append(f"{self._KEYS[name]}: no such file {path!r}")
        if not self.train_minutes > 0 or not self.eval_minutes > 0:
            problems.append("incidents: train_min and eval_min must be positive")
        if not self.rebalance_min > 0:
            problems.append("rebalance.period_min: must be positive")
        if not self.roi > 0:
            problems.append("queue.roi: must be positive")
        try:
            self.planner_config()
        except ValueError as exc:
            problems.append(f"mcts: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            iteration_limit=self.iterations,
            lookahead_horizon=self.horizon_min,
            psi=self.psi,
            alpha=self.alpha,
            rebalance_period=self.rebalance_min,
            n_chains=self.chains,
            ucb_c=self.ucb_c,
            other_agent_policy=OtherAgentPolicy(self.other_agent_policy),
            roi=self.roi,
        )

    @classmethod
    def fields(cls) -> dict[str, str]:
        """Attribute name to dotted file key."""
        return dict(cls._KEYS)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for name, key in self._KEYS.items():
            lines.append(f"{key} = {_format(getattr(self, name))}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_mapping(cls, flat: dict[str, Any], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        by_key = {key: name for name, key in cls._KEYS.items()}
        changes = {}
        for key, value in flat.items():
            if key not in by_key:
                raise ConfigError(f"unknown config key {key!r}")
            changes[by_key[key]] = _coerce(cls, by_key[key], value)
        return dataclasses.replace(base or cls(), **changes)

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad config syntax: {exc}") from None
        return cls.from_mapping(_flatten(data), base)

    @classmethod
    def load(cls, path: str | Path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), base)


def _flatten(data: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, list):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    return str(value)


def _coerce(cls, name: str, value):
    kind = type(getattr(cls(), name))
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{cls._KEYS[name]}: expected a list of integers")
        return list(value)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{cls._KEYS[name]}: expected {kind.__name__}, got {value!r}")
    return value


def experiment_grid(base: ExperimentConfig | None = None) -> dict[str, ExperimentConfig]:
    """The named experiment runs; anything not set per run comes from ``base``."""
    b = base or ExperimentConfig()
    mcts = dict(policy="mmcts", iterations=250, horizon_min=120.0, psi=10.0, alpha=0.99995, rebalance_min=60.0,
                other_agent_policy="static", oracle=False)
    grid = {"BASE": b.replace(identifier="BASE", policy="none")}
    for roi in range(1, 6):
        # the queue runs rebalance every half hour
        grid[f"Q-{roi}"] = b.replace(identifier=f"Q-{roi}", policy="queue", roi=float(roi), rebalance_min=30.0)
    grid["MR-1"] = b.replace(identifier="MR-1", **{**mcts, "oracle": True})
    grid["MR-2"] = b.replace(identifier="MR-2", **{**mcts, "oracle": True, "other_agent_policy": "queue"})
    grid["M-1"] = b.replace(identifier="M-1", **mcts)
    grid["M-2"] = b.replace(identifier="M-2", **{**mcts, "iterations": 100})
    grid["M-3"] = b.replace(identifier="M-3", **{**mcts, "iterations": 500})
    grid["M-4"] = b.replace(identifier="M-4", **{**mcts, "psi": 0.0})
    grid["M-5"] = b.replace(identifier="M-5", **{**mcts, "psi": 100.0})
    grid["M-6"] = b.replace(identifier="M-6", **{**mcts, "horizon_min": 30.0, "rebalance_min": 30.0})
    return grid
