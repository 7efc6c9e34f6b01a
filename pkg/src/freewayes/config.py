"""Experiment configuration: typed sections, YAML loading, validation and hashing.

Every section is a frozen dataclass with documented defaults, so an empty
config file resolves to the desk-scale reference experiment.  Unknown keys
are rejected by name.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MPH = 0.44704  # m/s per mile/h

AGENTS = ("rm", "dvsl", "lcc")
ROUTES = ("M2M", "M2Off", "On2M")

#: Route rates (veh/h) observed on the reference freeway section.
REFERENCE_RATES = (5427.0, 1809.0, 1153.0)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass(frozen=True)
class GeometryConfig:
    """Freeway section layout.  All positions are meters along the mainline.

    Lane 0 is the on-ramp / acceleration lane, lanes 1..``lanes`` are the
    mainlanes counted from the right.  The ramp lane runs from
    ``merge_start - ramp_length`` to ``merge_end`` and only touches lane 1
    inside ``[merge_start, merge_end)``.
    """

    main_length: float = 874.51
    lanes: int = 5
    dvsl_start: float = 120.0
    dvsl_end: float = 420.0
    merge_start: float = 540.0
    merge_end: float = 700.0
    ramp_length: float = 250.0
    signal_position: float = 490.0
    off_ramp_exit: float = 800.0
    # rightmost mainlanes from which the off-ramp can be taken
    off_ramp_lanes: int = 1
    main_limit_mph: float = 65.0
    ramp_limit_mph: float = 50.0

    @property
    def ramp_start(self) -> float:
        return self.merge_start - self.ramp_length

    def sections(self) -> list[tuple[str, float, float]]:
        """Mainline sections as ``(name, start, end)``, contiguous and ordered."""
        return [
            ("upstream_dvsl", 0.0, self.dvsl_start),
            ("dvsl", self.dvsl_start, self.dvsl_end),
            ("upstream_merge", self.dvsl_end, self.merge_start),
            ("merge", self.merge_start, self.merge_end),
            ("off_ramp", self.merge_end, self.off_ramp_exit),
            ("downstream", self.off_ramp_exit, self.main_length),
        ]


@dataclass(frozen=True)
class VehicleClassConfig:
    length: float
    accel: float
    decel: float
    max_speed: float


@dataclass(frozen=True)
class IDMConfig:
    time_headway: float = 1.4
    min_gap: float = 2.0
    delta: float = 4.0
    car: VehicleClassConfig = VehicleClassConfig(length=3.5, accel=1.5, decel=2.0, max_speed=60.0)
    truck: VehicleClassConfig = VehicleClassConfig(length=8.0, accel=1.0, decel=1.5, max_speed=25.0)
    # deceleration used to shed speed above the current limit
    comply_decel: float = 3.0
    max_decel: float = 9.0
    safety_gap: float = 0.1


@dataclass(frozen=True)
class LaneChangeConfig:
    threshold: float = 0.2
    politeness: float = 0.2
    safe_decel: float = 3.0
    urgent_decel: float = 6.0
    min_gap: float = 1.0
    cooldown: float = 3.0
    # M2Off vehicles must move right once within this distance per lane to cross
    mandatory_distance_per_lane: float = 150.0
    # off-ramp vehicles outside lane 1 stop at the diverge instead of exiting late
    off_ramp_lane_end: bool = False
    # followers open a gap for a blocked mandatory changer at most this far ahead
    yield_distance: float = 60.0


@dataclass(frozen=True)
class DemandConfig:
    rates: tuple[float, float, float] = REFERENCE_RATES
    scale: float = 0.5
    truck_share: float = 0.15
    calibration_csv: str | None = None


@dataclass(frozen=True)
class ControlConfig:
    dt: float = 0.5
    episode_length: float = 3600.0
    rm_cycle: float = 3.0
    dvsl_cycle: float = 60.0
    lcc_cycle: float = 30.0

    def cycle(self, agent: str) -> float:
        return {"rm": self.rm_cycle, "dvsl": self.dvsl_cycle, "lcc": self.lcc_cycle}[agent]


@dataclass(frozen=True)
class NetworkConfig:
    gcn_features: tuple[int, ...] = (5, 3)
    sharing_dim: int = 8
    dvsl_levels: int = 13
    speed_min_mph: float = 10.0
    speed_step_mph: float = 5.0
    init_seed: int = 0


@dataclass(frozen=True)
class ESConfig:
    workers: int = 50
    sigma: float = 0.1
    learning_rate: float = 0.01
    w0: float = 0.5
    w_decay: float = 0.99
    w_min: float = 0.0
    generations: int = 40
    master_seed: int = 0
    shaping: str = "mean-centered"
    antithetic: bool = False
    checkpoint_every: int = 10
    jobs: int = 1


@dataclass(frozen=True)
class EvalConfig:
    demands: int = 100
    seed: int = 20190701


@dataclass(frozen=True)
class SensorSpec:
    id: int
    location: float
    section: str
    lane: int


def _station(first_id: int, location: float, section: str, lanes) -> list[SensorSpec]:
    return [SensorSpec(first_id + k, location, section, lane) for k, lane in enumerate(lanes)]


def default_sensors() -> tuple[SensorSpec, ...]:
    main = range(1, 6)
    sensors = (
        _station(0, 60.0, "upstream_dvsl", main)
        + _station(5, 200.0, "dvsl", main)
        + _station(10, 340.0, "dvsl", main)
        + [SensorSpec(15, 310.0, "on_ramp", 0), SensorSpec(16, 470.0, "on_ramp", 0)]
        + _station(17, 500.0, "upstream_merge", main)
        + [SensorSpec(22, 520.0, "upstream_merge", 0)]
        + _station(23, 580.0, "merge", range(0, 6))
        + _station(29, 660.0, "merge", range(0, 6))
    )
    return tuple(sensors)


def default_agent_sensors() -> dict[str, tuple[int, ...]]:
    return {
        "rm": (15, 16, 17, 18, 19, 20, 21, 22),
        "dvsl": tuple(range(0, 15)) + (17, 18, 19, 20, 21, 22, 15),
        "lcc": tuple(range(23, 35)),
    }


@dataclass(frozen=True)
class Config:
    geometry: GeometryConfig = GeometryConfig()
    idm: IDMConfig = IDMConfig()
    lane_change: LaneChangeConfig = LaneChangeConfig()
    demand: DemandConfig = DemandConfig()
    control: ControlConfig = ControlConfig()
    network: NetworkConfig = NetworkConfig()
    es: ESConfig = ESConfig()
    eval: EvalConfig = EvalConfig()
    sensors: tuple[SensorSpec, ...] = field(default_factory=default_sensors)
    agents: dict[str, tuple[int, ...]] = field(default_factory=default_agent_sensors)

    def replace(self, **sections: Any) -> "Config":
        """Return a copy with selected fields of selected sections replaced.

        ``cfg.replace(es={"workers": 20}, demand={"scale": 1.0})``
        """
        updates = {}
        for name, values in sections.items():
            current = getattr(self, name)
            if isinstance(values, dict) and dataclasses.is_dataclass(current):
                updates[name] = dataclasses.replace(current, **values)
            else:
                updates[name] = values
        cfg = dataclasses.replace(self, **updates)
        validate(cfg)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _field_default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


def _build(cls, data: Any, path: str):
    """Recursively build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key '{where}'")
        default = _field_default(fields[key])
        if key == "sensors":
            kwargs[key] = tuple(_build(SensorSpec, item, f"{where}[{k}]") for k, item in enumerate(value))
        elif key == "agents":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            for agent in value:
                if agent not in AGENTS:
                    raise ConfigError(f"unknown config key '{where}.{agent}'")
            merged = dict(default_agent_sensors())
            merged.update({a: tuple(int(i) for i in ids) for a, ids in value.items()})
            kwargs[key] = merged
        elif dataclasses.is_dataclass(default):
            base = _to_plain(default)
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            for sub in value:
                if sub not in base:
                    raise ConfigError(f"unknown config key '{where}.{sub}'")
            base.update(value)
            kwargs[key] = _build(type(default), base, where)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            kwargs[key] = bool(value)
        elif isinstance(default, float) and isinstance(value, (int, float)):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _multiple(value: float, base: float) -> bool:
    ratio = value / base
    return abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1


def validate(cfg: Config) -> Config:
    g = cfg.geometry
    bounds = [0.0, g.dvsl_start, g.dvsl_end, g.merge_start, g.merge_end, g.off_ramp_exit, g.main_length]
    if any(b >= a for a, b in zip(bounds[1:], bounds[:-1])):
        raise ConfigError(f"geometry sections must be ordered and non-empty: {bounds}")
    if not (g.ramp_start >= 0.0 and g.ramp_start < g.signal_position < g.merge_start):
        raise ConfigError("signal_position must lie on the ramp upstream of merge_start")
    if g.lanes < 3:
        raise ConfigError("at least 3 mainlanes are required")

    c = cfg.control
    if c.dt <= 0:
        raise ConfigError("control.dt must be positive")
    for agent in AGENTS:
        cycle = c.cycle(agent)
        if not _multiple(cycle, c.dt):
            raise ConfigError(f"control.{agent}_cycle={cycle} is not a multiple of dt={c.dt}")
        if not _multiple(c.episode_length, cycle):
            raise ConfigError(f"control.{agent}_cycle={cycle} does not divide episode_length")

    d = cfg.demand
    if len(d.rates) != 3 or any(not math.isfinite(r) or r < 0 for r in d.rates):
        raise ConfigError("demand.rates must be three non-negative numbers")
    if d.scale < 0 or not 0.0 <= d.truck_share <= 1.0:
        raise ConfigError("demand.scale must be >= 0 and truck_share in [0, 1]")

    n = cfg.network
    if not n.gcn_features or min(n.gcn_features) < 1 or n.sharing_dim < 1 or n.dvsl_levels < 1:
        raise ConfigError("network sizes must be positive")

    e = cfg.es
    if e.workers < 2 or e.sigma <= 0 or e.learning_rate <= 0:
        raise ConfigError("es requires workers >= 2, sigma > 0, learning_rate > 0")
    if not 0.0 <= e.w0 <= 1.0 or not 0.0 <= e.w_decay <= 1.0 or not 0.0 <= e.w_min <= 1.0:
        raise ConfigError("es.w0, es.w_decay and es.w_min must lie in [0, 1]")
    if e.shaping not in ("raw", "centered", "mean-centered", "centered-rank"):
        raise ConfigError(f"unknown es.shaping '{e.shaping}'")
    if e.antithetic and e.workers % 2:
        raise ConfigError("antithetic sampling needs an even worker count")

    ids = [s.id for s in cfg.sensors]
    if sorted(ids) != list(range(len(ids))):
        raise ConfigError("sensor ids must be unique and contiguous from 0")
    for s in cfg.sensors:
        if s.location < 0 or not 0 <= s.lane <= g.lanes:
            raise ConfigError(f"sensor {s.id}: invalid location or lane")
    for agent in AGENTS:
        members = cfg.agents.get(agent, ())
        if not members or any(i not in range(len(ids)) for i in members):
            raise ConfigError(f"agents.{agent} must list known sensor ids")
    return cfg


def from_dict(data: dict[str, Any] | None) -> Config:
    cfg = _build(Config, data or {}, "")
    return validate(cfg)


def load_config(path: str | Path) -> Config:
    """Parse a YAML config file; an empty file yields all defaults."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: Config, path: str | Path) -> None:
    """Write the fully resolved config (defaults included) for provenance."""
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
