"""One controlled episode: sensor aggregation, asynchronous agents, outflow and behavior.

Each agent decides on its own cycle (ramp metering every 3 s, speed limits
every 60 s, lane-change control every 30 s by default).  The first decision
happens after one full cycle; until then an agent's actuator holds its
permissive default.  Agents due at the same timestamp read one state
snapshot and their actions are applied together.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AGENTS, Config
from .ksgcn import KSGCN, decode_speed_limits
from .sim import ActuatorState, DemandProfile, FreewaySim, sample_from_config


@dataclass(frozen=True)
class CycleSchedule:
    """Decision cycles in seconds and the simulator step they are counted in."""

    rm: float = 3.0
    dvsl: float = 60.0
    lcc: float = 30.0
    episode: float = 3600.0
    dt: float = 0.5

    @classmethod
    def from_config(cls, cfg: Config) -> "CycleSchedule":
        c = cfg.control
        return cls(c.rm_cycle, c.dvsl_cycle, c.lcc_cycle, c.episode_length, c.dt)

    def cycle(self, agent: str) -> float:
        return {"rm": self.rm, "dvsl": self.dvsl, "lcc": self.lcc}[agent]

    def cycle_steps(self, agent: str) -> int:
        return int(round(self.cycle(agent) / self.dt))

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode / self.dt))

    def decision_steps(self, agent: str) -> np.ndarray:
        """Step indices of the agent's decisions: one full cycle in, none at the episode end."""
        c = self.cycle_steps(agent)
        return np.arange(c, self.episode_steps, c, dtype=np.int64)

    def decision_times(self, agent: str) -> np.ndarray:
        return self.decision_steps(agent) * self.dt

    def all_decision_steps(self) -> np.ndarray:
        return np.unique(np.concatenate([self.decision_steps(a) for a in AGENTS]))

    @property
    def tick(self) -> float:
        """Shortest cycle; the outflow series is reported at this resolution."""
        return min(self.rm, self.dvsl, self.lcc)


@dataclass
class ActionTrace:
    """Decision timestamps (s) and the raw actions taken at them."""

    times: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class EpisodeResult:
    """Outcome of one episode.

    ``outflow`` counts exits per ``tick`` seconds, so ``F == outflow.sum()``.
    ``b`` is ``None`` for uncontrolled runs.
    """

    F: int
    b: np.ndarray | None
    traces: dict[str, ActionTrace]
    outflow: np.ndarray
    tick: float
    demand_seed: int
    demand_fingerprint: str
    D: int
    stats: dict[str, int] = field(default_factory=dict)
    inputs: list | None = None
    actuators: dict[str, np.ndarray] | None = None


# --- state aggregation ---------------------------------------------------------

def agent_sensor_index(cfg: Config, agent: str) -> np.ndarray:
    """Row positions of an agent's sensors in the simulator's detector arrays."""
    position = {s.id: k for k, s in enumerate(cfg.sensors)}
    return np.array([position[i] for i in cfg.agents[agent]], dtype=np.int64)


def aggregate_state(sim: FreewaySim, agent: str, t: float, cfg: Config | None = None) -> np.ndarray:
    """Agent state tensor over the window ``[t - T, t)`` (clipped at 0).

    Rows follow the agent's sensor list; columns are speed divided by the
    posted limit and time occupancy.
    """
    cfg = cfg or sim.cfg
    t0 = max(0.0, t - cfg.control.cycle(agent))
    speed, occ = sim.sensor_window(t0, t)
    idx = agent_sensor_index(cfg, agent)
    return np.column_stack([speed[idx] / sim.posted_limit[idx], occ[idx]])


# --- behavior ------------------------------------------------------------------

def behavior_vector(traces: dict[str, ActionTrace], dvsl_levels: int = 13) -> np.ndarray:
    """``[mean RM action, mean DVSL index / (M + 1), mean LCC action]``.

    The DVSL mean runs jointly over lanes and decision times.
    """
    for a in AGENTS:
        if a not in traces or len(traces[a]) == 0:
            raise ValueError(f"behavior vector needs a non-empty {a} trace")
    return np.array([
        float(np.mean(traces["rm"].actions)),
        float(np.mean(traces["dvsl"].actions)) / (dvsl_levels + 1),
        float(np.mean(traces["lcc"].actions)),
    ])


# --- episodes ------------------------------------------------------------------

_NETWORKS: dict[str, KSGCN] = {}


def network_for(cfg: Config) -> KSGCN:
    """Policy network for ``cfg`` (cached per config hash)."""
    key = cfg.hash()
    if key not in _NETWORKS:
        _NETWORKS[key] = KSGCN.from_config(cfg)
    return _NETWORKS[key]


def _demand(cfg: Config, demand: DemandProfile | int) -> DemandProfile:
    if isinstance(demand, DemandProfile):
        return demand
    return sample_from_config(cfg, int(demand))


def _result(sim: FreewaySim, sched: CycleSchedule, demand: DemandProfile, traces, b, inputs,
            actuators=None):
    per_tick = int(round(sched.tick / sched.dt))
    exits = sim.exits[:sched.episode_steps]
    outflow = exits.reshape(-1, per_tick).sum(axis=1)
    return EpisodeResult(
        F=int(outflow.sum()), b=b, traces=traces, outflow=outflow, tick=sched.tick,
        demand_seed=demand.seed, demand_fingerprint=demand.fingerprint(), D=demand.total,
        stats=sim.stats(), inputs=inputs, actuators=actuators,
    )


def run_baseline(cfg: Config, demand: DemandProfile | int) -> EpisodeResult:
    """No-control episode: every actuator stays at its permissive default."""
    demand = _demand(cfg, demand)
    sched = CycleSchedule.from_config(cfg)
    sim = FreewaySim(cfg, demand)
    sim.run_until(sched.episode)
    empty = {a: ActionTrace(np.zeros(0), np.zeros(0, dtype=np.int64)) for a in AGENTS}
    return _result(sim, sched, demand, empty, None, None)


def run_episode(genome: np.ndarray, demand: DemandProfile | int, cfg: Config,
                network: KSGCN | None = None, record_inputs: bool = False,
                record_actuators: bool = False) -> EpisodeResult:
    """Run one controlled episode of ``cfg.control.episode_length`` seconds.

    At every decision time all three state tensors are aggregated from the
    same simulator snapshot and one forward pass is made; only the agents
    that are due change their actuators.

    With ``record_actuators`` the actuator state in force during every
    simulator step is kept in ``result.actuators`` (keys ``green``,
    ``limits``, ``lc``) for auditing.
    """
    demand = _demand(cfg, demand)
    net = network or network_for(cfg)
    genome = np.asarray(genome, dtype=np.float64)
    sched = CycleSchedule.from_config(cfg)
    nw = cfg.network
    sim = FreewaySim(cfg, demand)
    idx = {a: agent_sensor_index(cfg, a) for a in AGENTS}
    cyc = {a: sched.cycle_steps(a) for a in AGENTS}

    act = ActuatorState.permissive(cfg)
    ramp_green, limits, lc_allowed = act.ramp_green, act.speed_limits, act.lane_change_allowed
    times = {a: [] for a in AGENTS}
    actions = {a: [] for a in AGENTS}
    inputs = [] if record_inputs else None
    log = _ActuatorLog(sched.episode_steps, cfg.geometry.lanes) if record_actuators else None

    def advance_to(step):
        if log is not None:
            log.fill(sim.step_index, step, sim.actuators)
        sim.advance(step - sim.step_index)

    for step in sched.all_decision_steps():
        advance_to(int(step))
        t = step * sched.dt
        windows = {}
        states = {}
        for a in AGENTS:
            t0 = max(0.0, t - sched.cycle(a))
            if t0 not in windows:
                speed, occ = sim.sensor_window(t0, t)
                windows[t0] = (speed / sim.posted_limit, occ)
            speed_n, occ = windows[t0]
            states[a] = np.column_stack([speed_n[idx[a]], occ[idx[a]]])
        out = net.forward(genome, states)
        if record_inputs:
            inputs.append((float(t), {a: s.copy() for a, s in states.items()}))

        if step % cyc["rm"] == 0:
            ramp_green = bool(out.rm)
            times["rm"].append(t)
            actions["rm"].append(out.rm)
        if step % cyc["dvsl"] == 0:
            limits = tuple(decode_speed_limits(out.dvsl, nw.dvsl_levels, nw.speed_min_mph,
                                               nw.speed_step_mph))
            times["dvsl"].append(t)
            actions["dvsl"].append(out.dvsl.copy())
        if step % cyc["lcc"] == 0:
            lc_allowed = bool(out.lcc)
            times["lcc"].append(t)
            actions["lcc"].append(out.lcc)
        sim.apply_controls(ActuatorState(ramp_green, limits, lc_allowed))

    advance_to(sched.episode_steps)
    traces = {
        "rm": ActionTrace(np.array(times["rm"]), np.array(actions["rm"], dtype=np.int64)),
        "dvsl": ActionTrace(np.array(times["dvsl"]),
                            np.array(actions["dvsl"], dtype=np.int64).reshape(-1, net.dvsl_lanes)),
        "lcc": ActionTrace(np.array(times["lcc"]), np.array(actions["lcc"], dtype=np.int64)),
    }
    b = behavior_vector(traces, nw.dvsl_levels)
    return _result(sim, sched, demand, traces, b, inputs, log.arrays() if log else None)


class _ActuatorLog:
    def __init__(self, steps: int, lanes: int):
        self.green = np.zeros(steps, dtype=np.int64)
        self.lc = np.zeros(steps, dtype=np.int64)
        self.limits = np.zeros((steps, lanes))

    def fill(self, k0: int, k1: int, a: ActuatorState) -> None:
        self.green[k0:k1] = a.ramp_green
        self.lc[k0:k1] = a.lane_change_allowed
        self.limits[k0:k1] = a.speed_limits

    def arrays(self) -> dict[str, np.ndarray]:
        return {"green": self.green, "lc": self.lc, "limits": self.limits}


def audit_trace(result: EpisodeResult, cfg: Config) -> list[str]:
    """Check the asynchrony contract of one controlled episode; returns the violations found.

    Decision times must be exact multiples of the agent's cycle, and (when
    actuators were recorded) an agent's actuator may only change at its own
    decision steps and must then hold the decided setting.
    """
    sched = CycleSchedule.from_config(cfg)
    nw = cfg.network
    problems = []
    for agent in AGENTS:
        times = result.traces[agent].times
        cycle = sched.cycle(agent)
        k = times / cycle
        if np.any(k != np.round(k)) or np.any(np.diff(times) != cycle) or (len(times) and times[0] != cycle):
            problems.append(f"{agent}: decision times are not consecutive multiples of {cycle:g} s")
    act = result.actuators
    if act is None:
        return problems
    settings = {
        "rm": act["green"],
        "lcc": act["lc"],
        "dvsl": act["limits"],
    }
    for agent, series in settings.items():
        steps = np.round(result.traces[agent].times / sched.dt).astype(np.int64)
        changed = np.flatnonzero(np.any((series[1:] != series[:-1]).reshape(len(series) - 1, -1), axis=1)) + 1
        if not np.all(np.isin(changed, steps)):
            bad = changed[~np.isin(changed, steps)][0] * sched.dt
            problems.append(f"{agent}: actuator changed at t={bad:g} s outside a decision")
        actions = result.traces[agent].actions
        if agent == "dvsl":
            expected = decode_speed_limits(actions, nw.dvsl_levels, nw.speed_min_mph, nw.speed_step_mph)
            held = series[steps]
        else:
            expected, held = actions, series[steps]
        if not np.array_equal(held, expected):
            problems.append(f"{agent}: actuator does not hold the decided setting")
    return problems


def permissive_genome(cfg: Config, network: KSGCN | None = None) -> np.ndarray:
    """Frozen genome that always emits green light, the posted mainline limit, and lane changes allowed."""
    net = network or network_for(cfg)
    nw = cfg.network
    index = (cfg.geometry.main_limit_mph - nw.speed_min_mph) / nw.speed_step_mph
    if abs(index - round(index)) > 1e-9:
        raise ValueError("the posted mainline limit is not on the speed-limit grid")
    return net.constant_genome(rm=1, dvsl_index=int(round(index)), lcc=1)


# --- export ----------------------------------------------------------------------

def write_trace_csv(result: EpisodeResult, path: str | Path, cfg: Config) -> None:
    """Action trace as ``time_s,agent,lane,action,setting`` rows.

    ``setting`` is the actuator value: 1/0 for the ramp light (green/red) and
    lane-change permission, mph for speed limits.  ``lane`` is empty except
    for speed limits.
    """
    nw = cfg.network
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        w = csv.writer(fh)
        w.writerow(["time_s", "agent", "lane", "action", "setting"])
        rows = []
        for agent in AGENTS:
            tr = result.traces[agent]
            for t, a in zip(tr.times, tr.actions):
                if agent == "dvsl":
                    mph = decode_speed_limits(a, nw.dvsl_levels, nw.speed_min_mph, nw.speed_step_mph,
                                              unit="mph")
                    for lane, (ai, v) in enumerate(zip(a, mph), start=1):
                        rows.append((t, agent, lane, int(ai), f"{v:g}"))
                else:
                    rows.append((t, agent, "", int(a), str(int(a))))
        order = {a: k for k, a in enumerate(AGENTS)}
        rows.sort(key=lambda r: (r[0], order[r[1]], r[2] if r[2] != "" else 0))
        for t, agent, lane, a, setting in rows:
            w.writerow([f"{t:g}", agent, lane, a, setting])


def write_outflow_csv(result: EpisodeResult, path: str | Path, cfg: Config) -> None:
    """Exits per reporting tick as ``window_start_s,window_end_s,outflow`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        w = csv.writer(fh)
        w.writerow(["window_start_s", "window_end_s", "outflow"])
        for k, r in enumerate(result.outflow):
            w.writerow([f"{k * result.tick:g}", f"{(k + 1) * result.tick:g}", int(r)])
