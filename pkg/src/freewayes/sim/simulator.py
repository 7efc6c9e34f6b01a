"""Python front end of the microscopic freeway simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import MPH, Config
from . import kernel as K
from .demand import TRUCK, DemandProfile

SPEED_LIMIT_RANGE_MPH = (10.0, 75.0)
LIMIT_TOLERANCE = 1e-9


class SimulationError(RuntimeError):
    """Raised when an internal consistency check of the simulator fails."""


@dataclass(frozen=True)
class ActuatorState:
    """Ramp light, per-mainlane speed limits in the controlled area (m/s), lane-change permission."""

    ramp_green: bool = True
    speed_limits: tuple[float, ...] = field(default_factory=lambda: (65 * MPH,) * 5)
    lane_change_allowed: bool = True

    @classmethod
    def permissive(cls, cfg: Config) -> "ActuatorState":
        return cls(True, (cfg.geometry.main_limit_mph * MPH,) * cfg.geometry.lanes, True)


@dataclass(frozen=True)
class SensorReading:
    sensor_id: int
    speed: float
    occupancy: float


class FreewaySim:
    """Deterministic microscopic simulator of one freeway section.

    Parameters
    ----------
    cfg : Config
        Geometry, driver model, control timing and sensor layout.
    demand : DemandProfile, optional
        Arrivals to inject; defaults to an empty network.
    extra_capacity : int
        Room for vehicles placed by hand with :meth:`add_vehicle`.
    """

    def __init__(self, cfg: Config, demand: DemandProfile | None = None, extra_capacity: int = 0):
        self.cfg = cfg
        self.demand = demand if demand is not None else DemandProfile.empty(cfg.control.episode_length)
        self.dt = cfg.control.dt
        g, idm, lc = cfg.geometry, cfg.idm, cfg.lane_change
        self.n_main = g.lanes

        prm = np.zeros(K.N_PARAMS)
        prm[K.DT] = self.dt
        prm[K.MAIN_LEN] = g.main_length
        prm[K.DVSL_START] = g.dvsl_start
        prm[K.DVSL_END] = g.dvsl_end
        prm[K.MERGE_START] = g.merge_start
        prm[K.MERGE_END] = g.merge_end
        prm[K.RAMP_START] = g.ramp_start
        prm[K.SIGNAL] = g.signal_position
        prm[K.OFF_EXIT] = g.off_ramp_exit
        prm[K.MAIN_LIMIT] = g.main_limit_mph * MPH
        prm[K.RAMP_LIMIT] = g.ramp_limit_mph * MPH
        prm[K.T_HEAD] = idm.time_headway
        prm[K.S0] = idm.min_gap
        prm[K.DELTA] = idm.delta
        prm[K.B_COMPLY] = idm.comply_decel
        prm[K.B_MAX] = idm.max_decel
        prm[K.GAP_SAFE] = idm.safety_gap
        prm[K.LC_THRESH] = lc.threshold
        prm[K.LC_POLITE] = lc.politeness
        prm[K.LC_BSAFE] = lc.safe_decel
        prm[K.LC_BURGENT] = lc.urgent_decel
        prm[K.LC_MINGAP] = lc.min_gap
        prm[K.LC_COOLDOWN] = lc.cooldown
        prm[K.MAND_DIST] = lc.mandatory_distance_per_lane
        prm[K.N_MAIN] = g.lanes
        prm[K.OFF_LANE_END] = float(lc.off_ramp_lane_end)
        prm[K.OFF_LANES] = g.off_ramp_lanes
        prm[K.YIELD_DIST] = lc.yield_distance
        self.prm = prm

        self.ctrl = np.zeros(K.C_DVSL + g.lanes)
        self._actuators = ActuatorState.permissive(cfg)
        self._write_controls(self._actuators)
        self.ctrl[K.C_PREV_GREEN] = 1.0

        self._build_vehicles(extra_capacity)

        self.det_lane = np.array([s.lane for s in cfg.sensors], dtype=np.int64)
        self.det_pos = np.array([s.location for s in cfg.sensors], dtype=np.float64)
        self.posted_limit = np.array(
            [(g.ramp_limit_mph if s.lane == 0 and s.location < g.merge_start else g.main_limit_mph) * MPH
             for s in cfg.sensors])
        n_steps = int(round(cfg.control.episode_length / self.dt))
        self.exits = np.zeros(n_steps, dtype=np.int64)
        self.occ = np.zeros((n_steps, len(cfg.sensors)))
        self.spd = np.zeros((n_steps, len(cfg.sensors)))
        self.counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self.step_index = 0

    def _build_vehicles(self, extra: int) -> None:
        d = self.demand
        times = np.concatenate(d.arrivals)
        routes = np.concatenate([np.full(len(a), r, dtype=np.int64) for r, a in enumerate(d.arrivals)])
        classes = np.concatenate(d.vehicle_class).astype(np.int64)
        lanes = np.concatenate(d.depart_lane).astype(np.int64)
        order = np.lexsort((routes, times))
        n = len(times)
        cap = n + extra
        self.capacity = cap
        self.n_demand = n

        vf = np.zeros((K.N_VF, cap))
        vi = np.zeros((K.N_VI, cap), dtype=np.int64)
        self.vf, self.vi = vf, vi
        vf[K.ARRIVAL, :n] = times[order]
        vi[K.ROUTE, :n] = routes[order]
        vi[K.LANE, :n] = lanes[order]
        vi[K.STATUS, :] = K.PENDING
        self._set_class(np.arange(n), classes[order])
        vf[K.VFACT, :] = 1.0
        vf[K.LAST_LC, :] = -math.inf
        vf[K.EXIT_T, :] = math.nan

        n_lanes = self.n_main + 1
        self.lane_ids = np.full((n_lanes, max(cap, 1)), -1, dtype=np.int64)
        self.lane_n = np.zeros(n_lanes, dtype=np.int64)
        self.queue_ids = np.full((n_lanes, max(n, 1)), -1, dtype=np.int64)
        self.queue_len = np.zeros(n_lanes, dtype=np.int64)
        self.queue_head = np.zeros(n_lanes, dtype=np.int64)
        for i in range(n):
            lane = vi[K.LANE, i]
            self.queue_ids[lane, self.queue_len[lane]] = i
            self.queue_len[lane] += 1
        self._next_manual = n
        self._buf = np.zeros(max(cap, 1), dtype=np.int64)
        self._keys = np.zeros(max(cap, 1))
        self._acc = np.zeros(max(cap, 1))

    def _set_class(self, idx, classes) -> None:
        idm = self.cfg.idm
        for c, spec in ((0, idm.car), (TRUCK, idm.truck)):
            sel = idx[classes == c]
            self.vf[K.LEN, sel] = spec.length
            self.vf[K.AMAX, sel] = spec.accel
            self.vf[K.BCOMF, sel] = spec.decel
            self.vf[K.VMAX, sel] = spec.max_speed

    # --- controls -----------------------------------------------------------

    def _write_controls(self, a: ActuatorState) -> None:
        self.ctrl[K.C_GREEN] = 1.0 if a.ramp_green else 0.0
        self.ctrl[K.C_LC_ALLOWED] = 1.0 if a.lane_change_allowed else 0.0
        self.ctrl[K.C_DVSL:K.C_DVSL + self.n_main] = a.speed_limits

    def apply_controls(self, a: ActuatorState) -> None:
        """Set actuators; they take effect from the next step."""
        if len(a.speed_limits) != self.n_main:
            raise ValueError(f"expected {self.n_main} speed limits, got {len(a.speed_limits)}")
        lo, hi = (v * MPH for v in SPEED_LIMIT_RANGE_MPH)
        if any(not (lo - LIMIT_TOLERANCE <= v <= hi + LIMIT_TOLERANCE) for v in a.speed_limits):
            raise ValueError(f"speed limits {a.speed_limits} outside [{lo:.3f}, {hi:.3f}] m/s")
        self._actuators = a
        self._write_controls(a)

    @property
    def actuators(self) -> ActuatorState:
        return self._actuators

    # --- stepping -----------------------------------------------------------

    @property
    def time(self) -> float:
        return self.step_index * self.dt

    def _ensure_steps(self, upto: int) -> None:
        n = self.exits.shape[0]
        if upto <= n:
            return
        grow = max(upto, 2 * n) - n
        self.exits = np.concatenate([self.exits, np.zeros(grow, dtype=np.int64)])
        self.occ = np.vstack([self.occ, np.zeros((grow, self.occ.shape[1]))])
        self.spd = np.vstack([self.spd, np.zeros((grow, self.spd.shape[1]))])

    def advance(self, n_steps: int) -> None:
        if n_steps <= 0:
            return
        self._ensure_steps(self.step_index + n_steps)
        order_before = self.counters[K.K_ORDER]
        K.advance(n_steps, self.step_index, self.prm, self.ctrl, self.vf, self.vi, self.lane_ids,
                  self.lane_n, self.queue_ids, self.queue_len, self.queue_head, self.det_lane,
                  self.det_pos, self.exits, self.occ, self.spd, self.counters, self._buf,
                  self._keys, self._acc)
        self.step_index += n_steps
        if self.counters[K.K_ORDER] != order_before:
            raise SimulationError(f"lane ordering violated before t={self.time:.1f}s")

    def step(self, dt: float | None = None) -> None:
        if dt is not None and abs(dt - self.dt) > 1e-12:
            raise ValueError(f"the simulator steps with a fixed dt={self.dt}")
        self.advance(1)

    def run_until(self, t: float) -> None:
        self.advance(int(round(t / self.dt)) - self.step_index)

    # --- hand placement -------------------------------------------------------

    def add_vehicle(self, lane: int, x: float, v: float, vclass: int = 0, route: int = K.M2M,
                    speed_factor: float = 1.0) -> int:
        """Place a vehicle directly on the road (test scenarios)."""
        i = self._next_manual
        if i >= self.capacity:
            raise SimulationError("no spare vehicle capacity; pass extra_capacity")
        self._next_manual += 1
        self._set_class(np.array([i]), np.array([vclass]))
        self.vf[K.X, i] = self.vf[K.XPREV, i] = x
        self.vf[K.V, i] = v
        self.vf[K.VFACT, i] = speed_factor
        self.vf[K.ARRIVAL, i] = self.time
        self.vi[K.ROUTE, i] = route
        self.vi[K.STATUS, i] = K.ACTIVE
        K.lane_insert(self.lane_ids, self.lane_n, self.vf, self.vi, lane, i)
        self.counters[K.K_INJECTED] += 1
        return i

    # --- observation ----------------------------------------------------------

    def _steps(self, t0: float, t1: float) -> slice:
        k0, k1 = int(round(t0 / self.dt)), int(round(t1 / self.dt))
        if not 0 <= k0 <= k1 <= self.step_index:
            raise ValueError(f"window [{t0}, {t1}) outside simulated time [0, {self.time}]")
        return slice(k0, k1)

    def sensor_window(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
        """Occupancy-weighted mean speed (m/s) and time occupancy of every detector over [t0, t1).

        A detector no vehicle touched reports its section's posted limit as speed.
        """
        sl = self._steps(t0, t1)
        covered = self.occ[sl].sum(axis=0)
        speed_time = self.spd[sl].sum(axis=0)
        span = t1 - t0
        occupancy = covered / span if span > 0 else np.zeros_like(covered)
        speed = self.posted_limit.copy()
        seen = covered > 0
        speed[seen] = speed_time[seen] / covered[seen]
        return speed, np.minimum(occupancy, 1.0)

    def read_sensors(self, t0: float, t1: float) -> list[SensorReading]:
        speed, occ = self.sensor_window(t0, t1)
        return [SensorReading(s.id, float(speed[k]), float(occ[k])) for k, s in enumerate(self.cfg.sensors)]

    def outflow(self, t0: float, t1: float) -> int:
        """Vehicles that left via the off-ramp or the downstream end during [t0, t1)."""
        return int(self.exits[self._steps(t0, t1)].sum())

    @property
    def injected(self) -> int:
        return int(self.counters[K.K_INJECTED])

    @property
    def exited(self) -> int:
        return int(self.counters[K.K_EXITED])

    @property
    def on_network(self) -> int:
        return int(self.lane_n.sum())

    @property
    def waiting(self) -> int:
        """Arrived vehicles still queued for insertion."""
        due = self.vf[K.ARRIVAL, :self.n_demand] <= self.time - self.dt
        return int(np.sum(due & (self.vi[K.STATUS, :self.n_demand] == K.PENDING)))

    @property
    def ramp_queue(self) -> int:
        """Ramp vehicles upstream of the signal plus those waiting to enter the ramp."""
        ids = self.lane_ids[0, :self.lane_n[0]]
        on_ramp = int(np.sum(self.vf[K.X, ids] <= self.cfg.geometry.signal_position))
        pending = self.queue_head[0]
        due = np.sum(self.vf[K.ARRIVAL, self.queue_ids[0, pending:self.queue_len[0]]] <= self.time - self.dt)
        return on_ramp + int(due)

    def stats(self) -> dict[str, int]:
        names = ["injected", "exited", "exit_off", "exit_down", "missed_exit", "lane_changes",
                 "lc_left2_merge", "lc_left2_merge_forbidden", "emergency", "order_violations", "merges"]
        return {n: int(v) for n, v in zip(names, self.counters)}

    def vehicles(self) -> dict[str, np.ndarray]:
        """Snapshot of the vehicles currently on the road, ordered by lane then position."""
        ids = np.concatenate([self.lane_ids[l, :self.lane_n[l]] for l in range(self.n_main + 1)])
        limit = np.array([K.speed_limit(self.vi[K.LANE, i], self.vf[K.X, i], self.prm, self.ctrl)
                          for i in ids]) if len(ids) else np.zeros(0)
        return {
            "id": ids,
            "lane": self.vi[K.LANE, ids].copy(),
            "x": self.vf[K.X, ids].copy(),
            "v": self.vf[K.V, ids].copy(),
            "length": self.vf[K.LEN, ids].copy(),
            "route": self.vi[K.ROUTE, ids].copy(),
            "limit": limit,
        }

    def exit_time(self, vid: int) -> float:
        return float(self.vf[K.EXIT_T, vid])
