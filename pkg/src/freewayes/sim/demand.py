"""Stochastic travel demand: Poisson arrivals per route over one episode."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import ROUTES, Config

CAR, TRUCK = 0, 1


@dataclass(frozen=True, eq=False)
class DemandProfile:
    """One realization of the travel demand.

    ``arrivals[r]``, ``vehicle_class[r]`` and ``depart_lane[r]`` are aligned
    arrays for route ``ROUTES[r]``; arrival times are sorted seconds in
    ``[0, horizon)``.
    """

    rates: tuple[float, float, float]
    seed: int
    horizon: float
    arrivals: tuple[np.ndarray, np.ndarray, np.ndarray]
    vehicle_class: tuple[np.ndarray, np.ndarray, np.ndarray]
    depart_lane: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(len(a) for a in self.arrivals)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for group in (self.arrivals, self.vehicle_class, self.depart_lane):
            for arr in group:
                h.update(np.ascontiguousarray(arr).tobytes())
                h.update(b"|")
        return h.hexdigest()[:16]

    @classmethod
    def empty(cls, horizon: float = 3600.0) -> "DemandProfile":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls((0.0, 0.0, 0.0), 0, horizon, (z, z, z), (zi, zi, zi), (zi, zi, zi))

    @classmethod
    def from_lists(cls, arrivals, vehicle_class=None, depart_lane=None, horizon=3600.0, lanes=5):
        """Hand-built demand; classes default to cars and mainline lanes to 1."""
        arr = tuple(np.sort(np.asarray(a, dtype=float)) for a in arrivals)
        cls_ = tuple(np.asarray(c, dtype=np.int64) for c in vehicle_class) if vehicle_class else \
            tuple(np.zeros(len(a), dtype=np.int64) for a in arr)
        if depart_lane:
            lanes_ = tuple(np.asarray(d, dtype=np.int64) for d in depart_lane)
        else:
            lanes_ = (np.ones(len(arr[0]), np.int64), np.ones(len(arr[1]), np.int64),
                      np.zeros(len(arr[2]), np.int64))
        return cls((0.0, 0.0, 0.0), -1, horizon, arr, cls_, lanes_)


def sample_demand(seed: int, rates=(2713.5, 904.5, 576.5), horizon: float = 3600.0,
                  truck_share: float = 0.15, lanes: int = 5) -> DemandProfile:
    """Sample homogeneous Poisson arrivals for the three routes.

    Mainline routes depart on a uniformly drawn mainlane; on-ramp vehicles
    enter lane 0.  Each vehicle is a truck with probability ``truck_share``.
    """
    rates = tuple(float(r) for r in rates)
    if len(rates) != 3 or any(not np.isfinite(r) or r < 0 for r in rates):
        raise ValueError(f"rates must be three non-negative finite numbers, got {rates}")
    rng = np.random.default_rng(seed)
    arrivals, classes, lanes_out = [], [], []
    for r, rate in enumerate(rates):
        count = rng.poisson(rate * horizon / 3600.0)
        arrivals.append(np.sort(rng.uniform(0.0, horizon, size=count)))
        classes.append((rng.random(count) < truck_share).astype(np.int64))
        if ROUTES[r] == "On2M":
            lanes_out.append(np.zeros(count, dtype=np.int64))
        else:
            lanes_out.append(rng.integers(1, lanes + 1, size=count).astype(np.int64))
    return DemandProfile(rates, int(seed), horizon, tuple(arrivals), tuple(classes), tuple(lanes_out))


def demand_rates(cfg: Config) -> tuple[float, float, float]:
    """Hourly route rates after calibration import and scaling."""
    base = cfg.demand.rates
    if cfg.demand.calibration_csv:
        base = rates_from_csv(cfg.demand.calibration_csv)
    return tuple(r * cfg.demand.scale for r in base)


def sample_from_config(cfg: Config, seed: int) -> DemandProfile:
    return sample_demand(seed, demand_rates(cfg), cfg.control.episode_length,
                         cfg.demand.truck_share, cfg.geometry.lanes)


def rates_from_csv(path: str | Path) -> tuple[float, float, float]:
    """Mean hourly count per route from a ``route,hour,count`` CSV."""
    totals = {r: [] for r in ROUTES}
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        missing = {"route", "hour", "count"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            route = row["route"].strip()
            if route not in totals:
                raise ValueError(f"{path}: unknown route '{route}'")
            totals[route].append(float(row["count"]))
    if any(not v for v in totals.values()):
        raise ValueError(f"{path}: every route needs at least one row")
    return tuple(float(np.mean(totals[r])) for r in ROUTES)
