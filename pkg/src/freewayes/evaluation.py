"""Paired evaluation against the no-control baseline on held-out demands.

For every demand seed the controlled episode and the no-control episode run
on the identical demand realization, so ``F_i - F^N_i`` is a common-random-
numbers difference.  Per-row metrics are

    TDS_i = F_i / D_i,        IL_i = (F_i - F^N_i) / F^N_i

with ``D_i`` the realized number of vehicles demanded during the episode.
Both the arithmetic means of the per-row values and pooled ratios
(``sum F / sum D``) are reported, labeled as such.
"""
from __future__ import annotations

import csv
import hashlib
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import Config
from .control_loop import run_baseline, run_episode
from .es import load_checkpoint


class DemandMismatch(AssertionError):
    """Controlled and baseline episodes of one row saw different demand."""


@dataclass(frozen=True)
class EvalRow:
    demand_seed: int
    D: int
    F_N: int
    F: int | None = None

    @property
    def TDS(self) -> float | None:
        return None if self.F is None else self.F / self.D

    @property
    def TDS_N(self) -> float:
        return self.F_N / self.D

    @property
    def IL(self) -> float | None:
        return None if self.F is None else (self.F - self.F_N) / self.F_N


def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x)), float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


@dataclass
class EvalReport:
    """Rows ordered by demand seed plus provenance.

    ``checkpoint_id`` is ``None`` for baseline-only reports.
    """

    rows: list[EvalRow]
    config_hash: str
    checkpoint_id: str | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def controlled(self) -> bool:
        return all(r.F is not None for r in self.rows)

    def differences(self) -> np.ndarray:
        return np.array([r.F - r.F_N for r in self.rows], dtype=np.int64)

    def sign_test(self) -> tuple[int, int, float]:
        """One-sided paired sign test of ``F_i > F^N_i``.

        Ties are dropped.  Returns ``(positives, non-ties, p-value)``.
        """
        d = self.differences()
        pos, n = int(np.sum(d > 0)), int(np.sum(d != 0))
        p = 1.0 if n == 0 else float(stats.binomtest(pos, n, 0.5, alternative="greater").pvalue)
        return pos, n, p

    def summary(self) -> dict[str, float | int | str | None]:
        D = [r.D for r in self.rows]
        F_N = [r.F_N for r in self.rows]
        out: dict[str, float | int | str | None] = {
            "demands": len(self.rows),
            "mean_D": float(np.mean(D)),
            "mean_F_N": _mean_std(F_N)[0], "std_F_N": _mean_std(F_N)[1],
            "mean_TDS_N": _mean_std([r.TDS_N for r in self.rows])[0],
            "std_TDS_N": _mean_std([r.TDS_N for r in self.rows])[1],
            "pooled_TDS_N": float(np.sum(F_N) / np.sum(D)),
        }
        if self.controlled:
            F = [r.F for r in self.rows]
            pos, n, p = self.sign_test()
            out.update({
                "mean_F": _mean_std(F)[0], "std_F": _mean_std(F)[1],
                "mean_TDS": _mean_std([r.TDS for r in self.rows])[0],
                "std_TDS": _mean_std([r.TDS for r in self.rows])[1],
                "pooled_TDS": float(np.sum(F) / np.sum(D)),
                "mean_IL": _mean_std([r.IL for r in self.rows])[0],
                "std_IL": _mean_std([r.IL for r in self.rows])[1],
                "pooled_IL": float((np.sum(F) - np.sum(F_N)) / np.sum(F_N)),
                "mean_dF": float(np.mean(self.differences())),
                "sign_test_positive": pos, "sign_test_n": n, "sign_test_p": p,
            })
        out["checkpoint_id"] = self.checkpoint_id
        out["config_hash"] = self.config_hash
        out["warnings"] = "; ".join(self.warnings)
        return out

    # -- export
    def write_rows(self, path: str | Path) -> None:
        cols = ["demand_seed", "D", "F_N", "TDS_N"]
        if self.controlled:
            cols = ["demand_seed", "D", "F", "F_N", "TDS", "TDS_N", "IL"]
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in cols])

    def write_summary(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["statistic", "value"])
            for k, v in self.summary().items():
                w.writerow([k, "" if v is None else _fmt(v)])


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def heldout_seeds(num_demands: int, seed: int) -> list[int]:
    """Consecutive demand seeds starting at ``seed``."""
    if num_demands < 1:
        raise ValueError("num_demands must be at least 1")
    return [int(seed) + k for k in range(num_demands)]


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _paired_row(args) -> EvalRow:
    genome, seed, cfg = args
    base = run_baseline(cfg, seed)
    if genome is None:
        return EvalRow(seed, base.D, base.F)
    ctrl = run_episode(genome, seed, cfg)
    if ctrl.demand_fingerprint != base.demand_fingerprint or ctrl.D != base.D:
        raise DemandMismatch(f"demand seed {seed}: paired episodes consumed different demand")
    return EvalRow(seed, ctrl.D, base.F, ctrl.F)


def _rows(genome, cfg: Config, seeds: list[int], workers: int) -> list[EvalRow]:
    tasks = [(genome, s, cfg) for s in seeds]
    if workers <= 1:
        rows = [_paired_row(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_paired_row, tasks))
    return sorted(rows, key=lambda r: r.demand_seed)


def evaluate_genome(genome: np.ndarray, cfg: Config, num_demands: int | None = None,
                    seed: int | None = None, workers: int = 1,
                    checkpoint: str | None = None) -> EvalReport:
    """Paired controlled / no-control evaluation of ``genome``."""
    seeds = heldout_seeds(num_demands or cfg.eval.demands,
                          cfg.eval.seed if seed is None else seed)
    rows = _rows(np.asarray(genome, dtype=np.float64), cfg, seeds, workers)
    return EvalReport(rows, cfg.hash(), checkpoint)


def evaluate(checkpoint: str | Path, cfg: Config, num_demands: int | None = None,
             seed: int | None = None, workers: int = 1) -> EvalReport:
    """Evaluate a saved policy.  A config-hash mismatch is a warning recorded in the report."""
    ck = load_checkpoint(checkpoint)
    notes = []
    if ck.config_hash != cfg.hash():
        msg = (f"checkpoint was trained under config {ck.config_hash}, "
               f"evaluating under {cfg.hash()}")
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    report = evaluate_genome(ck.genome, cfg, num_demands, seed, workers, checkpoint_id(checkpoint))
    report.warnings.extend(notes)
    return report


def baseline(cfg: Config, num_demands: int | None = None, seed: int | None = None,
             workers: int = 1) -> EvalReport:
    """No-control episodes only."""
    seeds = heldout_seeds(num_demands or cfg.eval.demands,
                          cfg.eval.seed if seed is None else seed)
    return EvalReport(_rows(None, cfg, seeds, workers), cfg.hash())
