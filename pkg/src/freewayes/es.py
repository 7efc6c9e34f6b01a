"""Evolution strategies with novelty-seeking exploration under stochastic demand.

Every generation samples one demand realization, evaluates the unperturbed
genome and ``n`` Gaussian perturbations of it on that same demand, and moves
the genome along the score-weighted noise directions.  Scores mix shaped
outflow and shaped novelty, where novelty is the distance of a perturbed
policy's behavior vector from the unperturbed policy's.

All randomness is counter-based: demand and noise seeds are derived from
``(master_seed, generation, worker, attempt)``, so a run can resume from any
generation boundary and reproduce the uninterrupted run bit for bit.
"""
from __future__ import annotations

import csv
import hashlib
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .config import Config

SHAPINGS = ("raw", "centered", "mean-centered", "centered-rank")

# stream tags keep demand and noise seeds apart
_DEMAND_TAG = 0x44454D
_NOISE_TAG = 0x4E4F49


class TrainingError(RuntimeError):
    """A generation failed twice in a row."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupted or of an unknown format."""


# --- seeds and noise ---------------------------------------------------------------

_MASK = (1 << 64) - 1


def _mix(x: int) -> int:
    """splitmix64 finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _derive(*words: int) -> int:
    h = 0
    for w in words:
        h = _mix(h ^ (int(w) & _MASK))
    return h


def demand_seed(master_seed: int, generation: int) -> int:
    """Demand seed shared by every worker of one generation (32 bits)."""
    return _derive(_DEMAND_TAG, master_seed, generation) >> 32


def worker_seed(master_seed: int, generation: int, worker: int, attempt: int = 0) -> int:
    """64-bit noise key of one worker."""
    return _derive(_NOISE_TAG, master_seed, generation, worker, attempt)


_PHILOX = np.random.Philox(key=0)
_GEN = np.random.Generator(_PHILOX)


def noise(seed: int, size: int) -> np.ndarray:
    """Standard normal vector reproducible from ``seed`` alone.

    The seed keys a counter-based Philox stream started at counter 0, so no
    state beyond the seed is needed.
    """
    _PHILOX.state = {
        "bit_generator": "Philox",
        "state": {"counter": np.zeros(4, np.uint64),
                  "key": np.array([int(seed) & _MASK, _NOISE_TAG], np.uint64)},
        "buffer": np.zeros(4, np.uint64), "buffer_pos": 4, "has_uint32": 0, "uinteger": 0,
    }
    return _GEN.standard_normal(size)


def perturb(genome: np.ndarray, sigma: float, seed: int, sign: float = 1.0):
    """Return ``(genome + sign * sigma * eps, eps)`` with ``eps`` drawn from ``seed``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    eps = noise(seed, len(genome))
    if sign < 0:
        eps = -eps
    return genome + sigma * eps, eps


def worker_noise_plan(master_seed: int, generation: int, n: int, attempt: int = 0,
                      antithetic: bool = False) -> list[tuple[int, float]]:
    """``(seed, sign)`` per worker; antithetic pairs share a seed with opposite signs.

    Equivalent to calling :func:`worker_seed` per worker, with the common
    prefix of the hash folded once.
    """
    base = _derive(_NOISE_TAG, master_seed, generation)
    a = int(attempt) & _MASK
    if not antithetic:
        return [(_mix(_mix(base ^ j) ^ a), 1.0) for j in range(n)]
    return [(_mix(_mix(base ^ (j // 2)) ^ a), 1.0 if j % 2 == 0 else -1.0) for j in range(n)]


# --- scores and update ---------------------------------------------------------------

def novelty(b: np.ndarray, b0: np.ndarray) -> float:
    """Euclidean distance between two behavior vectors."""
    return float(np.linalg.norm(np.asarray(b, dtype=float) - np.asarray(b0, dtype=float)))


def shape(values: Sequence[float], mode: str = "mean-centered") -> np.ndarray:
    """Fitness shaping applied across workers.

    ``raw`` leaves values untouched, ``centered`` subtracts the mean,
    ``mean-centered`` subtracts the mean and divides by the standard deviation
    (all zeros when the spread is below 1e-9), ``centered-rank`` maps ranks
    linearly onto ``[-0.5, 0.5]``.

    Centering is computed as ``n * x - sum(x)`` so that adding a constant to
    integer-valued scores leaves the result bit-identical.
    """
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    if mode == "raw":
        return x.copy()
    if mode == "centered-rank":
        if n == 1:
            return np.zeros(1)
        ranks = np.empty(n)
        ranks[np.argsort(x, kind="stable")] = np.arange(n)
        return ranks / (n - 1) - 0.5
    d = n * x - np.sum(x)
    if mode == "centered":
        return d / n
    if mode == "mean-centered":
        std = np.std(d) / n
        if std < 1e-9:
            return np.zeros(n)
        return d / np.std(d)
    raise ValueError(f"unknown shaping '{mode}'")


def combine(F: Sequence[float], N: Sequence[float], w: float, mode: str) -> np.ndarray:
    """Mixed score ``(1 - w) * shape(F) + w * shape(N)``."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {w}")
    if len(F) != len(N):
        raise ValueError("F and N must have one entry per worker")
    return (1.0 - w) * shape(F, mode) + w * shape(N, mode)


def update(genome: np.ndarray, scores: Sequence[float], eps: Sequence[np.ndarray],
           sigma: float, learning_rate: float) -> np.ndarray:
    """``genome + lr / (n * sigma) * sum_j score_j * eps_j``, summed in worker order."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0 or len(eps) != n:
        raise ValueError(f"need one noise vector per score, got {len(eps)} for {n}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    total = np.zeros_like(genome, dtype=np.float64)
    for s, e in zip(scores, eps):
        total += s * e
    step = learning_rate / (n * sigma) * total
    bound = learning_rate / sigma * np.max(np.abs(scores)) * max(np.linalg.norm(e) for e in eps)
    norm = np.linalg.norm(step)
    if not np.isfinite(norm) or norm > bound * (1 + 1e-12) + 1e-300:
        raise FloatingPointError(f"update step norm {norm} exceeds its bound {bound}")
    return genome + step


def update_from_results(genome: np.ndarray, F: Sequence[float], N: Sequence[float],
                        plan: Sequence[tuple[int, float]], es_cfg, w: float) -> np.ndarray:
    """Full update from per-worker outflow, novelty and noise plan (eps rebuilt from seeds)."""
    if len(F) != len(plan) or len(N) != len(plan):
        raise ValueError(f"missing worker results: {len(F)} F, {len(N)} N for {len(plan)} workers")
    scores = combine(F, N, w, es_cfg.shaping)
    eps = [noise(seed, len(genome)) * sign for seed, sign in plan]
    return update(genome, scores, eps, es_cfg.sigma, es_cfg.learning_rate)


def next_w(w: float, es_cfg) -> float:
    return max(es_cfg.w_min, w * es_cfg.w_decay)


# --- evaluation --------------------------------------------------------------------

class EpisodeEvaluator:
    """Picklable ``(genome, demand_seed) -> (F, b)`` running one simulator episode."""

    def __init__(self, cfg: Config):
        self.cfg = cfg

    def __call__(self, genome: np.ndarray, demand_seed: int):
        from .control_loop import run_episode
        r = run_episode(genome, int(demand_seed), self.cfg)
        return float(r.F), r.b


def _evaluate_task(args):
    evaluator, genome, sigma, seed, sign, dseed = args
    if seed is None:
        candidate = genome
    else:
        candidate, _ = perturb(genome, sigma, seed, sign)
    F, b = evaluator(candidate, dseed)
    return F, np.asarray(b, dtype=np.float64)


@dataclass
class GenerationRecord:
    generation: int
    demand_seed: int
    w: float
    F: np.ndarray
    N: np.ndarray
    scores: np.ndarray
    F_unperturbed: float
    b_unperturbed: np.ndarray
    attempt: int = 0
    wall_ms: float = field(default=0.0, compare=False)

    def summary(self) -> dict:
        return {
            "generation": self.generation, "demand_seed": self.demand_seed, "w": self.w,
            "F_unperturbed": self.F_unperturbed, "max_F": float(np.max(self.F)),
            "mean_F": float(np.mean(self.F)), "mean_N": float(np.mean(self.N)),
            "wall_ms": self.wall_ms,
        }

    def same_outcome(self, other: "GenerationRecord") -> bool:
        """Equality of everything except wall time."""
        return (self.generation == other.generation and self.demand_seed == other.demand_seed
                and self.w == other.w and self.attempt == other.attempt
                and self.F_unperturbed == other.F_unperturbed
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("F", "N", "scores", "b_unperturbed")))


LOG_COLUMNS = ["generation", "demand_seed", "w", "F_unperturbed", "max_F", "mean_F", "mean_N", "wall_ms"]


class ESTrainer:
    """Generation loop of the novelty-mixed evolution strategy.

    Parameters
    ----------
    cfg : Config
        ``cfg.es`` holds the hyperparameters.
    genome : ndarray
        Starting parameters.
    evaluate : callable, optional
        ``(genome, demand_seed) -> (F, b)``; defaults to a simulator episode.
        Must be picklable when ``jobs > 1``.
    jobs : int, optional
        Worker processes; results are always reduced in worker order.
    """

    def __init__(self, cfg: Config, genome: np.ndarray, evaluate: Callable | None = None,
                 jobs: int | None = None, generation: int = 0, w: float | None = None):
        self.cfg = cfg
        self.es = cfg.es
        self.genome = np.array(genome, dtype=np.float64)
        self.evaluate = evaluate or EpisodeEvaluator(cfg)
        self.jobs = int(jobs if jobs is not None else self.es.jobs)
        self.generation = int(generation)
        self.w = float(self.es.w0 if w is None else w)
        self.master_seed = int(self.es.master_seed)
        self._pool = None

    # -- lifecycle
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map(self, tasks):
        if self.jobs <= 1:
            return [_evaluate_task(t) for t in tasks]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.jobs)
        return list(self._pool.map(_evaluate_task, tasks))

    # -- one generation
    def _attempt(self, attempt: int) -> GenerationRecord:
        t_start = time.perf_counter()
        g = self.generation
        dseed = demand_seed(self.master_seed, g)
        plan = worker_noise_plan(self.master_seed, g, self.es.workers, attempt, self.es.antithetic)
        tasks = [(self.evaluate, self.genome, self.es.sigma, None, 1.0, dseed)]
        tasks += [(self.evaluate, self.genome, self.es.sigma, seed, sign, dseed) for seed, sign in plan]
        results = self._map(tasks)
        F0, b0 = results[0]
        if novelty(b0, b0) != 0.0:
            raise AssertionError("the unperturbed policy must have zero novelty")
        F = np.array([r[0] for r in results[1:]], dtype=np.float64)
        N = np.array([novelty(r[1], b0) for r in results[1:]])
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(N))):
            raise FloatingPointError("non-finite worker result")
        scores = combine(F, N, self.w, self.es.shaping)
        new = update_from_results(self.genome, F, N, plan, self.es, self.w)
        rec = GenerationRecord(g, dseed, self.w, F, N, scores, float(F0), np.asarray(b0), attempt,
                               (time.perf_counter() - t_start) * 1e3)
        self.genome = new
        self.w = next_w(self.w, self.es)
        self.generation += 1
        return rec

    def step(self) -> GenerationRecord:
        """Run one generation; a failed generation is retried once with fresh noise seeds."""
        try:
            return self._attempt(0)
        except Exception as first:  # noqa: BLE001 - any worker failure triggers the retry
            try:
                return self._attempt(1)
            except Exception as second:  # noqa: BLE001
                raise TrainingError(f"generation {self.generation} failed twice: {second!r}") from first

    def run(self, generations: int, checkpoint: str | Path | None = None,
            log: str | Path | None = None) -> Iterator[GenerationRecord]:
        """Yield one record per generation; checkpoints every ``checkpoint_every`` and at the end."""
        every = max(1, int(self.es.checkpoint_every))
        writer = GenerationLog(log, self.cfg) if log else None
        try:
            for k in range(int(generations)):
                rec = self.step()
                if writer:
                    writer.append(rec)
                if checkpoint and ((k + 1) % every == 0 or k + 1 == generations):
                    save_checkpoint(checkpoint, self)
                yield rec
        finally:
            self.close()

    @classmethod
    def from_checkpoint(cls, cfg: Config, path: str | Path, evaluate: Callable | None = None,
                        jobs: int | None = None) -> "ESTrainer":
        ck = load_checkpoint(path)
        if ck.master_seed != cfg.es.master_seed:
            cfg = cfg.replace(es={"master_seed": ck.master_seed})
        return cls(cfg, ck.genome, evaluate, jobs, ck.generation, ck.w)


class GenerationLog:
    """Append-only per-generation CSV."""

    def __init__(self, path: str | Path, cfg: Config):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                fh.write(f"# config_hash={cfg.hash()}\n")
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, rec: GenerationRecord) -> None:
        row = rec.summary()
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[c] if not isinstance(row[c], float) else repr(row[c])
                                     for c in LOG_COLUMNS])


# --- checkpoints ---------------------------------------------------------------------

_MAGIC = b"FWESCKPT"
_VERSION = 1
# magic, version, genome length, generation, w, master seed, config hash
_HEADER = struct.Struct("<8sIQQdq16s")


@dataclass(frozen=True)
class Checkpoint:
    genome: np.ndarray
    generation: int
    w: float
    master_seed: int
    config_hash: str


def save_checkpoint(path: str | Path, trainer: ESTrainer) -> None:
    """Write genome, generation counter, w and the seed stream state with a sha256 trailer.

    The noise and demand streams are counter-based, so ``(master_seed,
    generation)`` is the complete random state.
    """
    header = _HEADER.pack(_MAGIC, _VERSION, len(trainer.genome), trainer.generation, trainer.w,
                          trainer.master_seed, trainer.cfg.hash().encode("ascii")[:16].ljust(16, b"\0"))
    body = header + trainer.genome.astype("<f8").tobytes()
    payload = body + hashlib.sha256(body).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    magic, version, length, generation, w, master, chash = _HEADER.unpack_from(body)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(body) != _HEADER.size + 8 * length:
        raise CheckpointError(f"{path}: genome length {length} does not match the file size")
    genome = np.frombuffer(body, dtype="<f8", offset=_HEADER.size, count=length).astype(np.float64)
    return Checkpoint(genome, int(generation), float(w), int(master), chash.rstrip(b"\0").decode("ascii"))
