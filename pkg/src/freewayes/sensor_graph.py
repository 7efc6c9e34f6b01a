"""Weighted sensor graph and the normalized propagation matrices used by the GCN stacks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import AGENTS, Config

SAME_SECTION_WEIGHT = 0.9
DISTANCE_SCALE = 10.0  # meters


@dataclass(frozen=True)
class SensorNode:
    id: int
    location: float
    section_id: str
    lane: int = 0


@dataclass(frozen=True)
class SimilarityMatrix:
    """Dense symmetric similarity weights over the nodes listed in ``ids``."""

    ids: tuple[int, ...]
    w: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PropagationMatrix:
    ids: tuple[int, ...]
    p: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)


def build_similarity(nodes: Sequence[SensorNode]) -> SimilarityMatrix:
    """Pairwise sensor similarity.

    Nodes in the same section get 0.9, nodes in different sections decay as
    ``exp(-|d| / 10)`` with their distance ``d`` in meters, and the diagonal is 1.
    """
    if not nodes:
        raise ValueError("at least one sensor node is required")
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate sensor ids in {ids}")
    loc = np.array([n.location for n in nodes], dtype=float)
    if np.any(loc < 0):
        raise ValueError("sensor locations must be non-negative")
    section = np.array([n.section_id for n in nodes], dtype=object)

    w = np.exp(-np.abs(loc[:, None] - loc[None, :]) / DISTANCE_SCALE)
    w[section[:, None] == section[None, :]] = SAME_SECTION_WEIGHT
    np.fill_diagonal(w, 1.0)
    w.setflags(write=False)
    return SimilarityMatrix(tuple(ids), w)


def restrict(sim: SimilarityMatrix, ids: Iterable[int]) -> SimilarityMatrix:
    """Principal submatrix over ``ids``, kept in the order given."""
    ids = tuple(int(i) for i in ids)
    index = {node: k for k, node in enumerate(sim.ids)}
    missing = [i for i in ids if i not in index]
    if missing:
        raise KeyError(f"unknown sensor ids {missing}")
    rows = [index[i] for i in ids]
    sub = sim.w[np.ix_(rows, rows)].copy()
    sub.setflags(write=False)
    return SimilarityMatrix(ids, sub)


def normalize(sim: SimilarityMatrix) -> PropagationMatrix:
    """Symmetric normalization ``D^-1/2 (W + I) D^-1/2`` with ``D`` the row sums of ``W + I``.

    The identity is added even though ``W`` already carries a unit diagonal.
    """
    w_bar = sim.w + np.eye(sim.n)
    d_inv_sqrt = 1.0 / np.sqrt(w_bar.sum(axis=1))
    p = d_inv_sqrt[:, None] * w_bar * d_inv_sqrt[None, :]
    p.setflags(write=False)
    return PropagationMatrix(sim.ids, p)


class SensorGraph:
    """Full sensor graph plus the per-agent restricted propagation matrices."""

    def __init__(self, nodes: Sequence[SensorNode], agent_ids: dict[str, Sequence[int]]):
        self.nodes = tuple(nodes)
        self.similarity = build_similarity(self.nodes)
        self.agent_ids = {a: tuple(agent_ids[a]) for a in AGENTS}
        self.propagation = {
            a: normalize(restrict(self.similarity, ids)) for a, ids in self.agent_ids.items()
        }

    @classmethod
    def from_config(cls, cfg: Config) -> "SensorGraph":
        nodes = [SensorNode(s.id, s.location, s.section, s.lane) for s in cfg.sensors]
        return cls(nodes, cfg.agents)

    def node_count(self, agent: str) -> int:
        return len(self.agent_ids[agent])
