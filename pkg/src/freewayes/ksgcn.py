"""Forward-only knowledge-sharing GCN policy.

Three GCN stacks (ramp metering, lane-differential speed limits, lane-change
control) each read their own sensor subgraph.  Every stack emits a compact
sharing vector; an agent's action head sees its own flattened GCN output
concatenated with the sharing vectors of the two other agents.

All parameters live in one flat float64 vector (the genome) so that the
evolution-strategies trainer can perturb it directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from scipy.special import expit

from .config import AGENTS, MPH, Config
from .sensor_graph import SensorGraph

N_FEATURES = 2  # speed, occupancy


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class GenomeLayout:
    """Ordered ``(name, shape)`` descriptor mapping a flat genome to named arrays."""

    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]]):
        segments, offset = [], 0
        for name, shape in shapes:
            seg = Segment(name, tuple(shape), offset)
            segments.append(seg)
            offset += seg.size
        self.segments = tuple(segments)
        self.size = offset
        self._by_name = {s.name: s for s in segments}

    def __getitem__(self, name: str) -> Segment:
        return self._by_name[name]

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into ``flat`` (no copy)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != self.size:
            raise ValueError(f"genome must be a vector of length {self.size}, got shape {flat.shape}")
        return {s.name: flat[s.offset:s.offset + s.size].reshape(s.shape) for s in self.segments}

    def flatten(self, params: Mapping[str, np.ndarray]) -> np.ndarray:
        flat = np.empty(self.size, dtype=np.float64)
        for s in self.segments:
            value = np.asarray(params[s.name], dtype=np.float64)
            if value.shape != s.shape:
                raise ValueError(f"{s.name}: expected shape {s.shape}, got {value.shape}")
            flat[s.offset:s.offset + s.size] = value.ravel()
        return flat


class Actions(NamedTuple):
    rm: int
    dvsl: np.ndarray
    lcc: int


# --- building blocks -------------------------------------------------------

def gcn_layer(h: np.ndarray, p: np.ndarray, u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``tanh(p @ h @ u + b)`` with ``b`` broadcast across nodes."""
    if p.shape != (h.shape[0], h.shape[0]) or u.shape[0] != h.shape[1] or b.shape != (u.shape[1],):
        raise ValueError(f"shape mismatch: h{h.shape} p{p.shape} u{u.shape} b{b.shape}")
    return np.tanh(p @ h @ u + b)


def share(h_last: np.ndarray, u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sharing vector ``tanh(u @ vec(h_last) + b)``; ``h_last`` is flattened row-major."""
    h = np.ravel(h_last)
    if u.shape != (b.shape[0], h.size):
        raise ValueError(f"shape mismatch: h{h.shape} u{u.shape} b{b.shape}")
    return np.tanh(u @ h + b)


def concat_features(own: np.ndarray, s_first: np.ndarray, s_second: np.ndarray) -> np.ndarray:
    """Own flattened features followed by the other agents' sharing vectors."""
    if len(s_first) != len(s_second):
        raise ValueError("sharing vectors must have the same length")
    return np.concatenate([np.ravel(own), s_first, s_second])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float) - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def binary_head(z: np.ndarray, u: np.ndarray, b: np.ndarray) -> int:
    """Index of the larger softmax output; exact ties go to index 0.

    Softmax is monotone, so the argmax is taken on the raw logits.
    """
    if u.shape != (2, z.size):
        raise ValueError(f"head expects z of length {u.shape[1]}, got {z.size}")
    return int(np.argmax(u @ z + b))


rm_head = binary_head
lcc_head = binary_head


def dvsl_head(z: np.ndarray, u: np.ndarray, b: np.ndarray, levels: int) -> np.ndarray:
    """Per-lane speed index ``floor((M + 1) * sigmoid(u @ z + b))`` clamped to ``M``."""
    if u.shape[1] != z.size:
        raise ValueError(f"head expects z of length {u.shape[1]}, got {z.size}")
    scaled = (levels + 1) * expit(u @ z + b)
    return np.minimum(np.floor(scaled).astype(np.int64), levels)


def decode_speed_limits(a, levels: int = 13, v_min_mph: float = 10.0, step_mph: float = 5.0,
                        unit: str = "m/s") -> np.ndarray:
    """Speed limits ``v_min + step * a`` per lane, in m/s (or mph with ``unit='mph'``)."""
    a = np.asarray(a)
    if np.any(a < 0) or np.any(a > levels) or np.any(a != np.round(a)):
        raise ValueError(f"speed indices must be integers in [0, {levels}], got {a}")
    mph = v_min_mph + step_mph * a.astype(np.float64)
    if unit == "mph":
        return mph
    return mph * MPH


# --- network ---------------------------------------------------------------

class KSGCN:
    """Knowledge-sharing GCN over the three agents' sensor subgraphs.

    Parameters
    ----------
    propagation : mapping agent -> (N_agent x N_agent) array
        Normalized propagation matrices.
    features : sequence of int
        Output width of each GCN layer.
    sharing_dim : int
        Length ``K`` of every sharing vector.
    dvsl_lanes : int
        Number of lanes under speed-limit control.
    dvsl_levels : int
        Highest speed index ``M``.
    """

    def __init__(self, propagation: Mapping[str, np.ndarray], features=(5, 3), sharing_dim=8,
                 dvsl_lanes=5, dvsl_levels=13, n_inputs=N_FEATURES):
        self.p = {a: np.ascontiguousarray(propagation[a], dtype=np.float64) for a in AGENTS}
        self.nodes = {a: self.p[a].shape[0] for a in AGENTS}
        self.features = tuple(int(f) for f in features)
        self.sharing_dim = int(sharing_dim)
        self.dvsl_lanes = int(dvsl_lanes)
        self.dvsl_levels = int(dvsl_levels)
        self.n_inputs = int(n_inputs)
        self.layout = GenomeLayout(self._shapes())

    @classmethod
    def from_config(cls, cfg: Config, graph: SensorGraph | None = None) -> "KSGCN":
        graph = graph or SensorGraph.from_config(cfg)
        net = cfg.network
        return cls({a: graph.propagation[a].p for a in AGENTS}, net.gcn_features, net.sharing_dim,
                   cfg.geometry.lanes, net.dvsl_levels)

    def head_width(self, agent: str) -> int:
        return self.nodes[agent] * self.features[-1] + 2 * self.sharing_dim

    def _shapes(self):
        shapes = []
        outputs = {"rm": 2, "dvsl": self.dvsl_lanes, "lcc": 2}
        for a in AGENTS:
            f_in = self.n_inputs
            for layer, f_out in enumerate(self.features):
                shapes += [(f"{a}.gcn{layer}.u", (f_in, f_out)), (f"{a}.gcn{layer}.b", (f_out,))]
                f_in = f_out
            flat = self.nodes[a] * self.features[-1]
            shapes += [(f"{a}.share.u", (self.sharing_dim, flat)), (f"{a}.share.b", (self.sharing_dim,))]
            shapes += [(f"{a}.head.u", (outputs[a], self.head_width(a))), (f"{a}.head.b", (outputs[a],))]
        return shapes

    @property
    def genome_size(self) -> int:
        return self.layout.size

    def init_genome(self, seed: int | np.random.Generator = 0) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for s in self.layout.segments:
            if s.name.endswith(".b"):
                params[s.name] = np.zeros(s.shape)
            else:
                fan = s.shape[0] + s.shape[1]
                limit = np.sqrt(6.0 / fan)
                params[s.name] = rng.uniform(-limit, limit, size=s.shape)
        return self.layout.flatten(params)

    def encode(self, genome: np.ndarray, states: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Final GCN output of every agent, flattened."""
        return self._encode(self.layout.unflatten(genome), states)

    def _encode(self, prm, states):
        out = {}
        for a in AGENTS:
            h = np.asarray(states[a], dtype=np.float64)
            if h.shape != (self.nodes[a], self.n_inputs):
                raise ValueError(f"{a} state must have shape {(self.nodes[a], self.n_inputs)}, got {h.shape}")
            for layer in range(len(self.features)):
                h = gcn_layer(h, self.p[a], prm[f"{a}.gcn{layer}.u"], prm[f"{a}.gcn{layer}.b"])
            out[a] = h.ravel()
        return out

    def forward(self, genome: np.ndarray, states: Mapping[str, np.ndarray],
                return_features: bool = False):
        """Compute all three actions from the agents' state tensors.

        Returns :class:`Actions`; with ``return_features`` also a dict holding
        the flattened GCN outputs ``h``, sharing vectors ``s`` and head inputs ``z``.
        """
        prm = self.layout.unflatten(genome)
        h = self._encode(prm, states)
        s = {a: share(h[a], prm[f"{a}.share.u"], prm[f"{a}.share.b"]) for a in AGENTS}
        z = {}
        for a in AGENTS:
            first, second = (o for o in AGENTS if o != a)
            z[a] = concat_features(h[a], s[first], s[second])
        actions = Actions(
            rm=rm_head(z["rm"], prm["rm.head.u"], prm["rm.head.b"]),
            dvsl=dvsl_head(z["dvsl"], prm["dvsl.head.u"], prm["dvsl.head.b"], self.dvsl_levels),
            lcc=lcc_head(z["lcc"], prm["lcc.head.u"], prm["lcc.head.b"]),
        )
        if return_features:
            return actions, {"h": h, "s": s, "z": z}
        return actions

    def constant_genome(self, rm: int, dvsl_index: int, lcc: int) -> np.ndarray:
        """Genome whose heads ignore the inputs and always emit the given actions."""
        params = {s.name: np.zeros(s.shape) for s in self.layout.segments}
        params["rm.head.b"] = np.array([0.0, 1.0]) if rm else np.array([1.0, 0.0])
        params["lcc.head.b"] = np.array([0.0, 1.0]) if lcc else np.array([1.0, 0.0])
        # aim at the middle of the sigmoid interval that floors to dvsl_index
        frac = (dvsl_index + 0.5) / (self.dvsl_levels + 1)
        params["dvsl.head.b"] = np.full(self.dvsl_lanes, np.log(frac / (1.0 - frac)))
        return self.layout.flatten(params)
