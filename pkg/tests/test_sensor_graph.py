import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from freewayes.sensor_graph import SensorGraph, SensorNode, build_similarity, normalize, restrict

# frozen from oracles.normalized_adjacency([[1, .9], [.9, 1]])
NORM_2X2_DIAG = 0.6896551724137931
NORM_2X2_OFF = 0.3103448275862069


def test_same_section_weight():
    w = build_similarity([SensorNode(0, 10.0, "a"), SensorNode(1, 200.0, "a")]).w
    assert w[0, 1] == w[1, 0] == 0.9


def test_self_weight_is_one():
    w = build_similarity([SensorNode(0, 10.0, "a"), SensorNode(1, 20.0, "b")]).w
    assert w[0, 0] == w[1, 1] == 1.0


def test_cross_section_decay_at_ten_meters():
    w = build_similarity([SensorNode(0, 10.0, "a"), SensorNode(1, 20.0, "b")]).w
    assert w[0, 1] == pytest.approx(0.36787944117144233, abs=1e-12)


def test_restrict_picks_submatrix():
    nodes = [SensorNode(0, 0.0, "a"), SensorNode(1, 5.0, "b"), SensorNode(2, 40.0, "c")]
    sim = build_similarity(nodes)
    sub = restrict(sim, [0, 2])
    ref = oracles.similarity([0.0, 40.0], ["a", "c"])
    assert sub.ids == (0, 2)
    np.testing.assert_allclose(sub.w, ref, atol=1e-15)


def test_restrict_identity_and_single():
    sim = build_similarity([SensorNode(0, 0.0, "a"), SensorNode(1, 5.0, "b")])
    assert np.array_equal(restrict(sim, [0, 1]).w, sim.w)
    assert restrict(sim, [1]).w.tolist() == [[1.0]]
    with pytest.raises(KeyError):
        restrict(sim, [7])


def test_normalize_two_node_same_section():
    p = normalize(build_similarity([SensorNode(0, 0.0, "s"), SensorNode(1, 50.0, "s")])).p
    np.testing.assert_allclose(p, [[NORM_2X2_DIAG, NORM_2X2_OFF], [NORM_2X2_OFF, NORM_2X2_DIAG]],
                               atol=1e-12)


def test_normalize_degenerate_cases():
    single = normalize(build_similarity([SensorNode(0, 0.0, "s")])).p
    np.testing.assert_allclose(single, [[1.0]], atol=1e-15)
    sim = build_similarity([SensorNode(0, 0.0, "a"), SensorNode(1, 1e4, "b")])
    np.testing.assert_allclose(normalize(sim).p, np.eye(2), atol=1e-12)


def test_invalid_nodes():
    with pytest.raises(ValueError):
        build_similarity([])
    with pytest.raises(ValueError):
        build_similarity([SensorNode(0, 0.0, "a"), SensorNode(0, 1.0, "a")])
    with pytest.raises(ValueError):
        build_similarity([SensorNode(0, -1.0, "a")])


def test_default_layout_shapes(cfg):
    g = SensorGraph.from_config(cfg)
    assert {a: g.node_count(a) for a in ("rm", "dvsl", "lcc")} == {"rm": 8, "dvsl": 22, "lcc": 12}


nodes_strategy = st.lists(
    st.tuples(st.floats(0, 900, allow_nan=False), st.sampled_from(["a", "b", "c"])),
    min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(nodes_strategy)
def test_similarity_and_propagation_match_oracle(spec):
    nodes = [SensorNode(k, loc, sec) for k, (loc, sec) in enumerate(spec)]
    sim = build_similarity(nodes)
    ref = oracles.similarity([n.location for n in nodes], [n.section_id for n in nodes])
    np.testing.assert_allclose(sim.w, ref, atol=1e-15)
    p = normalize(sim).p
    np.testing.assert_allclose(p, oracles.normalized_adjacency(ref), atol=1e-12)
    # symmetric, weights in (0, 1]
    assert np.array_equal(sim.w, sim.w.T)
    assert np.all(sim.w > 0) and np.all(sim.w <= 1)
    np.testing.assert_allclose(p, p.T, atol=1e-15)
    # spectral radius of the normalized matrix is 1 for a positive matrix
    assert max(abs(np.linalg.eigvalsh(p))) == pytest.approx(1.0, abs=1e-9)
    assert math.isfinite(p.sum())
