import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff.errors import FormatError, InputError
from trajdiff.graph import (
    AliasTable,
    GroupTendencyGraph,
    build_group_graph,
    first_order_proximity,
    read_graph,
    write_graph,
)

from conftest import traj

A, B, C = 0, 1, 2


def brute_force_weights(trajectories):
    """Count every adjacent distinct pair by scanning all slot positions."""
    weights = {}
    for t in trajectories:
        for n in range(len(t.slots) - 1):
            a, b = t.slots[n], t.slots[n + 1]
            if a is None or b is None or a == b:
                continue
            key = tuple(sorted((a, b)))
            weights[key] = weights.get(key, 0) + 1
    return weights


def test_adjacency_rule():
    g = build_group_graph([traj([A, B, A, None, C])])
    assert g.weights == {(A, B): 2}
    assert C in g.vertices


def test_repeated_location_gives_no_edge():
    assert build_group_graph([traj([A, A, A])]).weights == {}


def test_weights_add_across_trajectories():
    g = build_group_graph([traj([A, B]), traj([C, A, B], day=1)])
    assert g.weight(A, B) == 2


def test_empty_and_unusable_input():
    with pytest.raises(InputError):
        build_group_graph([])
    with pytest.raises(InputError):
        build_group_graph([traj([A, None, B])])


def test_first_order_proximity():
    g = GroupTendencyGraph({(A, B): 5}, frozenset({A, B, C}))
    assert first_order_proximity(g, A, A) == 0
    assert first_order_proximity(g, B, A) == 5
    assert first_order_proximity(g, A, C) == 0
    with pytest.raises(InputError):
        first_order_proximity(g, A, 9)


def test_graph_rejects_bad_edges():
    with pytest.raises(InputError):
        GroupTendencyGraph({(2, 1): 1})
    with pytest.raises(InputError):
        GroupTendencyGraph({(1, 2): 0})


slot = st.one_of(st.none(), st.integers(0, 5))
day_slots = st.lists(slot, min_size=6, max_size=6)


@settings(max_examples=100, deadline=None)
@given(st.lists(day_slots, min_size=1, max_size=15))
def test_matches_brute_force(days):
    trajs = [traj(s, user=f"u{i % 5}", day=i // 5) for i, s in enumerate(days)]
    expected = brute_force_weights(trajs)
    if not any(a is not None and b is not None for s in days for a, b in zip(s, s[1:])):
        with pytest.raises(InputError):
            build_group_graph(trajs)
        return
    g = build_group_graph(trajs)
    assert g.weights == expected
    assert g.total_weight == sum(expected.values())
    for u in range(6):
        for v in range(6):
            assert g.weight(u, v) == g.weight(v, u)


def test_neighborhood_and_degrees():
    g = GroupTendencyGraph({(0, 1): 2, (1, 2): 3})
    np.testing.assert_array_equal(g.neighborhood(1), [2, 0, 3])
    assert g.degrees() == {0: 2, 1: 5, 2: 3}
    assert g.degree(1) == 5


def test_single_edge_always_drawn(rng):
    g = GroupTendencyGraph({(3, 7): 4})
    u, v = g.sample_edge(rng, size=50)
    assert set(u) == {3} and set(v) == {7}
    assert g.sample_edge(rng) == (3, 7)


def test_sampling_is_proportional():
    g = GroupTendencyGraph({(0, 1): 1, (1, 2): 3})
    u, _ = g.sample_edge(np.random.default_rng(0), size=100_000)
    assert np.mean(u == 1) == pytest.approx(0.75, abs=0.02)


def test_sampling_is_reproducible():
    g = GroupTendencyGraph({(0, 1): 1, (1, 2): 3, (0, 2): 2})
    a = g.sample_edge(np.random.default_rng(5), size=20)
    b = g.sample_edge(np.random.default_rng(5), size=20)
    np.testing.assert_array_equal(a[0], b[0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=8).filter(lambda w: sum(w) > 0.1))
def test_alias_table_is_exact(weights):
    t = AliasTable(weights)
    n = len(weights)
    mass = np.zeros(n)
    for i in range(n):
        mass[i] += t.prob[i] / n
        mass[t.alias[i]] += (1 - t.prob[i]) / n
    np.testing.assert_allclose(mass, np.array(weights) / sum(weights), atol=1e-12)


def test_alias_rejects_bad_weights():
    for bad in ([], [0, 0], [1, -1], [np.nan]):
        with pytest.raises(InputError):
            AliasTable(bad)


def test_graph_io_roundtrip():
    g = GroupTendencyGraph({(0, 1): 2, (1, 5): 7})
    buf = io.StringIO()
    write_graph(g, buf)
    assert buf.getvalue() == "0\t1\t2\n1\t5\t7\n"
    assert read_graph(buf.getvalue()).weights == g.weights


@pytest.mark.parametrize("bad", ["0\t1\n", "1\t0\t3\n", "0\t1\t0\n", "0\t1\t2\n0\t1\t3\n", "a\tb\tc\n"])
def test_read_graph_rejects_malformed(bad):
    with pytest.raises(FormatError):
        read_graph(bad)
