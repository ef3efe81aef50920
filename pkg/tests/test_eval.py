import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff.core import Grid, MaskSet, Trajectory
from trajdiff.errors import InputError
from trajdiff.evaluation import (
    HistoryBaseline,
    LinearBaseline,
    RecoveryCase,
    RecoveryOutput,
    TopBaseline,
    distance_metric,
    make_report,
    map_metric,
    mean_displacement,
    read_report,
    recall,
)

G5 = Grid(5, 5, cell_side_m=515.0)
T = "T"


def output(rankings):
    out = RecoveryOutput()
    for key, r in rankings.items():
        out.add(key, r)
    return out


def keys(n):
    return [("u", 0, k) for k in range(n)]


def test_recall_examples():
    truth = dict(zip(keys(8), range(8)))
    assert recall(output({k: [v] for k, v in truth.items()}), truth) == 1.0
    assert recall(output({k: [v + 1] for k, v in truth.items()}), truth) == 0.0
    mixed = {k: [v if i < 3 else 20] for i, (k, v) in enumerate(truth.items())}
    assert recall(output(mixed), truth) == 0.375
    with pytest.raises(InputError):
        recall(output({}), truth)


def test_recall_top_k():
    truth = {("u", 0, 0): 2}
    assert recall(output({("u", 0, 0): [1, 2]}), truth, k=2) == 1.0


def test_map_examples():
    truth = {("u", 0, 0): 4, ("u", 0, 1): 4}
    assert map_metric(output({("u", 0, 0): [4], ("u", 0, 1): [4]}), truth) == 1.0
    assert map_metric(output({("u", 0, 0): [4, 1], ("u", 0, 1): [1, 4]}), truth) == 0.75
    assert map_metric(output({("u", 0, 0): [1], ("u", 0, 1): [2]}), truth) == 0.0


def test_distance_examples():
    truth = {("u", 0, 0): 0, ("u", 0, 1): 6}
    assert distance_metric(output({("u", 0, 0): [0], ("u", 0, 1): [6]}), truth, G5) == 0.0
    assert distance_metric(output({("u", 0, 0): [1], ("u", 0, 1): [7]}), truth, G5) == pytest.approx(515.0)
    assert distance_metric(output({("u", 0, 0): [0], ("u", 0, 1): [5]}), truth, G5) == pytest.approx(257.5)


def test_ranking_rejects_duplicates():
    with pytest.raises(InputError):
        output({("u", 0, 0): [1, 1]})


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 24), st.permutations(list(range(6)))), min_size=1, max_size=20))
def test_map_dominates_recall(rows):
    truth, ranks = {}, {}
    for i, (loc, perm) in enumerate(rows):
        truth[("u", 0, i)] = loc % 6
        ranks[("u", 0, i)] = perm
    rep = make_report(output(ranks), truth, G5)
    assert 0 <= rep.recall <= rep.map <= 1
    assert rep.distance_m >= 0
    assert (rep.distance_m == 0) == (rep.recall == 1)


def test_report_roundtrip():
    truth = {("u", 0, 0): 0, ("u", 0, 1): 6}
    rep = make_report(output({("u", 0, 0): [0, 1], ("u", 0, 1): [5, 6]}), truth, G5)
    rep.by_ratio[0.4] = rep
    buf = io.StringIO()
    rep.write(buf, {"seed": 3})
    back = read_report(buf.getvalue())
    assert back == {"recall": 0.5, "map": 0.75, "distance_m": pytest.approx(257.5), "n_targets": 2}
    assert "[missing_ratio]" in buf.getvalue()


def case(labels_and_slots, history=(), user="u", day=9):
    slots = tuple(None if s in (None, "-") else s for s, _ in labels_and_slots)
    labels = "".join(lab for _, lab in labels_and_slots)
    return RecoveryCase(Trajectory(user, day, slots), MaskSet(labels), list(history))


def rc(row, col, grid=G5):
    return row * grid.cols + col


def O(s):
    return (s, "O")


def Tg(s):
    return (s, "T")


M = (None, "M")

# (name, case, {slot: expected top-1})
LINEAR_FIXTURES = [
    ("constant", case([O(7)] + [M] * 4 + [Tg(7)] + [M] * 4 + [O(7)]), {5: 7}),
    ("midpoint", case([O(rc(0, 0)), M, Tg(rc(0, 2)), M, O(rc(0, 4))]), {2: rc(0, 2)}),
    ("clamp before", case([Tg(3), M, O(rc(2, 2)), O(rc(2, 3))]), {0: rc(2, 2)}),
    ("clamp after", case([O(rc(1, 1)), O(rc(4, 4)), Tg(2), Tg(0)]), {2: rc(4, 4), 3: rc(4, 4)}),
    ("diagonal", case([O(rc(0, 0)), Tg(0), Tg(0), Tg(0), O(rc(4, 4))]), {1: rc(1, 1), 2: rc(2, 2), 3: rc(3, 3)}),
    ("round half up", case([O(rc(0, 0)), Tg(0), O(rc(0, 1))]), {1: rc(0, 1)}),
    ("round down", case([O(rc(0, 0)), Tg(0), M, O(rc(0, 1))]), {1: rc(0, 0)}),
    ("vertical", case([O(rc(4, 2)), Tg(0), Tg(0), Tg(0), O(rc(0, 2))]), {1: rc(3, 2), 2: rc(2, 2), 3: rc(1, 2)}),
    ("nearest neighbours only", case([O(rc(0, 0)), O(rc(4, 0)), Tg(0), O(rc(4, 4)), O(rc(0, 0))]), {2: rc(4, 2)}),
    ("single observation", case([Tg(0), O(12), Tg(0)]), {0: 12, 2: 12}),
]


@pytest.mark.parametrize("name, c, expected", LINEAR_FIXTURES, ids=[f[0] for f in LINEAR_FIXTURES])
def test_linear_fixtures(name, c, expected):
    out = LinearBaseline(G5).fit().predict([c])
    assert {k[2]: out.top1(k) for k in out.rankings} == expected


def test_linear_ranking_orders_by_distance():
    out = LinearBaseline(G5).fit().predict([case([O(rc(2, 2)), Tg(0)])])
    r = list(out.rankings[("u", 9, 1)])
    assert r[:5] == [rc(2, 2), rc(1, 2), rc(2, 1), rc(2, 3), rc(3, 2)]
    assert sorted(r) == list(range(25))


def test_linear_needs_an_observation():
    with pytest.raises(InputError):
        LinearBaseline(G5).fit().predict([case([Tg(1), M])])


def day(slots, d):
    return Trajectory("u", d, tuple(slots))


HISTORY_FIXTURES = [
    ("modal", [day([1, 0], 0), day([1, 0], 1), day([2, 0], 2)], {0: 1}),
    ("recency tie", [day([4, 0], 0), day([3, 0], 1)], {0: 3}),
    ("recency tie other order", [day([3, 0], 0), day([4, 0], 1)], {0: 4}),
    ("empty slot falls back to global mode", [day([None, 5], 0), day([None, 5], 1), day([None, 6], 2)], {0: 5}),
    ("global tie goes to recent", [day([None, 5], 0), day([None, 6], 1)], {0: 6}),
    ("single day", [day([8, 9], 0)], {0: 8, 1: 9}),
    ("count beats recency", [day([2, 0], 0), day([2, 0], 1), day([7, 0], 2)], {0: 2}),
    ("per slot", [day([1, 2], 0), day([1, 2], 1)], {0: 1, 1: 2}),
    ("nulls ignored", [day([None, 0], 0), day([None, 0], 1), day([3, 0], 2)], {0: 3}),
    ("three-way tie", [day([1, 0], 0), day([2, 0], 1), day([3, 0], 2)], {0: 3}),
]


@pytest.mark.parametrize("name, hist, expected", HISTORY_FIXTURES, ids=[f[0] for f in HISTORY_FIXTURES])
def test_history_fixtures(name, hist, expected):
    labels = [Tg(0) if n in expected else O(0) for n in range(2)]
    out = HistoryBaseline().fit().predict([case(labels, hist)])
    assert {k[2]: out.top1(k) for k in out.rankings} == expected


def test_history_ranking_and_errors():
    hist = [day([1, 3], 0), day([1, 3], 1), day([2, 3], 2)]
    out = HistoryBaseline().fit().predict([case([Tg(0), O(3)], hist)])
    assert list(out.rankings[("u", 9, 0)]) == [1, 2, 3]
    with pytest.raises(InputError):
        HistoryBaseline().fit().predict([case([Tg(0), O(3)], [])])
    with pytest.raises(InputError):
        HistoryBaseline().fit().predict([case([Tg(0), O(3)], [day([None, None], 0)])])


def train_days(user, *days):
    return [Trajectory(user, d, tuple(s)) for d, s in enumerate(days)]


TOP_FIXTURES = [
    ("dominant", train_days("u", [0] * 30 + [1] * 5), "u", [0, 1]),
    ("tie to smaller id", train_days("u", [4, 2, 4, 2]), "u", [2, 4]),
    ("new user uses global", train_days("a", [3, 3]) + train_days("b", [3, 5]), "z", [3, 5]),
    ("nulls ignored", train_days("u", [None, None, 7]), "u", [7]),
    ("counts across days", train_days("u", [1, 2], [2, 3]), "u", [2, 1, 3]),
    ("per user, not global", train_days("u", [9]) + train_days("v", [1, 1, 1]), "u", [9]),
    ("global tie", train_days("a", [6]) + train_days("b", [5]), "z", [5, 6]),
    ("many locations", train_days("u", [3, 1, 2, 3, 1, 3]), "u", [3, 1, 2]),
    ("other user", train_days("u", [9]) + train_days("v", [1, 1, 2]), "v", [1, 2]),
    ("single visit", train_days("u", [None] * 47 + [11]), "u", [11]),
]


@pytest.mark.parametrize("name, train, user, expected", TOP_FIXTURES, ids=[f[0] for f in TOP_FIXTURES])
def test_top_fixtures(name, train, user, expected):
    model = TopBaseline().fit(train)
    out = model.predict([case([O(0), Tg(1), Tg(2)], user=user)])
    for key in out.rankings:
        assert list(out.rankings[key]) == expected


def test_top_needs_training_data():
    with pytest.raises(InputError):
        TopBaseline().fit([])


def test_metrics_ignore_order():
    truth = {("u", 0, k): k for k in range(5)}
    ranks = {("u", 0, k): [(k + i) % 5 for i in range(5)] for k in range(5)}
    rev = dict(reversed(list(ranks.items())))
    assert map_metric(output(ranks), truth) == map_metric(output(rev), dict(reversed(list(truth.items()))))


def test_mean_displacement():
    trajs = [Trajectory("u", 0, (0, 1, None, 1)), Trajectory("u", 1, (5, 5))]
    assert mean_displacement(trajs, G5) == pytest.approx(515.0 / 2)
    assert mean_displacement([], G5) == 0.0
