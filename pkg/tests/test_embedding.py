import io

import numpy as np
import pytest

from trajdiff.embedding import (
    EmbedTrainConfig,
    LineEmbedding,
    init_table,
    line_objective,
    normalize_rows,
    read_embedding,
    train_line,
    write_embedding,
)
from trajdiff.errors import FormatError, InputError
from trajdiff.graph import GroupTendencyGraph


def two_cliques():
    weights = {}
    for base in (0, 5):
        for i in range(base, base + 5):
            for j in range(i + 1, base + 5):
                weights[(i, j)] = 1
    return GroupTendencyGraph(weights)


def cluster_cosines(table):
    rows = table[:10] / np.linalg.norm(table[:10], axis=1, keepdims=True)
    cos = rows @ rows.T
    label = np.arange(10) // 5
    same = (label[:, None] == label[None, :]) & ~np.eye(10, dtype=bool)
    return cos[same].mean(), cos[label[:, None] != label[None, :]].mean()


def test_clusters_separate():
    wins = 0
    for seed in range(5):
        intra, inter = cluster_cosines(train_line(two_cliques(), EmbedTrainConfig(dim=16, epochs=200, seed=seed)))
        wins += intra > inter
    assert wins >= 4


def test_single_edge_is_fitted():
    g = GroupTendencyGraph({(0, 1): 1})
    table = train_line(g, EmbedTrainConfig(dim=8, epochs=200, negative=1, seed=0))
    first = table[:, :4]
    assert 1 / (1 + np.exp(-first[0] @ first[1])) > 0.9


def test_zero_epochs_is_initialization():
    cfg = EmbedTrainConfig(dim=8, epochs=0, seed=3)
    table = train_line(two_cliques(), cfg, n_locations=12)
    np.testing.assert_array_equal(table, init_table(12, 8, 3))


def test_null_row_is_zero_and_rows_finite():
    table = train_line(two_cliques(), EmbedTrainConfig(dim=8, epochs=5))
    assert table.shape == (11, 8)
    assert not table[-1].any()
    assert np.isfinite(table).all()


def test_unseen_locations_keep_initialization():
    cfg = EmbedTrainConfig(dim=8, epochs=20, seed=1)
    table = train_line(two_cliques(), cfg, n_locations=14)
    init = init_table(14, 8, 1)
    np.testing.assert_array_equal(table[10:14, :4], init[10:14, :4])
    assert np.abs(table[10:14]).max() <= 0.5 / 8


def test_objectives_improve():
    improved = 0
    for seed in range(5):
        hist = []
        train_line(two_cliques(), EmbedTrainConfig(dim=8, epochs=30, lr=0.01, seed=seed), history=hist)
        first = [h[0] for h in hist]
        second = [h[1] for h in hist]
        improved += first[-1] < first[0] and second[-1] < second[0]
    assert improved >= 4


def test_objective_matches_direct_sum():
    g = GroupTendencyGraph({(0, 1): 2, (1, 2): 1})
    emb = np.random.default_rng(0).normal(size=(4, 3))
    deg = np.array([2, 3, 1.0]) ** 0.75
    p = deg / deg.sum()

    def ls(x):
        return -np.log1p(np.exp(-x))

    expected = 0.0
    total = 2 * sum(g.weights.values())
    for (u, v), w in g.weights.items():
        for a, b in ((u, v), (v, u)):
            neg = sum(p[n] * ls(-emb[a] @ emb[n]) for n in range(3) if n not in (a, b))
            expected += w / total * (ls(emb[a] @ emb[b]) + 5 * neg)
    assert line_objective(g, emb, None, 5) == pytest.approx(-expected, rel=1e-9)


def test_training_is_deterministic():
    cfg = EmbedTrainConfig(dim=8, epochs=10, seed=4)
    np.testing.assert_array_equal(train_line(two_cliques(), cfg), train_line(two_cliques(), cfg))


def test_bad_configs():
    with pytest.raises(InputError):
        EmbedTrainConfig(dim=7)
    with pytest.raises(InputError):
        EmbedTrainConfig(negative=0)
    with pytest.raises(InputError):
        train_line(GroupTendencyGraph({}, frozenset({0})), EmbedTrainConfig(dim=4))


def test_embedding_roundtrip():
    table = train_line(two_cliques(), EmbedTrainConfig(dim=8, epochs=3)).astype(np.float32)
    buf = io.BytesIO()
    write_embedding(table, buf)
    back = read_embedding(io.BytesIO(buf.getvalue()))
    assert back.tobytes() == table.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x09\x00\x00\x00" + b[8:],
    lambda b: b[:10],
    lambda b: b[:-3],
])
def test_corrupted_embedding_rejected(mutate):
    buf = io.BytesIO()
    write_embedding(np.ones((3, 2), dtype=np.float32), buf)
    with pytest.raises(FormatError):
        read_embedding(io.BytesIO(mutate(buf.getvalue())))


def test_estimator_api():
    est = LineEmbedding(dim=8, epochs=5, n_locations=10, seed=0).fit(two_cliques())
    assert est.embedding_.dtype == np.float32
    np.testing.assert_array_equal(est.transform([10]), np.zeros((1, 8)))
    assert est.get_params()["dim"] == 8
    with pytest.raises(InputError):
        est.transform([11])


def test_normalize_rows():
    out = normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])
