import io

import numpy as np
import pytest
from sklearn.base import clone

from trajdiff import TrajectoryRecoverer, cases_from_dataset
from trajdiff.errors import InputError
from trajdiff.ingest import SynthConfig, generate_synthetic, mask_dataset, split_chronological
from trajdiff.train import load_checkpoint, save_checkpoint

SMALL = dict(dim=8, heads=2, layers=1, hidden=8, blocks=1, steps=5, epochs=2, line_epochs=5)


@pytest.fixture(scope="module")
def ds():
    raw = generate_synthetic(SynthConfig(n_users=4, n_days=10, seed=5))
    return mask_dataset(split_chronological(raw), 0.3, seed=1)


@pytest.fixture(scope="module")
def fitted(ds):
    return TrajectoryRecoverer(**SMALL).fit(ds)


def test_params_and_clone():
    est = TrajectoryRecoverer(dim=16, lambda_d=0.5)
    params = est.get_params()
    assert params["dim"] == 16 and params["lambda_d"] == 0.5 and params["line_epochs"] == 500
    assert clone(est).get_params() == params
    assert not hasattr(est, "state_")


def test_fit_rejects_non_dataset():
    with pytest.raises(InputError):
        TrajectoryRecoverer().fit([1, 2, 3])


def test_predict_ranks_every_target(ds, fitted):
    cases = cases_from_dataset(ds, "test")
    out = fitted.predict(cases)
    n_targets = sum(len(c.mask.target_idx) for c in cases)
    assert len(out) == n_targets
    for ranking in out.rankings.values():
        assert sorted(ranking) == list(range(ds.grid.n_cells))


def test_recover_keeps_observed(ds, fitted):
    cases = cases_from_dataset(ds, "test")
    for case, filled in zip(cases, fitted.recover(cases)):
        assert len(filled.slots) == len(case.traj.slots)
        assert all(0 <= s < ds.grid.n_cells for s in filled.slots)
        for n, label in enumerate(case.mask.labels):
            if label == "O":
                assert filled.slots[n] == case.traj.slots[n]


def test_predict_is_deterministic(ds, fitted):
    cases = cases_from_dataset(ds, "test")
    a = fitted.predict(cases).rankings
    b = fitted.predict(cases).rankings
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip_predicts_identically(ds, fitted):
    buf = io.BytesIO()
    save_checkpoint(fitted.to_checkpoint(), buf)
    buf.seek(0)
    back = TrajectoryRecoverer.from_checkpoint(load_checkpoint(buf))
    assert back.get_params()["dim"] == 8
    cases = cases_from_dataset(ds, "test")
    a, b = fitted.predict(cases), back.predict(cases)
    for k in a.rankings:
        assert np.array_equal(a.rankings[k], b.rankings[k])
        assert np.array_equal(a.scores[k], b.scores[k])


def test_given_embedding_is_used(ds):
    table = np.random.default_rng(0).standard_normal((ds.grid.n_cells + 1, 8)).astype(np.float32)
    est = TrajectoryRecoverer(embedding=table, **SMALL).fit(ds)
    np.testing.assert_array_equal(est.embedding_, table)
    norms = np.linalg.norm(est.state_.table_array()[:-1], axis=1)
    np.testing.assert_allclose(norms, 1.0, rtol=1e-5)


def test_vote_aggregation(ds, fitted):
    cases = cases_from_dataset(ds, "test")[:2]
    voter = TrajectoryRecoverer.from_state(fitted.state_, n_samples=3, aggregate="vote")
    out = voter.predict(cases)
    assert len(out) == sum(len(c.mask.target_idx) for c in cases)
