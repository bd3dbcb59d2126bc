import numpy as np
import pytest

from ctxpairs.data import Dataset
from ctxpairs.errors import BatchSizeError, ConfigError, EmptyInputError, SupervisionError
from ctxpairs.pairing import (Strategy, build_epoch_plan, find_violations, negative_positions,
                              select_negatives, select_positive, select_positives)


def toy(n=200, n_loc=4, n_cls=3, labels=True, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        ids=np.arange(n),
        features=rng.normal(size=(n, 3)),
        locations=rng.integers(n_loc, size=n),
        timestamps=np.sort(rng.uniform(0, 600, size=n)),
        labels=rng.integers(n_cls, size=n) if labels else None,
    )


def test_strategy_validation():
    for bad in (dict(kind="nope"), dict(kind="oracle_noisy", lam=1.5),
                dict(kind="sequence", window_seconds=0), dict(kind="context", tau_c=0)):
        with pytest.raises(ConfigError):
            Strategy(**bad)


def test_augment_returns_anchor():
    ds = toy()
    rng = np.random.default_rng(0)
    assert all(select_positive(Strategy("augment"), i, ds, rng) == i for i in range(20))


def test_sequence_singleton_returns_itself():
    ds = Dataset(ids=[0, 1, 2], features=np.zeros((3, 2)), locations=[0, 1, 1],
                 timestamps=[0.0, 0.0, 100.0])
    rng = np.random.default_rng(0)
    assert {select_positive(Strategy("sequence"), 0, ds, rng) for _ in range(20)} == {0}
    assert {select_positive(Strategy("sequence"), 2, ds, rng) for _ in range(20)} == {2}


def test_sequence_window_is_inclusive_and_uniform():
    ds = Dataset(ids=range(4), features=np.zeros((4, 1)), locations=[0, 0, 0, 0],
                 timestamps=[0.0, 5.0, 5.000001, -5.0])
    rng = np.random.default_rng(1)
    picks = select_positives(Strategy("sequence"), np.zeros(30_000, dtype=int), ds, rng)
    freq = np.bincount(picks, minlength=4) / len(picks)
    np.testing.assert_allclose(freq[[0, 1, 3]], 1 / 3, atol=0.015)
    assert freq[2] == 0


def test_oracle_requires_labels():
    ds = toy(labels=False)
    for kind in ("oracle", "oracle_noisy", "oracle_same_loc"):
        with pytest.raises(SupervisionError):
            select_positive(Strategy(kind), 0, ds, np.random.default_rng(0))


def test_noisy_oracle_rate_two_class():
    """Binomial oracle: mismatch fraction 0.30 +- 0.01 over 10^5 draws."""
    n = 1000
    ds = Dataset(ids=range(n), features=np.zeros((n, 1)), locations=np.zeros(n, int),
                 timestamps=np.zeros(n), labels=np.arange(n) % 2)
    rng = np.random.default_rng(2)
    anchors = rng.integers(n, size=100_000)
    pos = select_positives(Strategy("oracle_noisy", lam=0.3), anchors, ds, rng)
    assert abs(np.mean(ds.labels[pos] != ds.labels[anchors]) - 0.3) < 0.01


def test_noisy_oracle_uniform_over_other_classes():
    ds = toy(n=300, n_cls=4, seed=3)
    rng = np.random.default_rng(3)
    anchors = np.full(60_000, 5)
    pos = select_positives(Strategy("oracle_noisy", lam=1.0), anchors, ds, rng)
    others = np.flatnonzero(ds.labels != ds.labels[5])
    assert set(pos.tolist()) <= set(others.tolist())
    freq = np.bincount(pos, minlength=len(ds))[others] / len(pos)
    assert 0.5 * np.abs(freq - 1 / len(others)).sum() < 0.05


def test_noisy_oracle_single_class_falls_back(caplog):
    ds = toy(n=30, n_cls=1)
    rng = np.random.default_rng(0)
    with caplog.at_level("WARNING"):
        pos = select_positives(Strategy("oracle_noisy", lam=0.9), np.arange(30), ds, rng)
        select_positives(Strategy("oracle_noisy", lam=0.9), np.arange(30), ds, rng)
    assert np.all(ds.labels[pos] == 0)
    assert sum("no other-class" in r.message for r in caplog.records) == 1


def test_oracle_same_loc_constraint():
    ds = toy(seed=4)
    rng = np.random.default_rng(4)
    pos = select_positives(Strategy("oracle_same_loc"), np.arange(len(ds)), ds, rng)
    assert np.all(ds.labels[pos] == ds.labels)
    assert np.all(ds.locations[pos] == ds.locations)


def test_select_negatives():
    rng = np.random.default_rng(5)
    assert select_negatives(3, [3, 8], 1, rng).tolist() == [8]
    pool = np.arange(10)
    draws = np.array([select_negatives(0, pool, 1, rng)[0] for _ in range(100_000)])
    freq = np.bincount(draws, minlength=10)[1:] / len(draws)
    assert np.all(np.abs(freq - 1 / 9) < 0.005)
    for _ in range(200):
        d = select_negatives(0, np.arange(6), 2, rng)
        assert len(set(d.tolist())) == 2 and 0 not in d
    with pytest.raises(BatchSizeError):
        select_negatives(0, [0, 1], 2, rng)


def test_negative_positions_never_self():
    rng = np.random.default_rng(6)
    for b in (2, 3, 17):
        for _ in range(50):
            neg = negative_positions(b, rng)
            assert np.all(neg != np.arange(b)) and neg.max() < b


def test_epoch_plan_shapes_and_determinism():
    ds = toy(n=10)
    plans = build_epoch_plan(Strategy("augment"), ds, 4, 7)
    assert [len(p) for p in plans] == [4, 4, 2]
    assert sorted(np.concatenate([p.anchors for p in plans]).tolist()) == list(range(10))
    again = build_epoch_plan(Strategy("augment"), ds, 4, 7)
    assert all(np.array_equal(a.anchors, b.anchors) for a, b in zip(plans, again))
    for p in plans:
        assert np.array_equal(p.anchors, p.positives)


def test_epoch_plan_errors():
    with pytest.raises(EmptyInputError):
        build_epoch_plan(Strategy(), toy(n=0), 4, 0)
    with pytest.raises(BatchSizeError):
        build_epoch_plan(Strategy(), toy(), 1, 0)


@pytest.mark.parametrize("kind", ["sequence", "oracle", "oracle_same_loc", "context"])
def test_plans_are_reproducible(kind):
    ds = toy(seed=8)
    a = build_epoch_plan(Strategy(kind), ds, 16, 11)
    b = build_epoch_plan(Strategy(kind), ds, 16, 11)
    assert all(np.array_equal(x.positives, y.positives) for x, y in zip(a, b))


@pytest.mark.parametrize("kind", ["sequence", "oracle", "oracle_same_loc"])
def test_brute_force_validator_finds_no_violations(kind):
    ds = toy(n=500, seed=9)
    plans = build_epoch_plan(Strategy(kind), ds, 32, 12)
    assert find_violations(plans, ds, Strategy(kind)) == []


def test_validator_catches_a_planted_violation():
    ds = toy(seed=10)
    plans = build_epoch_plan(Strategy("oracle"), ds, 32, 0)
    i = plans[0].anchors[0]
    wrong = int(np.flatnonzero(ds.labels != ds.labels[i])[0])
    plans[0].positives[0] = wrong
    assert find_violations(plans, ds, Strategy("oracle"))[0][:2] == (i, wrong)
