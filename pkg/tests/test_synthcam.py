import numpy as np
import pytest

from ctxpairs.context import encode_contexts
from ctxpairs.errors import ConfigError
from ctxpairs.synthcam import (WorldConfig, draw_prototypes, generate_world, label_subset,
                               make_benchmark, power_law_counts, split_train_test)

SMALL = dict(n_locations=10, n_classes=5, pool_size=2, feature_dim=8, n_train=700, n_test=300)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(**SMALL))


def test_config_guards():
    for bad in (dict(pool_size=13), dict(n_train=5, n_test=0), dict(sigma_obs=-1),
                dict(held_out_fraction=1.0), dict(n_modes=3), dict(n_locations=2, pool_size=4)):
        with pytest.raises(ConfigError):
            WorldConfig(**bad)


def test_prototype_rejection():
    protos = draw_prototypes(12, 32, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0)
    cos = protos @ protos.T
    assert cos[~np.eye(12, dtype=bool)].max() < 0.5
    with pytest.raises(ConfigError):
        draw_prototypes(10, 1, np.random.default_rng(0), max_draws=1000)


def test_degenerate_world_is_constant():
    cfg = WorldConfig(n_locations=3, n_classes=1, pool_size=1, feature_dim=4, sigma_obs=0.0,
                      n_modes=1, n_poses=1, background_scale=0.0, individual_scale=0.0,
                      n_train=50, n_test=10)
    ds = generate_world(cfg)
    assert np.ptp(ds.features, axis=0).max() == 0.0


def test_sample_invariants(world):
    cfg = WorldConfig(**SMALL)
    assert len(world) == cfg.n_samples
    assert world.labels.min() >= 0 and world.labels.max() < cfg.n_classes
    assert world.locations.min() >= 0 and world.locations.max() < cfg.n_locations
    np.testing.assert_array_equal(world.contexts,
                                  encode_contexts(world.locations, world.timestamps, world.context_cfg))
    for loc in range(cfg.n_locations):
        assert set(world.labels[world.locations == loc]) <= set(world.meta["pools"][loc])


def test_bursts_share_class_location_and_window(world):
    bursts = world.meta["bursts"]
    for b in np.unique(bursts):
        m = bursts == b
        assert len(set(world.labels[m])) == 1
        assert len(set(world.locations[m])) == 1
        assert np.ptp(world.timestamps[m]) <= 2.0 * (m.sum() - 1) + 1e-9


def test_power_law_frequencies():
    """Monte-Carlo count of generated labels against 1/k at exponent 1."""
    cfg = WorldConfig(n_locations=20, n_classes=10, pool_size=3, feature_dim=16, imbalance=1.0,
                      n_train=6000, n_test=0, held_out_fraction=0.0)
    ds = generate_world(cfg)
    freq = np.bincount(ds.labels, minlength=10) / len(ds)
    target = 1.0 / np.arange(1, 11)
    target /= target.sum()
    assert np.max(np.abs(freq - target) / target) < 0.2
    assert power_law_counts(100, 4, 0.0).tolist() == [25, 25, 25, 25]


def test_mutual_information_location_class(world):
    joint = np.zeros((10, 5))
    np.add.at(joint, (world.locations, world.labels), 1)
    joint /= joint.sum()
    pl, pc = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / (pl @ pc)[nz]))
    assert mi > 0.1


def test_generation_is_bit_identical():
    a = generate_world(WorldConfig(**SMALL))
    b = generate_world(WorldConfig(**SMALL))
    for name in ("features", "locations", "timestamps", "labels"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = generate_world(WorldConfig(**{**SMALL, "seed": 1}))
    assert not np.array_equal(a.features, c.features)


def test_split_held_out_locations():
    cfg = WorldConfig(n_locations=20, n_classes=4, pool_size=2, feature_dim=8, n_train=800, n_test=200)
    ds = generate_world(cfg)
    train, test = split_train_test(ds, 0.5, seed=0)
    test_only = set(test.locations) - set(train.locations)
    assert len(test_only) == 10
    assert not set(train.ids) & set(test.ids)
    assert len(train) + len(test) == len(ds)
    # classes at test-only sites are all trainable
    assert set(test.labels) <= set(train.labels)


def test_split_fraction_zero_shares_everything(world):
    train, test = split_train_test(world, 0.0, seed=3)
    assert set(test.locations) <= set(train.locations)
    assert len(train) == round(0.7 * len(world))
    with pytest.raises(ConfigError):
        split_train_test(world, 1.0)


def test_label_subset_rules(world):
    train, _ = split_train_test(world, 0.1, seed=0)
    assert np.array_equal(label_subset(train, 100, 0), np.arange(len(train)))
    sub = label_subset(train, 10, 0)
    counts = np.bincount(train.labels, minlength=5)
    got = np.bincount(train.labels[sub], minlength=5)
    np.testing.assert_array_equal(got, np.maximum(1, np.ceil(counts * 0.1)).astype(int))
    np.testing.assert_array_equal(sub, label_subset(train, 10, 0))
    with pytest.raises(ConfigError):
        label_subset(train, 5, 0)


def test_label_subset_floor_of_one():
    cfg = WorldConfig(n_locations=4, n_classes=2, pool_size=2, feature_dim=4, imbalance=3.0,
                      n_train=30, n_test=0, held_out_fraction=0.0)
    ds = generate_world(cfg)
    assert np.bincount(ds.labels).min() <= 4
    sub = label_subset(ds, 1, 0)
    assert np.bincount(ds.labels[sub]).tolist() == [1, 1]


def test_default_benchmark_sizes():
    _, train, test = make_benchmark()
    assert (len(train), len(test)) == (8000, 4000)
    assert len(set(train.labels)) == 12
    assert len(set(test.locations) - set(train.locations)) == 4
