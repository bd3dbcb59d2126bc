import math

import numpy as np
import pytest

from ctxpairs import autograd as ag
from ctxpairs.data import Dataset
from ctxpairs.errors import (BatchSizeError, ConfigError, DimensionError, EmptyInputError,
                             RangeError, SupervisionError, VersionError)
from ctxpairs.losses import LossConfig
from ctxpairs.model import (CHECKPOINT_MAGIC, NetworkSpec, TrainConfig, augment, checkpoint_bytes,
                            cosine_lr, embed, extract_features, forward, init_params,
                            load_checkpoint, save_checkpoint, sgd_step, train)
from ctxpairs.pairing import Strategy
from e2e import gradient_check


def blobs(n=120, d=6, n_cls=3, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    y = rng.integers(n_cls, size=n)
    centres = 3 * rng.normal(size=(n_cls, d))
    return Dataset(ids=np.arange(n), features=centres[y] + rng.normal(size=(n, d)),
                   locations=rng.integers(4, size=n), timestamps=rng.uniform(0, 3600, n),
                   labels=y if labels else None)


SMALL = NetworkSpec(encoder=(6, 8, 8), projector=(8, 4), predictor=(4,))


def test_spec_defaults_and_shapes():
    spec = NetworkSpec()
    assert spec.encoder[1:] == (256, 128) and spec.projector == (512, 128) and spec.predictor == (64,)
    shapes = spec.layer_shapes(with_predictor=True)
    assert shapes[-1] == ("pred", 1, 64, 128)
    with pytest.raises(ConfigError):
        NetworkSpec(encoder=(4, 0))


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(lr=-1), dict(drop_prob=1.0), dict(noise_sigma=-0.1),
                dict(schedule="step"), dict(batch_size=1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_init_glorot_bounds_and_zero_buffers():
    params = init_params(SMALL, 0, with_predictor=True)
    for name, t in params.tensors.items():
        assert params.momentum[name].shape == t.value.shape
        assert not params.momentum[name].any()
        if name.endswith(".W"):
            fan_in, fan_out = t.value.shape
            assert np.abs(t.value).max() <= math.sqrt(6 / (fan_in + fan_out))
        else:
            assert not t.value.any()


def test_augment_identity_and_limits():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(augment(x, 0.0, 0.0, rng), x)
    big = np.ones((1, 100_000))
    assert np.count_nonzero(augment(big, 0.1, 1 - 1e-9, rng)) == 0


def test_augment_monte_carlo_mean():
    rng = np.random.default_rng(1)
    x = rng.normal(size=8)
    copies = augment(np.tile(x, (100_000, 1)), 0.1, 0.0, rng)
    assert np.abs(copies.mean(axis=0) - x).max() < 0.01


def test_augment_fresh_randomness():
    rng = np.random.default_rng(2)
    x = np.zeros((2, 4))
    assert not np.array_equal(augment(x, 0.1, 0.1, rng), augment(x, 0.1, 0.1, rng))


def test_forward_zero_weights_gives_zero():
    params = init_params(SMALL, 0)
    for t in params.tensors.values():
        t.value = np.zeros_like(t.value)
    _, z, _ = forward(params, np.ones((3, 6)))
    assert not z.value.any()
    assert not extract_features(params, np.ones((2, 6))).any()


def test_forward_identity_layer():
    spec = NetworkSpec(encoder=(3, 3), projector=(3,))
    params = init_params(spec, 0)
    params.tensors["enc.0.W"].value = np.eye(3)
    params.tensors["proj.0.W"].value = np.eye(3)
    x = np.array([[1.0, 2.0, 3.0]])
    _, z, _ = forward(params, x)
    np.testing.assert_array_equal(z.value, x)


def test_forward_matches_duplicate_arithmetic():
    params = init_params(SMALL, 3, with_predictor=True)
    rng = np.random.default_rng(4)
    for t in params.tensors.values():
        t.value = t.value + 0.1 * rng.normal(size=t.value.shape)
    x = rng.normal(size=(5, 6))
    v = params.values()
    relu = lambda a: np.maximum(a, 0)  # noqa: E731
    f = relu(relu(x @ v["enc.0.W"] + v["enc.0.b"]) @ v["enc.1.W"] + v["enc.1.b"])
    z = relu(f @ v["proj.0.W"] + v["proj.0.b"]) @ v["proj.1.W"] + v["proj.1.b"]
    p = relu(z @ v["pred.0.W"] + v["pred.0.b"]) @ v["pred.1.W"] + v["pred.1.b"]
    got_f, got_z, got_p = forward(params, x, with_prediction=True)
    np.testing.assert_allclose(got_f.value, f, rtol=0, atol=1e-12)
    np.testing.assert_allclose(got_z.value, z, rtol=0, atol=1e-12)
    np.testing.assert_allclose(got_p.value, p, rtol=0, atol=1e-12)


def test_forward_rejects_bad_width():
    params = init_params(SMALL, 0)
    with pytest.raises(DimensionError):
        forward(params, np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        extract_features(params, np.zeros((2, 5)))


def test_batch_norm_train_and_eval():
    spec = NetworkSpec(encoder=(4, 4), projector=(6, 3), batch_norm=True)
    params = init_params(spec, 0)
    assert set(params.buffers) == {"proj.bn.mean", "proj.bn.var"}
    x = np.random.default_rng(0).normal(size=(10, 4))
    ag_f = forward(params, x)[0]
    pre = ag_f.value @ params.tensors["proj.0.W"].value
    forward(params, x, training=True)
    # one update of the running averages with momentum 0.1, unbiased variance
    np.testing.assert_allclose(params.buffers["proj.bn.mean"], 0.1 * pre.mean(axis=0, keepdims=True))
    np.testing.assert_allclose(params.buffers["proj.bn.var"],
                               0.9 + 0.1 * pre.var(axis=0, ddof=1, keepdims=True))
    with pytest.raises(BatchSizeError):
        forward(params, x[:1], training=True)
    assert forward(params, x[:1])[1].shape == (1, 3)


def test_cosine_lr_values():
    assert cosine_lr(0, 200, 0.03) == 0.03
    assert cosine_lr(100, 200, 0.03) == pytest.approx(0.015, abs=1e-15)
    assert cosine_lr(199, 200, 0.03) == pytest.approx(1.85e-6, rel=1e-2)
    assert cosine_lr(199, 200, 0.03) == pytest.approx(0.03 * 0.5 * (1 + math.cos(199 * math.pi / 200)))
    for t in (200, -1):
        with pytest.raises(RangeError):
            cosine_lr(t, 200, 0.03)


def _one_param(value):
    params = init_params(NetworkSpec(encoder=(1, 1), projector=(1,)), 0)
    params.tensors = {"w": ag.Tensor(np.array([[value]]), requires_grad=True)}
    params.momentum = {"w": np.zeros((1, 1))}
    return params


def test_sgd_two_step_recurrence():
    params = _one_param(1.0)
    g = {"w": np.ones((1, 1))}
    sgd_step(params, g, 0.1, 0.9, 0.0)
    assert params.tensors["w"].value[0, 0] == pytest.approx(0.9, abs=1e-15)
    sgd_step(params, g, 0.1, 0.9, 0.0)
    assert params.tensors["w"].value[0, 0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_plain_and_zero_gradient():
    params = _one_param(2.0)
    sgd_step(params, {"w": np.zeros((1, 1))}, 0.1, 0.9, 0.0)
    assert params.tensors["w"].value[0, 0] == 2.0 and params.momentum["w"][0, 0] == 0.0
    sgd_step(params, {"w": np.full((1, 1), 3.0)}, 0.1, 0.0, 0.0)
    assert params.tensors["w"].value[0, 0] == pytest.approx(2.0 - 0.3)
    with pytest.raises(DimensionError):
        sgd_step(params, {"w": np.zeros((2, 1))}, 0.1, 0.9, 0.0)


def test_weight_decay_alone_shrinks_norms():
    params = init_params(SMALL, 0)
    zero = {k: np.zeros_like(t.value) for k, t in params.tensors.items()}
    norms = []
    for _ in range(20):
        sgd_step(params, zero, 0.03, 0.9, 5e-4)
        norms.append(sum(np.sum(t.value ** 2) for t in params.tensors.values()))
    assert all(b < a for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("loss", ["triplet", "simclr", "simsiam"])
@pytest.mark.parametrize("kind", ["euclidean", "neg_cosine"])
def test_end_to_end_gradients(loss, kind):
    err, norm = gradient_check(loss, kind)
    assert norm > 1e-3
    assert err < 1e-4


def test_end_to_end_gradients_with_batch_norm_everywhere():
    for loss in ("triplet", "simclr"):
        err, _ = gradient_check(loss, "neg_cosine", batch_norm=True, seed=2)
        assert err < 1e-4


def test_zero_lr_leaves_params_unchanged():
    ds = blobs()
    cfg = TrainConfig(epochs=1, batch_size=32, lr=0.0)
    spec = SMALL
    before = init_params(spec, np.random.default_rng(np.random.SeedSequence(0).spawn(3)[0]))
    after = train(ds, Strategy("augment"), LossConfig("simclr"), cfg, spec).params
    for k in before.tensors:
        np.testing.assert_array_equal(before.tensors[k].value, after.tensors[k].value)


@pytest.mark.parametrize("loss", ["triplet", "simclr", "simsiam"])
def test_training_is_bit_reproducible(loss):
    ds = blobs()
    cfg = TrainConfig(epochs=3, batch_size=32)
    spec = NetworkSpec(encoder=(6, 8, 8), projector=(8, 4), predictor=(16,), batch_norm=loss == "simsiam")
    a = train(ds, Strategy("sequence"), LossConfig(loss), cfg, spec)
    b = train(ds, Strategy("sequence"), LossConfig(loss), cfg, spec)
    assert a.trace == b.trace
    assert checkpoint_bytes(a.params) == checkpoint_bytes(b.params)
    assert len(a.trace) == 3


def test_training_reduces_loss():
    ds = blobs(n=256)
    res = train(ds, Strategy("oracle"), LossConfig("simclr"), TrainConfig(epochs=15, batch_size=32), SMALL)
    losses = [loss for _, loss, _ in res.trace]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    lrs = [lr for _, _, lr in res.trace]
    assert lrs[0] == 0.03 and lrs == sorted(lrs, reverse=True)


def test_train_guards():
    with pytest.raises(SupervisionError):
        train(blobs(labels=False), Strategy("oracle"), LossConfig(), TrainConfig(epochs=1), SMALL)
    with pytest.raises(DimensionError):
        train(blobs(d=5), Strategy(), LossConfig(), TrainConfig(epochs=1), SMALL)
    with pytest.raises(EmptyInputError):
        train(blobs().subset([]), Strategy(), LossConfig(), TrainConfig(epochs=1), SMALL)


def test_simclr_small_remainder_batch_is_dropped():
    # 34 = 32 + 2: the 2-anchor remainder cannot form a contrastive batch
    res = train(blobs(n=34), Strategy(), LossConfig("simclr"), TrainConfig(epochs=1, batch_size=32), SMALL)
    assert np.isfinite(res.trace[0][1])


def test_checkpoint_round_trip(tmp_path):
    spec = NetworkSpec(encoder=(6, 8, 8), projector=(8, 4), predictor=(16,), batch_norm=True)
    res = train(blobs(), Strategy(), LossConfig("simsiam"), TrainConfig(epochs=2, batch_size=32), spec)
    path = tmp_path / "m.ckpt"
    save_checkpoint(res.params, path, extra={"note": "x"})
    params, extra = load_checkpoint(path)
    assert extra == {"note": "x"} and params.spec == spec and params.epoch == 2
    for k, t in res.params.tensors.items():
        np.testing.assert_array_equal(params.tensors[k].value, t.value)
        np.testing.assert_array_equal(params.momentum[k], res.params.momentum[k])
    for k, v in res.params.buffers.items():
        np.testing.assert_array_equal(params.buffers[k], v)
    x = blobs().features[:7]
    np.testing.assert_array_equal(embed(params, x), embed(res.params, x))
    assert checkpoint_bytes(params, {"note": "x"}) == path.read_bytes()


def test_checkpoint_version_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(VersionError):
        load_checkpoint(bad)
    data = checkpoint_bytes(init_params(SMALL, 0))
    future = data.replace(b'"format_version": 1', b'"format_version": 9')
    assert future != data and future.startswith(CHECKPOINT_MAGIC)
    p = tmp_path / "future.ckpt"
    p.write_bytes(future)
    with pytest.raises(VersionError):
        load_checkpoint(p)
