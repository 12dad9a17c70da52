import math

import numpy as np
import pytest

from conftest import tiny_config
from edgeseg import trainer
from edgeseg.dataio import SamplePair, synth_dataset
from edgeseg.unet import build, forward
from edgeseg.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    backward,
    cross_entropy_loss,
    fit,
    gradient_check,
    loss_and_grads,
    sample_coordinates,
)


def small_batch(seed=0, n=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 16, 16)).astype(np.float32)
    y = (rng.random((n, 16, 16)) < 0.3).astype(np.int64)
    return x, y


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.learning_rate, c.epochs, c.batch_size, c.split_fraction) == (1e-4, 350, 5, 0.8)
    assert c.betas == (0.9, 0.999) and c.eps == 1e-8
    for bad in (dict(split_fraction=0), dict(split_fraction=1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_cross_entropy_equal_logits_is_ln2():
    logits = np.zeros((2, 2, 3, 3), np.float32)
    for t in (np.zeros((2, 3, 3)), np.ones((2, 3, 3))):
        loss, _ = cross_entropy_loss(logits, t)
        assert loss == pytest.approx(math.log(2), abs=1e-7)


def test_cross_entropy_confident_correct():
    logits = np.zeros((1, 2, 4, 4), np.float32)
    logits[:, 0], logits[:, 1] = 10, -10
    loss, _ = cross_entropy_loss(logits, np.zeros((1, 4, 4)))
    # -log(1 / (1 + e^-20)) = log1p(e^-20)
    assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(2, 2, 5, 5))
    t = (rng.random((2, 5, 5)) < 0.5).astype(np.int64)
    loss, d = cross_entropy_loss(logits, t)
    assert np.allclose(d.sum(axis=1), 0, atol=1e-15)
    # analytic gradient vs independent finite differences on the loss itself
    eps = 1e-6
    for idx in [(0, 0, 1, 2), (1, 1, 4, 4), (0, 1, 0, 0)]:
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += eps
        lm[idx] -= eps
        fd = (cross_entropy_loss(lp, t)[0] - cross_entropy_loss(lm, t)[0]) / (2 * eps)
        assert d[idx] == pytest.approx(fd, rel=1e-5)
    with pytest.raises(ValueError, match="binary"):
        cross_entropy_loss(logits, t * 2)


def test_backward_zero_dlogits(tiny):
    x, _ = small_batch()
    cache = {}
    logits = forward(tiny, x, training=True, cache=cache)
    grads = backward(tiny, cache, np.zeros_like(logits))
    assert set(grads) == set(tiny.trainable())
    assert all(not g.any() for g in grads.values())
    for k, g in grads.items():
        assert g.shape == tiny.params[k].shape


def test_backward_requires_cache(tiny):
    with pytest.raises(RuntimeError, match="cache"):
        backward(tiny, {}, np.zeros((1, 2, 16, 16), np.float32))


def test_relu_adjoint_gates_on_preactivation(tiny):
    x, y = small_batch()
    cache = {}
    logits = forward(tiny, x, training=True, cache=cache)
    _, d = cross_entropy_loss(logits, y)
    seen = {}
    orig = trainer.batchnorm_train_backward

    def spy(dout, xhat, inv_std, gamma):
        seen.setdefault("dout", dout)
        return orig(dout, xhat, inv_std, gamma)

    trainer.batchnorm_train_backward = spy
    try:
        backward(tiny, cache, d)
    finally:
        trainer.batchnorm_train_backward = orig
    # the first bn visited in reverse is dec0.bn2, whose output feeds dec0.relu2
    pre = cache["_act"]["dec0.bn2"]
    assert np.all(seen["dout"][pre <= 0] == 0)


def test_bn_running_stats_momentum(tiny):
    x, _ = small_batch()
    m = tiny.copy()
    cache = {}
    forward(m, x, training=True, update_stats=True, cache=cache)
    a = cache["_act"]["enc0.conv1"].astype(np.float64)
    mu = a.mean(axis=(0, 2, 3))
    var = a.var(axis=(0, 2, 3), ddof=1)
    assert np.allclose(m.params["enc0.bn1.running_mean"], 0.1 * mu, atol=1e-6)
    assert np.allclose(m.params["enc0.bn1.running_var"], 0.9 + 0.1 * var, atol=1e-6)


def test_adam_fixed_point():
    p = {"w": np.zeros(3)}
    g = {"w": np.array([0.5, -2.0, 1e-3])}
    s = AdamState()
    prev = p["w"].copy()
    for _ in range(2000):
        adam_step(p, g, s, lr=0.01)
        step = p["w"] - prev
        prev = p["w"].copy()
    # bias-corrected moments of a constant gradient make every step lr * sign(g)
    assert np.allclose(np.abs(step), 0.01, rtol=1e-4)
    assert np.array_equal(np.sign(step), -np.sign(g["w"]))


def test_adam_zero_grad_and_counter():
    p = {"w": np.arange(4, dtype=np.float32)}
    s = AdamState()
    adam_step(p, {"w": np.zeros(4, np.float32)}, s, lr=1.0)
    assert np.array_equal(p["w"], np.arange(4, dtype=np.float32)) and s.t == 1
    adam_step(p, {"w": np.zeros(4, np.float32)}, s, lr=1.0)
    assert s.t == 2
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3, np.float32)}, s, lr=1.0)


def test_overfit_one_batch():
    m = build(tiny_config(seed=2))
    x, y = small_batch(3, n=4)
    s = AdamState()
    first, _ = loss_and_grads(m, x, y)
    losses = []
    for _ in range(50):
        loss, g = loss_and_grads(m, x, y)
        losses.append(loss)
        adam_step(m.params, g, s, lr=1e-2)
    assert min(losses) < 0.5 * first


def _tiny_samples(n=12, seed=0):
    return synth_dataset(seed, n, 16, 16)


def test_fit_zero_epochs_leaves_model(tiny):
    before = {k: v.copy() for k, v in tiny.params.items()}
    assert fit(tiny, _tiny_samples(), TrainConfig(epochs=0)) == []
    assert all(np.array_equal(before[k], tiny.params[k]) for k in before)


def test_fit_empty_dataset(tiny):
    with pytest.raises(ValueError, match="empty"):
        fit(tiny, [], TrainConfig(epochs=1))


def test_fit_deterministic_and_logs(tmp_path):
    data = _tiny_samples()
    runs = []
    for _ in range(2):
        m = build(tiny_config(seed=1))
        log = fit(m, data, TrainConfig(epochs=2, learning_rate=1e-3, seed=3), timing=False,
                  checkpoint=str(tmp_path / "ck.uwnt"))
        runs.append((log, m))
    assert runs[0][0] == runs[1][0]
    assert set(runs[0][0][0]) == {"epoch", "train_loss", "val_f1"}
    assert all(np.array_equal(runs[0][1].params[k], runs[1][1].params[k]) for k in runs[0][1].params)
    assert (tmp_path / "ck.uwnt").exists()


def test_fit_restores_best_validation_params():
    data = _tiny_samples()
    m = build(tiny_config(seed=1))
    log = fit(m, data, TrainConfig(epochs=3, learning_rate=1e-3, seed=3), timing=False)
    best = max(r["val_f1"] for r in log)
    _, val = trainer.split_train_val(data, 0.8, 3)
    assert trainer.mean_f1(m, val) == pytest.approx(best)


def test_sample_coordinates_cover_every_tensor(tiny):
    coords = sample_coordinates(tiny, 200, seed=0)
    assert len(coords) == 200
    assert {k for k, _ in coords} == set(tiny.trainable())


def test_gradient_check_passes(tiny):
    x, y = small_batch(5)
    err = gradient_check(tiny, x, y, sample=sample_coordinates(tiny, 60, seed=1))
    assert err < 1e-3


def test_gradient_check_flags_sign_flip(tiny, monkeypatch):
    orig = trainer.conv2d_backward

    def flipped(dout, x, w, padding):
        dx, dw, db = orig(dout, x, w, padding)
        return dx, -dw, db

    monkeypatch.setattr(trainer, "conv2d_backward", flipped)
    x, y = small_batch(5)
    coords = [("enc0.conv1.weight", i) for i in range(5)] + [("mid.conv2.weight", 7)]
    err = gradient_check(tiny, x, y, sample=coords)
    assert err == pytest.approx(2.0, abs=1e-3)


def test_gradient_check_epsilon_halved(tiny):
    x, y = small_batch(6)
    coords = sample_coordinates(tiny, 40, seed=2)
    e1 = gradient_check(tiny, x, y, epsilon=1e-3, sample=coords)
    e2 = gradient_check(tiny, x, y, epsilon=5e-4, sample=coords)
    assert e2 <= 4 * e1 + 1e-7


def test_split_train_val_partition():
    items = list(range(25))
    tr, va = trainer.split_train_val(items, 0.8, 0)
    assert len(tr) == 20 and len(va) == 5 and sorted(tr + va) == items


def test_sample_pair_rejects_mismatch():
    with pytest.raises(ValueError):
        SamplePair("x", np.zeros((2, 2), np.float32), np.zeros((2, 3), np.uint8))
