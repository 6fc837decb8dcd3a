import numpy as np
import pytest

from icasc import autodiff as ad
from icasc import nn
from icasc.autodiff import Tape, Tensor, backward
from icasc.nn import (ConfigError, Model, ModelConfig, NumericalError,
                      SgdOptimizer, cross_entropy, lr_schedule,
                      multilabel_soft_margin)

import oracles


def tiny_model(seed=0):
    cfg = ModelConfig(channels=(4, 8), input_size=8, input_channels=1,
                      n_classes=3)
    return Model.build(cfg, seed)


# --------------------------------------------------------------------------
# build_model
# --------------------------------------------------------------------------


def test_parameter_count_closed_form():
    cfg = ModelConfig(channels=(16, 32, 64), input_size=32, input_channels=3,
                      n_classes=10)
    model = Model.build(cfg, seed=0)
    # conv blocks: (out*in*3*3 + out) each; head: 64*10 + 10
    expected = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) \
        + (64 * 10 + 10)
    assert model.num_params() == expected


def test_same_seed_bit_identical():
    a = tiny_model(7)
    b = tiny_model(7)
    assert set(a.params) == set(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_one_block_config_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(channels=(16,), input_size=32, input_channels=1, n_classes=4)


def test_too_small_spatial_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(channels=(4, 8, 16), input_size=8, input_channels=1,
                    n_classes=3)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def test_zero_head_uniform_softmax():
    model = tiny_model()
    model.params["head.w"][:] = 0.0
    model.params["head.b"][:] = 0.0
    record = model.forward(np.random.default_rng(0).random((2, 1, 8, 8)))
    assert np.allclose(record.logits.data, 0.0)
    assert np.allclose(record.probabilities, 1.0 / 3.0)


def test_identical_images_identical_rows():
    model = tiny_model()
    img = np.random.default_rng(1).random((1, 1, 8, 8))
    record = model.forward(np.concatenate([img, img]))
    assert np.array_equal(record.logits.data[0], record.logits.data[1])


def test_inner_spatial_is_twice_last():
    model = tiny_model()
    record = model.forward(np.zeros((1, 1, 8, 8)))
    ih, iw = record.feats["inner"].shape[2:]
    lh, lw = record.feats["last"].shape[2:]
    assert (ih, iw) == (2 * lh, 2 * lw)


def test_tracked_feats_non_negative():
    model = tiny_model(3)
    record = model.forward(np.random.default_rng(2).random((4, 1, 8, 8)))
    assert record.feats["inner"].data.min() >= 0
    assert record.feats["last"].data.min() >= 0


def test_probabilities_sum_to_one():
    model = tiny_model(4)
    record = model.forward(np.random.default_rng(3).random((5, 1, 8, 8)))
    assert np.max(np.abs(record.probabilities.sum(axis=1) - 1.0)) < 1e-9


def test_forward_shape_mismatch():
    model = tiny_model()
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((1, 3, 8, 8)))


# --------------------------------------------------------------------------
# classification losses
# --------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = cross_entropy(logits, np.array([0, 1, 3]))
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_confident_limit():
    logits = Tensor(np.array([[500.0, 0.0]]))
    loss = cross_entropy(logits, np.array([0]))
    assert loss.item() < 1e-12


def test_cross_entropy_vs_extended_precision_oracle():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((6, 5)) * 3
    labels = rng.integers(0, 5, size=6)
    ours = cross_entropy(Tensor(logits), labels).item()
    assert abs(ours - oracles.cross_entropy_mp(logits, labels)) < 1e-10


def test_multilabel_soft_margin_vs_oracle():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((4, 6)) * 2
    targets = (rng.random((4, 6)) < 0.4).astype(float)
    targets[targets.sum(axis=1) == 0, 0] = 1.0
    ours = multilabel_soft_margin(Tensor(logits), targets).item()
    assert abs(ours - oracles.multilabel_soft_margin_mp(logits, targets)) < 1e-10


def test_multilabel_rejects_all_zero_row():
    logits = Tensor(np.zeros((2, 3)))
    targets = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        multilabel_soft_margin(logits, targets)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((4, 6))
    p1 = nn.softmax(logits)
    p2 = nn.softmax(logits + 123.456)
    assert np.max(np.abs(p1 - p2)) < 1e-12


def test_classification_loss_gradient_fd():
    model = tiny_model(9)
    images = np.random.default_rng(8).random((2, 1, 8, 8))
    labels = np.array([0, 2])

    tape = Tape()
    record = model.forward(images, tape=tape)
    loss = cross_entropy(record.logits, labels)
    grads = backward(loss, list(record.param_leaves.values()))

    def value(name, idx, delta):
        p = {k: v.copy() for k, v in model.params.items()}
        p[name][idx] += delta
        t = Tape()
        r = Model(model.config, p).forward(images, tape=t)
        return cross_entropy(r.logits, labels).item(), t.kink_signature()

    rng = np.random.default_rng(0)
    h = 1e-3
    checked = 0
    for _ in range(25):
        name = list(model.params)[rng.integers(len(model.params))]
        idx = tuple(rng.integers(s) for s in model.params[name].shape)
        fp, sp = value(name, idx, h)
        fm, sm = value(name, idx, -h)
        if sp != sm:
            continue
        fd = (fp - fm) / (2 * h)
        an = grads[record.param_leaves[name].node].data[idx]
        assert oracles.rel_err(an, fd, floor=1e-6) < 1e-4
        checked += 1
    assert checked >= 10


# --------------------------------------------------------------------------
# optimizer and schedules
# --------------------------------------------------------------------------


def test_sgd_plain_step():
    opt = SgdOptimizer(momentum=0.0, weight_decay=0.0)
    params = {"p": np.array([1.0])}
    opt.step(params, {"p": np.array([1.0])}, lr=0.1)
    assert np.allclose(params["p"], [0.9])


def test_sgd_momentum_two_steps():
    opt = SgdOptimizer(momentum=0.9, weight_decay=0.0)
    params = {"p": np.array([0.0])}
    opt.step(params, {"p": np.array([1.0])}, lr=1.0)
    assert np.allclose(params["p"], [-1.0])
    opt.step(params, {"p": np.array([1.0])}, lr=1.0)
    assert np.allclose(params["p"], [-2.9])


def test_sgd_weight_decay_only():
    opt = SgdOptimizer(momentum=0.0, weight_decay=0.1)
    params = {"p": np.array([1.0])}
    opt.step(params, {"p": np.array([0.0])}, lr=1.0)
    assert np.allclose(params["p"], [0.9])


def test_sgd_rejects_non_finite_gradient():
    opt = SgdOptimizer()
    with pytest.raises(NumericalError):
        opt.step({"p": np.array([1.0])}, {"p": np.array([np.nan])}, lr=0.1)


def test_step_schedule_milestones():
    assert lr_schedule("step", 100, 160, 0.1, (81, 122)) == pytest.approx(0.01)
    assert lr_schedule("step", 80, 160, 0.1, (81, 122)) == pytest.approx(0.1)
    assert lr_schedule("step", 130, 160, 0.1, (81, 122)) == pytest.approx(0.001)


def test_cosine_schedule_endpoints():
    assert lr_schedule("cosine", 0, 20, 0.4) == pytest.approx(0.4)
    assert lr_schedule("cosine", 10, 20, 0.4) == pytest.approx(0.2)


def test_unknown_schedule_kind():
    with pytest.raises(ValueError):
        lr_schedule("linear", 0, 10, 0.1)


def test_one_sgd_step_decreases_loss():
    for seed in range(5):
        model = tiny_model(seed)
        rng = np.random.default_rng(100 + seed)
        images = rng.random((8, 1, 8, 8))
        labels = rng.integers(0, 3, size=8)

        def loss_value():
            record = model.forward(images)
            return cross_entropy(record.logits, labels).item()

        before = loss_value()
        tape = Tape()
        record = model.forward(images, tape=tape)
        loss = cross_entropy(record.logits, labels)
        grads = backward(loss, list(record.param_leaves.values()))
        opt = SgdOptimizer(momentum=0.0, weight_decay=0.0)
        opt.step(model.params,
                 {n: grads[l.node].data for n, l in record.param_leaves.items()},
                 lr=1e-3)
        assert loss_value() < before


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(11)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, model, {"epoch": 3})
    loaded, header = nn.load_checkpoint(path)
    assert header["epoch"] == 3
    assert loaded.config == model.config
    for name in model.params:
        assert np.array_equal(loaded.params[name], model.params[name])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_train_state_roundtrip(tmp_path):
    opt = SgdOptimizer()
    opt.velocity = {"a": np.array([1.0, 2.0]), "b": np.zeros((2, 2))}
    path = tmp_path / "state.bin"
    nn.save_train_state(path, 5, opt)
    epoch, vel = nn.load_train_state(path)
    assert epoch == 5
    assert np.array_equal(vel["a"], [1.0, 2.0])
    assert np.array_equal(vel["b"], np.zeros((2, 2)))
