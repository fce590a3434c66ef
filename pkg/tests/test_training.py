import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnfair import tensor as T
from unlearnfair.data import LabeledDataset, SyntheticBlobSpec, make_blobs
from unlearnfair.errors import ContractError, DomainError
from unlearnfair.nn import ModelArch, freeze_prefix, init_params, same_parameters
from unlearnfair.tensor import Tensor
from unlearnfair.training import (
    Optimizer,
    OptimizerConfig,
    TrainConfig,
    adam_step,
    config_digest,
    evaluate_accuracy,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
    write_loss_curve,
)

ADAM = OptimizerConfig("adam", 1e-3, 0.9, 5e-4)
SPEC = SyntheticBlobSpec(num_classes=4, per_class_n=40, dim=8, class_sigma=0.15, test_per_class_n=10)
ARCH = ModelArch("mlp_bn", (8,), 4, (16, 16, 16))


def _param(v):
    return [Tensor(np.array([v]), requires_grad=True)]


def test_sgd_one_and_two_steps():
    cfg = OptimizerConfig("sgd", 0.1, 0.9, 0.0)
    p, state = _param(1.0), {"velocity": [np.zeros(1)]}
    sgd_step(p, [np.ones(1)], state, cfg)
    np.testing.assert_allclose(p[0].data, [0.9], rtol=1e-15)
    sgd_step(p, [np.ones(1)], state, cfg)
    np.testing.assert_allclose(state["velocity"][0], [1.9], rtol=1e-15)
    np.testing.assert_allclose(p[0].data, [0.71], rtol=1e-14)


def test_sgd_fixed_point():
    p, state = _param(0.3), {"velocity": [np.zeros(1)]}
    for _ in range(5):
        sgd_step(p, [np.zeros(1)], state, OptimizerConfig("sgd", 0.1, 0.9, 0.0))
    assert p[0].data[0] == 0.3


def test_sgd_weight_decay_is_coupled():
    p, state = _param(2.0), {"velocity": [np.zeros(1)]}
    sgd_step(p, [np.zeros(1)], state, OptimizerConfig("sgd", 0.1, 0.0, 0.5))
    np.testing.assert_allclose(p[0].data, [2.0 - 0.1 * 0.5 * 2.0])


def test_sgd_shape_mismatch():
    with pytest.raises(ContractError):
        sgd_step(_param(1.0), [np.ones(2)], {"velocity": [np.zeros(1)]}, OptimizerConfig("sgd", 0.1))


def test_adam_first_step():
    p, state = _param(1.0), {"m": [np.zeros(1)], "v": [np.zeros(1)]}
    adam_step(p, [np.array([0.5])], state, OptimizerConfig("adam", 1e-4, 0.9, 0.0), t=1)
    np.testing.assert_allclose(p[0].data, [1.0 - 1e-4 * 0.5 / (0.5 + 1e-8)], rtol=1e-15)
    assert abs(p[0].data[0] - 0.9999) < 1e-10


def test_adam_fixed_point_and_step_index():
    p, state = _param(-0.7), {"m": [np.zeros(1)], "v": [np.zeros(1)]}
    cfg = OptimizerConfig("adam", 1e-2, 0.9, 0.0)
    for t in range(1, 6):
        adam_step(p, [np.zeros(1)], state, cfg, t=t)
    assert p[0].data[0] == -0.7
    with pytest.raises(DomainError):
        adam_step(p, [np.zeros(1)], state, cfg, t=0)


def test_optimizer_config_validation():
    for bad in (dict(kind="rmsprop"), dict(learning_rate=0.0), dict(momentum=1.0), dict(weight_decay=-1.0)):
        with pytest.raises(DomainError):
            OptimizerConfig(**bad)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-4, 1.0), st.floats(0.0, 0.99))
def test_sgd_matches_recurrence(theta, g, lr, mu):
    p, state = _param(theta), {"velocity": [np.zeros(1)]}
    v, th = 0.0, theta
    cfg = OptimizerConfig("sgd", lr, mu, 0.0)
    for _ in range(3):
        sgd_step(p, [np.array([g])], state, cfg)
        v = mu * v + g
        th = th - lr * v
    assert abs(p[0].data[0] - th) <= 1e-12 * max(1.0, abs(th))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=4, max_size=4), st.sampled_from(["sgd", "adam"]))
def test_masked_entries_untouched(mask, kind):
    rng = np.random.default_rng(0)
    p = [Tensor(rng.normal(size=4), requires_grad=True)]
    before = p[0].data.copy()
    opt = Optimizer(p, OptimizerConfig(kind, 0.1, 0.9, 0.1), [np.array(mask)])
    for _ in range(3):
        p[0].grad = rng.normal(size=4)
        opt.step()
    m = np.array(mask)
    assert np.array_equal(p[0].data[~m], before[~m])


def _blobs():
    return make_blobs(SPEC, "train")


def test_epochs_zero_is_noop():
    model = init_params(ARCH, 0)
    before = model.clone()
    res = train(model, _blobs(), TrainConfig(0, 16, 0), ADAM)
    assert res.loss_curve == []
    assert same_parameters(model, before)
    assert all(np.array_equal(a.running_mean, b.running_mean) for a, b in zip(model.norm_layers, before.norm_layers))


def test_empty_dataset_and_class_mismatch():
    model = init_params(ARCH, 0)
    with pytest.raises(DomainError):
        train(model, LabeledDataset(np.zeros((0, 8)), np.zeros(0), 4), TrainConfig(1, 4, 0), ADAM)
    with pytest.raises(DomainError):
        train(model, LabeledDataset(np.zeros((3, 8)), np.zeros(3), 5), TrainConfig(1, 4, 0), ADAM)


def test_separable_two_class_blobs_train_to_high_accuracy():
    spec = SyntheticBlobSpec(num_classes=2, per_class_n=100, dim=8, class_sigma=0.05, seed=1)
    ds = make_blobs(spec)
    model = init_params(ModelArch("mlp_bn", (8,), 2, (16, 16, 16)), 1)
    train(model, ds, TrainConfig(30, 32, 1), ADAM)
    assert evaluate_accuracy(model, ds) >= 0.99


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model = init_params(ARCH, 7)
        res = train(model, _blobs(), TrainConfig(3, 16, 7), ADAM)
        runs.append((model, res.loss_curve))
    assert runs[0][1] == runs[1][1]
    assert same_parameters(runs[0][0], runs[1][0])


def test_step_count_and_singleton_batch_drop():
    ds = _blobs().subset(np.arange(33))
    model = init_params(ARCH, 0)
    res = train(model, ds, TrainConfig(2, 16, 0), OptimizerConfig("sgd", 0.01))
    assert res.optimizer.t == 4 and res.dropped_batches == 2
    ln = init_params(ModelArch("mlp_ln", (8,), 4, (4, 4, 4)), 0)
    res = train(ln, ds, TrainConfig(2, 16, 0), OptimizerConfig("sgd", 0.01))
    assert res.optimizer.t == 6 and res.dropped_batches == 0


def test_access_log_counts_samples():
    ds = _blobs().with_tag("retain_train")
    res = train(init_params(ARCH, 0), ds, TrainConfig(2, 16, 0), ADAM)
    assert res.access_log == {"retain_train": 2 * len(ds)}


def test_evaluate_accuracy_tie_breaks_to_lowest_class():
    # zero last layer -> constant logits -> every prediction is class 0
    model = init_params(ModelArch("mlp_ln", (2,), 10, (3, 3, 3)), 0)
    last = model.parameters()[-2:]
    for p in last:
        p.data = np.zeros(p.shape)
    labels = np.arange(10).repeat(2)
    ds = LabeledDataset(np.full((20, 2), 0.5), labels, 10)
    assert evaluate_accuracy(model, ds) == 0.1
    only_zero = LabeledDataset(np.full((3, 2), 0.5), np.zeros(3), 10)
    assert evaluate_accuracy(model, only_zero) == 1.0
    with pytest.raises(DomainError):
        evaluate_accuracy(model, LabeledDataset(np.zeros((0, 2)), np.zeros(0), 10))


def test_loss_on_fixed_batch_decreases_over_first_epoch():
    ds = _blobs()
    batch = np.arange(0, len(ds), 5)
    wins = 0
    for seed in range(5):
        model = init_params(ARCH, seed)

        def loss():
            with T.no_grad():
                return T.softmax_cross_entropy(model.forward(ds.inputs[batch], "eval"), ds.labels[batch]).item()

        before = loss()
        train(model, ds, TrainConfig(1, 16, seed), ADAM)
        wins += loss() < before
    assert wins >= 4


def test_frozen_parameters_bit_identical():
    model = init_params(ARCH, 2)
    before = model.clone()
    train(model, _blobs(), TrainConfig(3, 16, 2, freeze_k=3), ADAM)
    mask = freeze_prefix(model, 3)
    for m, p, q in zip(mask, model.parameters(), before.parameters()):
        if not m.any():
            assert np.array_equal(p.data, q.data)
    # running statistics of frozen norm layers stay put as well
    for a, b in list(zip(model.norm_layers, before.norm_layers))[:2]:
        assert np.array_equal(a.running_mean, b.running_mean) and np.array_equal(a.running_var, b.running_var)
    assert not np.array_equal(model.norm_layers[2].running_mean, before.norm_layers[2].running_mean)


@pytest.mark.parametrize("opt", [ADAM, OptimizerConfig("sgd", 0.05, 0.9, 5e-4)])
def test_checkpoint_preserves_trajectory(tmp_path, opt):
    ds = _blobs()
    straight = init_params(ARCH, 3)
    full = train(straight, ds, TrainConfig(4, 16, 3), opt)

    half = init_params(ARCH, 3)
    first = train(half, ds, TrainConfig(2, 16, 3), opt)
    digest = config_digest(TrainConfig(4, 16, 3), opt)
    save_checkpoint(tmp_path / "ck.npz", half, first.optimizer, 2, digest)
    ck = load_checkpoint(tmp_path / "ck.npz")
    assert ck.epoch == 2 and ck.digest == digest
    rest = train(ck.model, ds, TrainConfig(4, 16, 3), opt, optimizer=ck.restore_optimizer(), start_epoch=2)
    assert same_parameters(straight, ck.model)
    assert first.loss_curve + rest.loss_curve == full.loss_curve


def test_write_loss_curve(tmp_path):
    write_loss_curve(tmp_path / "l.csv", [0.5, 0.1])
    assert (tmp_path / "l.csv").read_text() == "epoch,mean_loss\n0,0.5\n1,0.10000000000000001\n"
