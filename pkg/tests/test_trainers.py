import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dynmia.data import DataPartitions, synthetic_pool
from dynmia.errors import DivergedTraining, EmptySet, FrozenViolation, InvalidSpec
from dynmia.models import DynamicNet, ModelConfig
from dynmia.trainers import (FINETUNE_MODES, TrainConfig, _check_frozen, _snapshot, evaluate_accuracy,
                             finetune_shadow, run_epochs, set_trainable, shadow_config, train_target)

SMALL = ModelConfig(num_classes=2, widths=(8, 16, 16), policy_widths=(8, 8, 8), seed=0)


@pytest.fixture(scope="module")
def pool():
    return synthetic_pool(2, n=120, seed=0, separation=1.0)


def parts(n=20):
    idx = list(range(120))
    return DataPartitions(idx[:n], idx[n:2 * n], idx[2 * n:3 * n], idx[3 * n:4 * n])


def params(net, prefix=""):
    return {k: v.detach().clone() for k, v in net.named_parameters() if k.startswith(prefix)}


@given(st.integers(1, 200), st.floats(1e-4, 1.0), st.floats(0, 1e-4))
def test_cosine_schedule_monotone_and_reaches_floor(epochs, lr, floor):
    cfg = TrainConfig(epochs=epochs, lr_init=lr, lr_floor=floor)
    lrs = [cfg.lr_at(e) for e in range(epochs)]
    assert math.isclose(lrs[0], lr, rel_tol=1e-12)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    if epochs > 1:
        assert math.isclose(lrs[-1], floor, rel_tol=1e-9, abs_tol=1e-15)


def test_recipe_defaults():
    cfg = TrainConfig()
    assert (cfg.optimizer, cfg.lr_init, cfg.lr_floor, cfg.lr_schedule) == ("adam", 0.01, 0.0001, "cosine-annealing")
    assert shadow_config(TrainConfig(epochs=40)).epochs == 10


def test_config_validation():
    for bad in (TrainConfig(epochs=0), TrainConfig(optimizer="rmsprop"), TrainConfig(lr_init=1e-5),
                TrainConfig(loss="mse"), TrainConfig(lr_schedule="step")):
        with pytest.raises(InvalidSpec):
            bad.validate()


def test_zero_lr_leaves_parameters_unchanged(pool):
    net = DynamicNet(SMALL)
    before = params(net)
    cfg = TrainConfig(epochs=1, lr_init=0.0, lr_floor=0.0, lr_schedule="constant", batch_size=8)
    train_target(net, pool, parts(), cfg)
    assert all(torch.equal(before[k], v) for k, v in params(net).items())


def test_overfits_twenty_samples(pool):
    net = DynamicNet(SMALL)
    cfg = TrainConfig(epochs=200, batch_size=20, seed=0)
    train_target(net, pool, parts(20), cfg)
    assert evaluate_accuracy(net, pool, parts(20).target_train) == 1.0
    x, y = pool.tensors(parts(20).target_train)
    assert torch.equal(net(x)[0].argmax(1), y)


def test_training_is_seed_reproducible(pool, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=10, seed=4)
    h1 = train_target(DynamicNet(SMALL), pool, parts(), cfg, log_path=tmp_path / "a.tsv")[1]
    h2 = train_target(DynamicNet(SMALL), pool, parts(), cfg, log_path=tmp_path / "b.tsv")[1]
    assert [s.train_loss for s in h1] == [s.train_loss for s in h2]
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_metrics_log_format(pool, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=10)
    train_target(DynamicNet(SMALL), pool, parts(), cfg, log_path=tmp_path / "m.tsv")
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert len(lines) == 3
    for e, line in enumerate(lines):
        f = line.split("\t")
        assert len(f) == 5 and int(f[0]) == e
        assert 0 <= float(f[2]) <= 1 and 0 <= float(f[3]) <= 1
        assert math.isclose(float(f[4]), cfg.lr_at(e), rel_tol=1e-7)


def test_checkpoint_written(pool, tmp_path):
    from dynmia.models import load_model
    net, _ = train_target(DynamicNet(SMALL), pool, parts(), TrainConfig(epochs=1, batch_size=20),
                          ckpt_path=tmp_path / "t.ckpt")
    loaded, meta = load_model(tmp_path / "t.ckpt")
    assert loaded.origin == "scratch" and set(meta) >= {"train_acc", "test_acc"}


def test_divergence_detected(pool):
    with pytest.raises(DivergedTraining):
        run_epochs(DynamicNet(SMALL), pool, parts().target_train, [], TrainConfig(epochs=1),
                   batch_hook=lambda *a: torch.tensor(float("nan")))


@pytest.mark.parametrize("mode", FINETUNE_MODES)
def test_finetune_freezes_the_right_subnet(pool, mode):
    target = DynamicNet(SMALL)
    train_target(target, pool, parts(), TrainConfig(epochs=2, batch_size=10))
    frozen = {"ft-main": "policy_net.", "ft-policy": "main_net.", "ft-both": None}[mode]
    tuned = {"ft-main": "main_net.", "ft-policy": "policy_net.", "ft-both": ""}[mode]
    before = params(target)
    shadow, _ = finetune_shadow(target, pool, parts(), mode, TrainConfig(epochs=5, batch_size=10, seed=1))
    after = params(shadow)
    if frozen:
        assert all(torch.equal(before[k], after[k]) for k in before if k.startswith(frozen))
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith(tuned))
    # the target itself is untouched
    assert all(torch.equal(before[k], v) for k, v in params(target).items())
    assert shadow.origin == f"finetune:{mode}"
    assert all(p.requires_grad for p in shadow.parameters())


def test_frozen_violation_raised():
    net = DynamicNet(SMALL)
    names = set_trainable(net, "ft-main")
    snap = _snapshot(net, names)
    with torch.no_grad():
        net.policy_net.fc.bias.add_(1.0)
    with pytest.raises(FrozenViolation):
        _check_frozen(net, snap, 0)


def test_evaluate_accuracy_oracles(pool):
    net = DynamicNet(SMALL)
    p = parts()
    idx = np.array(p.target_train)
    labels = pool.labels[idx]
    # constant predictor: always class 0
    with torch.no_grad():
        net.main_net.fc.weight.zero_()
        net.main_net.fc.bias.copy_(torch.tensor([1.0, 0.0]))
    assert evaluate_accuracy(net, pool, idx) == float((labels == 0).mean())
    balanced = np.concatenate([np.where(pool.labels == 0)[0][:10], np.where(pool.labels == 1)[0][:10]])
    assert evaluate_accuracy(net, pool, balanced) == 0.5
    with pytest.raises(EmptySet):
        evaluate_accuracy(net, pool, [])
