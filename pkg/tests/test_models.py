import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynmia.errors import CorruptRecord, GateCountMismatch, ShapeMismatch, VersionMismatch
from dynmia.models import (DynamicNet, ModelConfig, apply_gates_block, apply_gates_channel, binarize,
                           extract_last_conv, forward, load_model, policy_forward, save_model)

from oracles import central_difference


def toy(**kw) -> DynamicNet:
    return DynamicNet(ModelConfig(**kw)).eval()


def images(n=4, seed=0, size=32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, size, size, generator=g)


# ---------------------------------------------------------------- dimensions

def test_desk_dims():
    assert toy().gate_dim == 64
    assert toy(style="block-skipping").gate_dim == 3
    assert toy(num_classes=7)(images())[0].shape == (4, 7)


def test_full_scale_dims():
    # three stages of three blocks at widths 16/32/64, every block's middle conv gated
    net = toy(blocks_per_stage=3, gated_stages=None)
    assert policy_forward(net, images(2)).shape == (2, 3 * 16 + 3 * 32 + 3 * 64) == (2, 336)
    assert net.comparative_dim() == 64 * 8 * 8 == 4096


def test_explicit_gate_dim_must_match():
    with pytest.raises(GateCountMismatch):
        ModelConfig(gate_dim=65).resolved_gate_dim()
    assert ModelConfig(gate_dim=64).resolved_gate_dim() == 64


def test_bad_input_shape():
    net = toy()
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(2, 1, 32, 32))
    with pytest.raises(ShapeMismatch):
        policy_forward(net, torch.zeros(3, 32, 32))


# ---------------------------------------------------------------- gates

def test_binarize_threshold_and_tie():
    z = torch.tensor([-1e-6, 0.0, 1e-6, -3.0])
    assert binarize(z).tolist() == [0.0, 1.0, 1.0, 0.0]


def test_ste_forward_hard_backward_sigmoid():
    z = torch.tensor([-2.0, 0.5, 3.0], requires_grad=True)
    g = binarize(z, "ste")
    assert g.tolist() == [0.0, 1.0, 1.0]
    g.sum().backward()
    s = torch.sigmoid(z.detach())
    assert torch.allclose(z.grad, s * (1 - s))


def test_zero_policy_head_gives_all_ones():
    net = toy()
    with torch.no_grad():
        net.policy_net.fc.weight.zero_()
        net.policy_net.fc.bias.zero_()
    assert bool((policy_forward(net, images(8)) == 1).all())


def test_policy_forward_is_binary_and_deterministic_in_train_mode():
    net = toy()
    net.train()
    x = images(6)
    a, b = policy_forward(net, x), policy_forward(net, x)
    assert torch.equal(a, b)
    assert set(a.unique().tolist()) <= {0.0, 1.0}
    assert net.training


def test_forward_matches_policy_forward():
    net = toy()
    x = images(5, seed=3)
    logits, cf = forward(net, x)
    assert torch.equal(cf, policy_forward(net, x))
    logits2, cf2 = forward(net, x)
    assert torch.equal(logits, logits2) and torch.equal(cf, cf2)


def test_channel_gate_examples():
    f = torch.randn(3, 2, 5, 5)
    assert torch.equal(apply_gates_channel(f, torch.ones(3, 2)), f)
    assert bool((apply_gates_channel(f, torch.zeros(3, 2)) == 0).all())
    out = apply_gates_channel(f, torch.tensor([[1.0, 0.0]] * 3))
    assert torch.equal(out[:, 0], f[:, 0]) and bool((out[:, 1] == 0).all())
    with pytest.raises(GateCountMismatch):
        apply_gates_channel(f, torch.ones(3, 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_channel_gate_linearity(b, c, seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(b, c, 4, 4, generator=g)
    gates = (torch.rand(b, c, generator=g) < 0.5).float()
    total = apply_gates_channel(f, gates) + apply_gates_channel(f, 1 - gates)
    assert torch.equal(total, f)


def test_ungated_forward_equals_all_ones_gates():
    net = toy()
    x = images(3)
    mn = net.main_net
    feat_ones = mn.features(x, torch.ones(3, net.gate_dim))
    h = mn.stem(x)
    for block in mn.blocks:
        h = block(h)
    assert torch.allclose(feat_ones, h, atol=1e-6)


def test_block_skip_all_zero_and_all_one():
    net = toy(style="block-skipping")
    mn = net.main_net
    x = images(3)
    h0 = mn.stem(x)
    skip, full = h0, h0
    for block in mn.blocks:
        skip = block.shortcut(skip)
        full = block(full)
    assert torch.allclose(apply_gates_block(h0, torch.zeros(3, 3), mn.blocks), skip, atol=1e-6)
    assert torch.allclose(apply_gates_block(h0, torch.ones(3, 3), mn.blocks), full, atol=1e-6)
    with pytest.raises(GateCountMismatch):
        apply_gates_block(h0, torch.ones(3, 2), mn.blocks)


def test_single_block_flip_adds_the_branch():
    net = toy(style="block-skipping", widths=(8,), blocks_per_stage=1)
    block = net.main_net.blocks[0]
    h = net.main_net.stem(images(2))
    off = apply_gates_block(h, torch.zeros(2, 1), [block])
    on = apply_gates_block(h, torch.ones(2, 1), [block])
    branch = torch.relu(block.bn2(block.conv2(torch.relu(block.bn1(block.conv1(h))))))
    assert torch.allclose(on - off, branch, atol=1e-6)


# ---------------------------------------------------------------- last conv

def test_zero_input_gives_zero_activation():
    for norm in ("none", "batch"):
        net = toy(norm=norm)
        act, _ = extract_last_conv(net, torch.zeros(2, 3, 32, 32), torch.tensor([0, 1]))
        assert act.shape == (2, 64 * 8 * 8)
        assert bool((act == 0).all())


def test_last_conv_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = toy().double()
    x, y = images(3).double(), torch.tensor([1, 4, 7])
    act, grad = extract_last_conv(net, x, y)
    feat = act.view(3, 64, 8, 8).clone()

    def loss():
        logits = net.main_net.head(feat)
        return torch.nn.functional.cross_entropy(logits, y, reduction="sum")

    rng = np.random.default_rng(0)
    for i in rng.choice(feat.numel(), size=10, replace=False):
        fd = central_difference(loss, feat, int(i), 1e-6)
        a = float(grad.view(-1)[i])
        assert abs(a - fd) <= 1e-3 * max(abs(a), abs(fd), 1e-8)


def test_last_conv_needs_labels():
    with pytest.raises(ShapeMismatch):
        extract_last_conv(toy(), images(2), torch.tensor([0]))


def _relative_errors(net, x, y, n_coords=10, seed=0):
    net.train()
    params = [p for p in net.parameters()]

    def loss():
        logits, _ = net(x, gate_mode="relaxed")
        return torch.nn.functional.cross_entropy(logits, y)

    net.zero_grad()
    loss().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_coords):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        i = int(rng.integers(params[k].numel()))
        a = float(params[k].grad.view(-1)[i])
        fd = central_difference(loss, params[k].data, i, 1e-6)
        errs.append(abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return errs


@pytest.mark.parametrize("style", ["channel-gating", "block-skipping"])
def test_dynamic_forward_gradients_match_finite_differences(style):
    net = DynamicNet(ModelConfig(style=style, seed=1)).double()
    x = images(4, seed=2).double()
    errs = _relative_errors(net, x, torch.tensor([0, 3, 5, 9]))
    assert max(errs) < 1e-3, errs


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    net = toy(style="block-skipping", backbone="resnet", seed=5)
    net.origin = "scratch"
    save_model(net, tmp_path / "m.ckpt", note="x")
    loaded, meta = load_model(tmp_path / "m.ckpt")
    assert meta == {"note": "x"} and loaded.origin == "scratch" and loaded.cfg == net.cfg
    x = images(3)
    assert torch.equal(forward(net, x)[0], forward(loaded, x)[0])


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CorruptRecord):
        load_model(bad)
    torch.save({"header": "dynmia-ckpt v0"}, tmp_path / "old.ckpt")
    with pytest.raises(VersionMismatch):
        load_model(tmp_path / "old.ckpt")


def test_same_seed_same_init():
    a, b = toy(seed=3), toy(seed=3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not torch.equal(next(toy(seed=4).parameters()), next(a.parameters()))


def test_vgg_backbone_runs():
    net = toy(backbone="vgg")
    logits, cf = forward(net, images(2))
    assert logits.shape == (2, 10) and cf.shape == (2, 64)
