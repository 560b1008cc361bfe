"""Policy-network dynamic networks: channel gating and block skipping.

A :class:`DynamicNet` pairs a main network (small ResNet or VGG stack) with a
policy network that looks at the same input and emits one gate logit per
gated unit. Gates are binarised at 0 (sigmoid 0.5, ties -> 1) at inference;
training uses a straight-through estimator by default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_container, save_container
from .errors import GateCountMismatch, InvalidSpec, ShapeMismatch

CHANNEL = "channel-gating"
BLOCK = "block-skipping"
GATE_MODES = ("hard", "ste", "relaxed")


@dataclass(frozen=True)
class ModelConfig:
    style: str = CHANNEL
    backbone: str = "resnet"
    num_classes: int = 10
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    # stages whose blocks get channel gates; None gates every stage
    gated_stages: tuple[int, ...] | None = (2,)
    gate_dim: int | None = None
    policy_widths: tuple[int, ...] = (16, 32, 32)
    in_channels: int = 3
    norm: str = "batch"
    conv_bias: bool = False
    gate_bias_init: float = 0.0
    train_gates: str = "ste"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["policy_widths"] = list(self.policy_widths)
        d["gated_stages"] = None if self.gated_stages is None else list(self.gated_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("widths", "policy_widths", "gated_stages"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def gate_layout(self) -> list[int]:
        """Channel count per gated unit, in forward order."""
        nstages = len(self.widths)
        if self.style == BLOCK:
            if self.backbone != "resnet":
                raise InvalidSpec("block skipping needs a residual backbone")
            return [1] * (nstages * self.blocks_per_stage)
        if self.style != CHANNEL:
            raise InvalidSpec(f"unknown style {self.style!r}")
        stages = range(nstages) if self.gated_stages is None else self.gated_stages
        if any(s < 0 or s >= nstages for s in stages):
            raise InvalidSpec(f"gated_stages {self.gated_stages} out of range")
        per_stage = self.blocks_per_stage if self.backbone == "resnet" else 1
        return [self.widths[s] for s in sorted(stages) for _ in range(per_stage)]

    def resolved_gate_dim(self) -> int:
        n = sum(self.gate_layout())
        if self.gate_dim is not None and self.gate_dim != n:
            raise GateCountMismatch(
                f"gate_dim={self.gate_dim} but the gated layers have {n} channels/blocks")
        return n


# --------------------------------------------------------------------------
# gates
# --------------------------------------------------------------------------

def binarize(logits: torch.Tensor, mode: str = "hard") -> torch.Tensor:
    """Gate values from gate logits.

    ``hard``: 1 where sigmoid >= 0.5 (logit >= 0). ``ste``: hard values forward,
    sigmoid gradient backward. ``relaxed``: plain sigmoid.
    """
    hard = (logits >= 0).to(logits.dtype)
    if mode == "hard":
        return hard
    soft = torch.sigmoid(logits)
    if mode == "relaxed":
        return soft
    if mode == "ste":
        return hard + soft - soft.detach()
    raise ValueError(f"unknown gate mode {mode!r}")


def apply_gates_channel(features: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    """Multiply channel ``c`` of ``features`` (B, C, H, W) by ``gates[:, c]``."""
    if gates.dim() != 2 or gates.shape[0] != features.shape[0] or gates.shape[1] != features.shape[1]:
        raise GateCountMismatch(
            f"gates {tuple(gates.shape)} do not match features {tuple(features.shape)}")
    return features * gates[:, :, None, None]


def apply_gates_block(x: torch.Tensor, gates: torch.Tensor, blocks) -> torch.Tensor:
    """Run ``blocks`` in order; block k keeps only its shortcut where gate k is 0."""
    blocks = list(blocks)
    if gates.dim() != 2 or gates.shape[1] != len(blocks):
        raise GateCountMismatch(f"{gates.shape[-1]} gates for {len(blocks)} blocks")
    for k, block in enumerate(blocks):
        x = block(x, block_gate=gates[:, k])
    return x


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _norm(cfg: ModelConfig, c: int) -> nn.Module:
    return nn.BatchNorm2d(c) if cfg.norm == "batch" else nn.Identity()


def _conv(cfg: ModelConfig, cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    bias = cfg.conv_bias and cfg.norm != "batch"
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=bias)


class GatedBlock(nn.Module):
    """Residual block ``shortcut(x) + g * branch(x)``.

    The branch is conv-norm-relu-[channel gate]-conv-norm-relu. There is no
    nonlinearity after the sum, so flipping a block gate from 0 to 1 adds
    exactly the branch output. A projection shortcut (stride or width change)
    is conv1x1-norm-relu.
    """

    def __init__(self, cfg: ModelConfig, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = _conv(cfg, cin, cout, 3, stride)
        self.bn1 = _norm(cfg, cout)
        self.conv2 = _conv(cfg, cout, cout, 3, 1)
        self.bn2 = _norm(cfg, cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv(cfg, cin, cout, 1, stride), _norm(cfg, cout), nn.ReLU())
        else:
            self.shortcut = nn.Identity()

    def forward(self, x, channel_gate=None, block_gate=None):
        h = F.relu(self.bn1(self.conv1(x)))
        if channel_gate is not None:
            h = apply_gates_channel(h, channel_gate)
        h = F.relu(self.bn2(self.conv2(h)))
        s = self.shortcut(x)
        if block_gate is None:
            return s + h
        return s + block_gate.view(-1, 1, 1, 1) * h


class VGGStage(nn.Module):
    def __init__(self, cfg: ModelConfig, cin: int, cout: int, pool: bool):
        super().__init__()
        self.conv1 = _conv(cfg, cin, cout)
        self.bn1 = _norm(cfg, cout)
        self.conv2 = _conv(cfg, cout, cout)
        self.bn2 = _norm(cfg, cout)
        self.pool = pool

    def forward(self, x, channel_gate=None):
        h = F.relu(self.bn1(self.conv1(x)))
        if channel_gate is not None:
            h = apply_gates_channel(h, channel_gate)
        h = F.relu(self.bn2(self.conv2(h)))
        return F.max_pool2d(h, 2) if self.pool else h


class MainNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        if cfg.backbone == "resnet":
            self.stem = nn.Sequential(_conv(cfg, cfg.in_channels, w[0]), _norm(cfg, w[0]), nn.ReLU())
            blocks, cin = [], w[0]
            self.block_stage = []
            for s, cout in enumerate(w):
                for b in range(cfg.blocks_per_stage):
                    stride = 2 if (s > 0 and b == 0) else 1
                    blocks.append(GatedBlock(cfg, cin, cout, stride))
                    self.block_stage.append(s)
                    cin = cout
            self.blocks = nn.ModuleList(blocks)
        elif cfg.backbone == "vgg":
            self.stem = nn.Identity()
            cin, stages = cfg.in_channels, []
            for s, cout in enumerate(w):
                stages.append(VGGStage(cfg, cin, cout, pool=s < len(w) - 1))
                cin = cout
            self.blocks = nn.ModuleList(stages)
            self.block_stage = list(range(len(w)))
        else:
            raise InvalidSpec(f"unknown backbone {cfg.backbone!r}")
        self.fc = nn.Linear(w[-1], cfg.num_classes)
        gated = range(len(w)) if cfg.gated_stages is None else set(cfg.gated_stages)
        self.channel_gated = [cfg.style == CHANNEL and s in gated for s in self.block_stage]

    def features(self, x, gates):
        """Final feature map (the last conv layer's output) under ``gates``."""
        h = self.stem(x)
        if self.cfg.style == BLOCK:
            return apply_gates_block(h, gates, self.blocks)
        offset = 0
        for block, is_gated in zip(self.blocks, self.channel_gated):
            if is_gated:
                c = block.conv1.out_channels
                g = gates[:, offset:offset + c]
                offset += c
                h = block(h, channel_gate=g)
            else:
                h = block(h)
        if offset != gates.shape[1]:
            raise GateCountMismatch(f"{gates.shape[1]} gates supplied, {offset} channels gated")
        return h

    def head(self, feat):
        return self.fc(F.adaptive_avg_pool2d(feat, 1).flatten(1))


class PolicyNet(nn.Module):
    """Three stride-2 convolutions, global average pooling, one linear layer."""

    def __init__(self, cfg: ModelConfig, gate_dim: int):
        super().__init__()
        layers, cin = [], cfg.in_channels
        for cout in cfg.policy_widths:
            layers += [_conv(cfg, cin, cout, 3, 2), _norm(cfg, cout), nn.ReLU()]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, gate_dim)
        nn.init.constant_(self.fc.bias, cfg.gate_bias_init)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.body(x), 1).flatten(1))


class DynamicNet(nn.Module):
    """Main network gated by a policy network's binary control-flow vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gate_dim = cfg.resolved_gate_dim()
        if cfg.train_gates not in ("ste", "relaxed"):
            raise InvalidSpec(f"train_gates must be 'ste' or 'relaxed', got {cfg.train_gates!r}")
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.main_net = MainNet(cfg)
            self.policy_net = PolicyNet(cfg, self.gate_dim)
        # provenance: init / scratch / finetune:<mode> / defended
        self.origin = "init"

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    @property
    def style(self) -> str:
        return self.cfg.style

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels or min(x.shape[2:]) < 8:
            raise ShapeMismatch(
                f"expected (B, {self.cfg.in_channels}, H>=8, W>=8) input, got {tuple(x.shape)}")

    def gate_mode(self) -> str:
        return self.cfg.train_gates if self.training else "hard"

    def forward(self, x, gate_mode: str | None = None, return_features: bool = False):
        """Return ``(logits, gates)``, plus the last feature map if requested."""
        self.check_input(x)
        gates = binarize(self.policy_net(x), gate_mode or self.gate_mode())
        feat = self.main_net.features(x, gates)
        logits = self.main_net.head(feat)
        if return_features:
            return logits, gates, feat
        return logits, gates

    def comparative_dim(self, height: int = 32, width: int = 32) -> int:
        """Length of the flattened last-conv feature map for an input size."""
        with torch.no_grad():
            was = self.training
            self.eval()
            _, _, feat = self(torch.zeros(1, self.cfg.in_channels, height, width), return_features=True)
            self.train(was)
        return feat[0].numel()


def _assert_binary(gates: torch.Tensor) -> None:
    assert bool(((gates == 0) | (gates == 1)).all()), "exported control-flow vector is not binary"


@torch.no_grad()
def policy_forward(net: DynamicNet, x: torch.Tensor) -> torch.Tensor:
    """Binary control-flow vectors, shape ``(B, gate_dim)``, whatever the module mode."""
    net.check_input(x)
    was = net.training
    net.eval()
    try:
        gates = binarize(net.policy_net(x), "hard")
    finally:
        net.train(was)
    _assert_binary(gates)
    return gates


@torch.no_grad()
def forward(net: DynamicNet, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inference pass: logits and the binary control-flow vector from one pass."""
    was = net.training
    net.eval()
    try:
        logits, gates = net(x, gate_mode="hard")
    finally:
        net.train(was)
    _assert_binary(gates)
    return logits, gates


def extract_last_conv(net: DynamicNet, x: torch.Tensor, y: torch.Tensor):
    """Flattened last-conv activation and d(CE loss)/d(activation), per sample.

    Runs in inference mode (hard gates, frozen norm statistics). The loss is
    summed over the batch, so each row of the gradient is that sample's own.
    """
    if y is None:
        raise ShapeMismatch("a true label per sample is needed for the gradient")
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} labels for {x.shape[0]} inputs")
    was = net.training
    net.eval()
    try:
        with torch.enable_grad():
            logits, _, feat = net(x, gate_mode="hard", return_features=True)
            loss = F.cross_entropy(logits, y, reduction="sum")
            (grad,) = torch.autograd.grad(loss, feat)
    finally:
        net.train(was)
    return feat.detach().flatten(1), grad.flatten(1)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(net: DynamicNet, path, seed: int | None = None, **meta):
    return save_container(path, "dynamic-net", {
        "config": net.cfg.to_dict(),
        "seed": net.cfg.seed if seed is None else seed,
        "origin": net.origin,
        "meta": meta,
        "state_dict": {k: v.detach().clone() for k, v in net.state_dict().items()},
    })


def load_model(path) -> tuple[DynamicNet, dict]:
    blob = load_container(path, "dynamic-net")
    net = DynamicNet(ModelConfig.from_dict(blob["config"]))
    net.load_state_dict(blob["state_dict"])
    net.origin = blob.get("origin", "init")
    net.eval()
    return net, blob.get("meta", {})
