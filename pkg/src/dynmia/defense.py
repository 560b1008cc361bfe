"""Adversarial-regularization hardening of a dynamic target network.

The target and an inference adversary are updated alternately. For every
target batch the adversary first takes ``inner_steps`` Adam steps on
members (the batch) vs. a batch drawn from a defender-private reference
set; then the target minimises ``CE + lam * mean(log h(member))``, pushing
the adversary's membership probability for training samples down.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidSpec
from .models import DynamicNet, save_model
from .trainers import TrainConfig, run_epochs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DefenseConfig:
    lam: float = 1.0
    inner_steps: int = 1
    epochs: int | None = None  # None: the target recipe's epoch count
    seed: int = 0
    adversary: str = "logits-only"
    adversary_lr: float = 0.001
    hidden: tuple[int, int] = (128, 64)
    # joint main+policy fine-tune after the defended run, also regularised
    finetune_epochs: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise InvalidSpec("lambda must be >= 0")
        if self.inner_steps < 1:
            raise InvalidSpec("inner_steps must be >= 1")
        if self.adversary not in ("logits-only", "fusion"):
            raise InvalidSpec(f"unknown defender adversary {self.adversary!r}")
        if self.finetune_epochs < 0 or (self.epochs is not None and self.epochs < 1):
            raise InvalidSpec("epoch counts must be positive")


class InferenceAdversary(nn.Module):
    """3-layer MLP on softmax outputs (plus gates for the fusion adversary) -> membership logit."""

    def __init__(self, num_classes: int, gate_dim: int = 0, hidden=(128, 64)):
        super().__init__()
        h1, h2 = hidden
        self.gate_dim = gate_dim
        self.net = nn.Sequential(nn.Linear(num_classes + gate_dim, h1), nn.ReLU(),
                                 nn.Linear(h1, h2), nn.ReLU(), nn.Linear(h2, 1))

    def forward(self, logits, gates=None):
        z = torch.softmax(logits, 1)
        if self.gate_dim:
            z = torch.cat([z, gates], 1)
        return self.net(z).squeeze(1)

    def fit_step(self, opt, mem, non) -> float:
        """One BCE step on (member, non-member) inputs; returns accuracy on that batch."""
        zm, zn = self(*mem), self(*non)
        loss = (F.binary_cross_entropy_with_logits(zm, torch.ones_like(zm))
                + F.binary_cross_entropy_with_logits(zn, torch.zeros_like(zn)))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            correct = int((zm >= 0).sum()) + int((zn < 0).sum())
        return correct / (len(zm) + len(zn))

    def gain(self, logits, gates=None) -> torch.Tensor:
        """Mean log membership probability the adversary assigns; differentiable in the inputs."""
        return F.logsigmoid(self(logits, gates)).mean()


def train_defended_target(net: DynamicNet, pool, partitions, train_cfg: TrainConfig,
                          cfg: DefenseConfig = DefenseConfig(), *, log_path=None, ckpt_path=None):
    """Train ``net`` on target_train under adversarial regularization.

    Returns ``(net, history, adversary_acc)`` where ``adversary_acc`` holds the
    adversary's mean accuracy on its own training batches for each epoch.
    With ``lam == 0`` the target's trajectory equals :func:`train_target`'s.
    """
    cfg.validate()
    ref = np.asarray(partitions.reference, dtype=np.int64)
    if len(ref) == 0:
        raise InvalidSpec("adversarial regularization needs a reference split (SplitSpec.n_reference > 0)")
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        adv = InferenceAdversary(net.num_classes, net.gate_dim if cfg.adversary == "fusion" else 0, cfg.hidden)
    adv_opt = torch.optim.Adam(adv.parameters(), lr=cfg.adversary_lr)
    ref_rng = np.random.default_rng(cfg.seed + 1)
    epoch_acc: list[list[float]] = []
    offset = [0]  # epoch index shift for the fine-tune phase

    def adversary_inputs(x):
        was = net.training
        net.eval()
        with torch.no_grad():
            logits, gates = net(x, gate_mode="hard")
        net.train(was)
        return (logits, gates) if adv.gate_dim else (logits,)

    def hook(x, y, logits, gates, epoch):
        epoch += offset[0]
        while len(epoch_acc) <= epoch:
            epoch_acc.append([])
        mem = adversary_inputs(x)
        for _ in range(cfg.inner_steps):
            rb = ref[ref_rng.choice(len(ref), size=min(len(x), len(ref)), replace=False)]
            non = adversary_inputs(pool.tensors(rb)[0])
            epoch_acc[epoch].append(adv.fit_step(adv_opt, mem, non))
        # adversary weights are fixed while the target takes its step
        for p in adv.parameters():
            p.requires_grad_(False)
        g = adv.gain(logits, gates if adv.gate_dim else None)
        for p in adv.parameters():
            p.requires_grad_(True)
        return cfg.lam * g

    phase1 = train_cfg if cfg.epochs is None else replace(train_cfg, epochs=cfg.epochs)
    torch.manual_seed(phase1.seed)
    history = run_epochs(net, pool, partitions.target_train, partitions.target_test, phase1,
                         log_path=log_path, batch_hook=hook)
    if cfg.finetune_epochs:
        ft = replace(train_cfg, epochs=cfg.finetune_epochs, seed=phase1.seed + 1)
        offset[0] = len(history)
        history += run_epochs(net, pool, partitions.target_train, partitions.target_test, ft, batch_hook=hook)
    adversary_acc = [float(np.mean(a)) if a else float("nan") for a in epoch_acc]
    for e, a in enumerate(adversary_acc):
        log.info("defense epoch %d adversary acc %.4f", e, a)
    net.origin = "defended"
    if ckpt_path is not None:
        save_model(net, ckpt_path, defended=True, **{"lambda": cfg.lam},
                   test_acc=history[-1].test_acc, train_acc=history[-1].train_acc)
    return net, history, adversary_acc
