"""Target training from scratch and shadow construction by fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergedTraining, EmptySet, FrozenViolation, InvalidSpec
from .models import DynamicNet, save_model

log = logging.getLogger(__name__)

FINETUNE_MODES = ("ft-policy", "ft-main", "ft-both")

# Total optimizer steps taken in this process; lets callers check that a
# cached pipeline stage really did no training.
STEP_COUNTER = {"steps": 0}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    optimizer: str = "adam"
    lr_init: float = 0.01
    lr_schedule: str = "cosine-annealing"
    lr_floor: float = 0.0001
    batch_size: int = 128
    seed: int = 0
    loss: str = "cross-entropy"
    weight_decay: float = 0.0
    # L1 pull on gate probabilities; keeps the policy from switching every gate on
    gate_sparsity: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidSpec("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidSpec(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine-annealing", "constant"):
            raise InvalidSpec(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.loss != "cross-entropy":
            raise InvalidSpec(f"unknown loss {self.loss!r}")
        if self.lr_floor < 0 or self.lr_init < 0:
            raise InvalidSpec("learning rates must be non-negative")
        if self.lr_schedule == "cosine-annealing" and not self.lr_init > self.lr_floor:
            raise InvalidSpec("cosine annealing needs lr_init > lr_floor")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; cosine reaches lr_floor on the last epoch."""
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.lr_init
        t = epoch / (self.epochs - 1)
        return self.lr_floor + 0.5 * (self.lr_init - self.lr_floor) * (1.0 + math.cos(math.pi * t))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.train_acc:.6f}\t{self.test_acc:.6f}\t{self.lr:.8g}"


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr_init, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr_init, momentum=0.9, weight_decay=cfg.weight_decay)


def batches(indices, batch_size: int, rng: np.random.Generator | None):
    idx = np.asarray(indices, dtype=np.int64)
    if rng is not None:
        idx = idx[rng.permutation(len(idx))]
    for i in range(0, len(idx), batch_size):
        yield idx[i:i + batch_size]


def set_trainable(net: DynamicNet, mode: str) -> list[str]:
    """Freeze the subnet ``mode`` leaves untouched; returns frozen parameter names."""
    if mode not in FINETUNE_MODES:
        raise InvalidSpec(f"unknown fine-tune mode {mode!r}")
    frozen_prefix = {"ft-policy": "main_net.", "ft-main": "policy_net.", "ft-both": None}[mode]
    frozen = []
    for name, p in net.named_parameters():
        is_frozen = frozen_prefix is not None and name.startswith(frozen_prefix)
        p.requires_grad_(not is_frozen)
        if is_frozen:
            frozen.append(name)
    return frozen


def _train_mode(net: DynamicNet, frozen_subnet: str | None) -> None:
    net.train()
    # running statistics of a frozen subnet must not drift
    if frozen_subnet == "main":
        net.main_net.eval()
    elif frozen_subnet == "policy":
        net.policy_net.eval()


@torch.no_grad()
def evaluate_accuracy(net: DynamicNet, pool, indices, batch_size: int = 500) -> float:
    """Fraction of ``indices`` whose argmax prediction equals the label."""
    if len(indices) == 0:
        raise EmptySet("cannot evaluate accuracy on an empty index set")
    was = net.training
    net.eval()
    correct = 0
    for b in batches(indices, batch_size, None):
        x, y = pool.tensors(b)
        logits, _ = net(x, gate_mode="hard")
        correct += int((logits.argmax(1) == y).sum())
    net.train(was)
    return correct / len(indices)


def run_epochs(net: DynamicNet, pool, train_idx, test_idx, cfg: TrainConfig, *,
               frozen_subnet: str | None = None, log_path=None, epoch_hook=None,
               batch_hook=None) -> list[EpochStats]:
    """The shared supervised loop behind target, shadow and defended training.

    ``batch_hook(x, y, logits, gates, epoch)`` may return an extra loss term;
    ``epoch_hook(epoch)`` runs after each epoch.
    """
    cfg.validate()
    if len(train_idx) == 0:
        raise EmptySet("training index set is empty")
    params = [p for p in net.parameters() if p.requires_grad]
    opt = _make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            _train_mode(net, frozen_subnet)
            tot_loss, correct, seen = 0.0, 0, 0
            for b in batches(train_idx, cfg.batch_size, rng):
                x, y = pool.tensors(b)
                logits, gates = net(x)
                loss = F.cross_entropy(logits, y)
                if cfg.gate_sparsity:
                    loss = loss + cfg.gate_sparsity * gates.mean()
                if batch_hook is not None:
                    extra = batch_hook(x, y, logits, gates, epoch)
                    if extra is not None:
                        loss = loss + extra
                if not torch.isfinite(loss):
                    raise DivergedTraining(f"non-finite loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                STEP_COUNTER["steps"] += 1
                tot_loss += float(loss.detach()) * len(b)
                correct += int((logits.detach().argmax(1) == y).sum())
                seen += len(b)
            test_acc = evaluate_accuracy(net, pool, test_idx) if len(test_idx) else float("nan")
            stats = EpochStats(epoch, tot_loss / seen, correct / seen, test_acc, lr)
            history.append(stats)
            log.debug("epoch %s", stats.line())
            if fh is not None:
                fh.write(stats.line() + "\n")
                fh.flush()
            if epoch_hook is not None:
                epoch_hook(epoch)
    finally:
        if fh is not None:
            fh.close()
    net.eval()
    return history


def train_target(net: DynamicNet, pool, partitions, cfg: TrainConfig, *,
                 log_path=None, ckpt_path=None, which: str = "target") -> tuple[DynamicNet, list[EpochStats]]:
    """Train ``net`` from its current (random) state on ``{which}_train``.

    ``which="shadow"`` gives the from-scratch shadow model used by the
    logits-only baseline.
    """
    train_idx = getattr(partitions, f"{which}_train")
    test_idx = getattr(partitions, f"{which}_test")
    torch.manual_seed(cfg.seed)
    history = run_epochs(net, pool, train_idx, test_idx, cfg, log_path=log_path)
    net.origin = "scratch" if which == "target" else "shadow-scratch"
    if ckpt_path is not None:
        save_model(net, ckpt_path, train_acc=history[-1].train_acc, test_acc=history[-1].test_acc)
    return net, history


def _snapshot(net: DynamicNet, names) -> dict:
    params = dict(net.named_parameters())
    return {n: params[n].detach().clone() for n in names}


def _check_frozen(net: DynamicNet, snap: dict, epoch) -> None:
    params = dict(net.named_parameters())
    for n, ref in snap.items():
        if not torch.equal(params[n], ref):
            raise FrozenViolation(f"frozen parameter {n} changed during epoch {epoch}")


def finetune_shadow(f_t: DynamicNet, pool, partitions, mode: str, cfg: TrainConfig, *,
                    log_path=None, ckpt_path=None) -> tuple[DynamicNet, list[EpochStats]]:
    """Copy the target and fine-tune part of it on the shadow partitions.

    ``ft-main`` freezes the policy network, ``ft-policy`` the main network,
    ``ft-both`` nothing. The frozen subnet (parameters and norm statistics)
    is verified bitwise after every epoch.
    """
    if len(partitions.shadow_train) == 0:
        raise EmptySet("shadow_train is empty")
    f_s = copy.deepcopy(f_t)
    frozen = set_trainable(f_s, mode)
    frozen_subnet = {"ft-policy": "main", "ft-main": "policy", "ft-both": None}[mode]
    snap = _snapshot(f_s, frozen)
    buffers = {n: b.clone() for n, b in f_s.named_buffers()
               if frozen_subnet and n.startswith(frozen_subnet + "_net.")}

    def check(epoch):
        _check_frozen(f_s, snap, epoch)
        cur = dict(f_s.named_buffers())
        for n, ref in buffers.items():
            if not torch.equal(cur[n], ref):
                raise FrozenViolation(f"frozen buffer {n} changed during epoch {epoch}")

    torch.manual_seed(cfg.seed)
    history = run_epochs(f_s, pool, partitions.shadow_train, partitions.shadow_test, cfg,
                         frozen_subnet=frozen_subnet, log_path=log_path, epoch_hook=check)
    for p in f_s.parameters():
        p.requires_grad_(True)
    f_s.origin = f"finetune:{mode}"
    if ckpt_path is not None:
        save_model(f_s, ckpt_path, mode=mode, train_acc=history[-1].train_acc,
                   test_acc=history[-1].test_acc)
    return f_s, history


def shadow_config(target_cfg: TrainConfig, fraction: float = 0.25, seed: int | None = None) -> TrainConfig:
    """Fine-tuning budget derived from the target recipe (default a quarter of the epochs)."""
    return replace(target_cfg, epochs=max(1, round(target_cfg.epochs * fraction)),
                   seed=target_cfg.seed if seed is None else seed)

