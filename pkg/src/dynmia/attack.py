"""Membership attack models trained on shadow features, applied to target features.

Four variants share one design. ``fusion`` reduces the control-flow vector
through a 3-layer branch (-> 128 -> 64 -> 10, ReLU) and feeds that 10-dim
code with the logits into a second 3-layer branch ending in one logistic
unit. ``gradient`` and ``activation`` swap the control-flow input for the
last-conv gradient or activation. ``logits-only`` drops the first branch.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_container, save_container
from .errors import DimensionMismatch, InvalidSpec, MissingFeature, SingleClassData
from .features import FeatureFile, FeatureRecord, concat, extract_from_pool

VARIANTS = ("fusion", "logits-only", "gradient", "activation")
_BRANCH_SOURCE = {"fusion": "control_flow", "gradient": "gradient", "activation": "activation"}


@dataclass(frozen=True)
class AttackTrainConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 1000
    seed: int = 0
    hidden: tuple[int, int] = (128, 64)
    bottleneck: int = 10
    softmax_inputs: bool = False
    # z-score every input column with statistics of the training set
    standardize: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.bottleneck < 1:
            raise InvalidSpec("attack epochs, batch_size, lr and bottleneck must be positive")


def _mlp(din: int, hidden, dout: int) -> nn.Sequential:
    h1, h2 = hidden
    return nn.Sequential(nn.Linear(din, h1), nn.ReLU(), nn.Linear(h1, h2), nn.ReLU(), nn.Linear(h2, dout))


class AttackModel(nn.Module):
    def __init__(self, variant: str, branch_dim: int, num_classes: int,
                 cfg: AttackTrainConfig = AttackTrainConfig()):
        super().__init__()
        if variant not in VARIANTS:
            raise InvalidSpec(f"unknown attack variant {variant!r}")
        self.variant = variant
        self.branch_dim = branch_dim if variant != "logits-only" else 0
        self.num_classes = num_classes
        self.cfg = cfg
        if variant != "logits-only":
            self.branch1 = nn.Sequential(_mlp(branch_dim, cfg.hidden, cfg.bottleneck), nn.ReLU())
            din2 = num_classes + cfg.bottleneck
        else:
            self.branch1 = None
            din2 = num_classes
        self.branch2 = _mlp(din2, cfg.hidden, 1)
        self.register_buffer("b_mean", torch.zeros(max(self.branch_dim, 1)))
        self.register_buffer("b_std", torch.ones(max(self.branch_dim, 1)))
        self.register_buffer("o_mean", torch.zeros(num_classes))
        self.register_buffer("o_std", torch.ones(num_classes))

    def forward(self, branch_in: torch.Tensor | None, logits: torch.Tensor) -> torch.Tensor:
        """Membership logit (pre-sigmoid), shape ``(B,)``."""
        o = torch.softmax(logits, 1) if self.cfg.softmax_inputs else logits
        o = (o - self.o_mean) / self.o_std
        if self.branch1 is None:
            return self.branch2(o).squeeze(1)
        b = (branch_in - self.b_mean) / self.b_std
        return self.branch2(torch.cat([o, self.branch1(b)], 1)).squeeze(1)

    def fit_standardizer(self, branch_in: torch.Tensor | None, logits: torch.Tensor) -> None:
        o = torch.softmax(logits, 1) if self.cfg.softmax_inputs else logits
        self.o_mean.copy_(o.mean(0))
        self.o_std.copy_(_safe_std(o))
        if self.branch1 is not None:
            self.b_mean.copy_(branch_in.mean(0))
            self.b_std.copy_(_safe_std(branch_in))


def _safe_std(a: torch.Tensor) -> torch.Tensor:
    s = a.std(0, unbiased=False)
    # constant columns carry no signal; leave them centred at zero
    return torch.where(s > 1e-12, s, torch.ones_like(s))


def branch_input(ff: FeatureFile, variant: str) -> np.ndarray | None:
    if variant == "logits-only":
        return None
    arr = getattr(ff, _BRANCH_SOURCE[variant])
    if arr is None:
        raise MissingFeature(f"the {variant} attack needs {_BRANCH_SOURCE[variant]} vectors in the feature file")
    return arr


def _tensors(model_or_variant, ff: FeatureFile):
    variant = model_or_variant if isinstance(model_or_variant, str) else model_or_variant.variant
    b = branch_input(ff, variant)
    bt = None if b is None else torch.from_numpy(b.astype(np.float32))
    return bt, torch.from_numpy(ff.logits.astype(np.float32))


def _check_compatible(a: FeatureFile, b: FeatureFile, variant: str) -> None:
    if a.num_classes != b.num_classes:
        raise DimensionMismatch(f"logit dims differ: {a.num_classes} vs {b.num_classes}")
    if variant != "logits-only":
        xa, xb = branch_input(a, variant), branch_input(b, variant)
        if xa.shape[1] != xb.shape[1]:
            raise DimensionMismatch(f"{variant} dims differ: {xa.shape[1]} vs {xb.shape[1]}")


def train_attack(member_file: FeatureFile, nonmember_file: FeatureFile, variant: str = "fusion",
                 cfg: AttackTrainConfig = AttackTrainConfig(), history: list | None = None) -> AttackModel:
    """Fit an attack model by minimising binary cross-entropy over members (1) and non-members (0)."""
    cfg.validate()
    if variant not in VARIANTS:
        raise InvalidSpec(f"unknown attack variant {variant!r}")
    if len(member_file) == 0 or len(nonmember_file) == 0:
        raise SingleClassData("attack training needs both members and non-members")
    _check_compatible(member_file, nonmember_file, variant)
    data = concat([member_file, nonmember_file])
    y = np.concatenate([np.ones(len(member_file)), np.zeros(len(nonmember_file))]).astype(np.float32)
    b, o = _tensors(variant, data)
    yt = torch.from_numpy(y)

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = AttackModel(variant, 0 if b is None else b.shape[1], data.num_classes, cfg)
    if cfg.standardize:
        model.fit_standardizer(b, o)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(len(y)))
        total = 0.0
        for i in range(0, len(y), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            z = model(None if b is None else b[idx], o[idx])
            loss = F.binary_cross_entropy_with_logits(z, yt[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        if history is not None:
            history.append(total / len(y))
    model.eval()
    return model


def _strict_unit(p: np.ndarray) -> np.ndarray:
    # float64 sigmoid saturates to exactly 0/1 for |z| > ~37
    return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


@torch.no_grad()
def score_file(model: AttackModel, ff: FeatureFile) -> np.ndarray:
    """Membership scores in (0, 1) for every record of ``ff``."""
    if ff.num_classes != model.num_classes:
        raise DimensionMismatch(f"model expects {model.num_classes} logits, file has {ff.num_classes}")
    b, o = _tensors(model, ff)
    if b is not None and b.shape[1] != model.branch_dim:
        raise DimensionMismatch(f"model expects {model.branch_dim}-dim {model.variant} input, got {b.shape[1]}")
    z = model(b, o).double()
    return _strict_unit(torch.sigmoid(z).numpy())


def score(model: AttackModel, record: FeatureRecord) -> float:
    """Score a single record; the membership decision is ``score >= 0.5``."""
    ff = FeatureFile([record.sample_id], record.control_flow[None], record.logits[None],
                     [record.membership],
                     None if record.activation is None else record.activation[None],
                     None if record.gradient is None else record.gradient[None])
    return float(score_file(model, ff)[0])


def baseline_attack(shadow_scratch, pool, partitions, cfg: AttackTrainConfig = AttackTrainConfig()) -> AttackModel:
    """Logits-only attack from a shadow model trained from random initialisation."""
    if getattr(shadow_scratch, "origin", None) != "shadow-scratch":
        raise InvalidSpec(
            f"baseline needs a shadow trained from scratch, got origin {getattr(shadow_scratch, 'origin', None)!r}")
    members = extract_from_pool(shadow_scratch, pool, partitions.shadow_train, 1, model_id="shadow-scratch")
    nonmembers = extract_from_pool(shadow_scratch, pool, partitions.shadow_test, 0, model_id="shadow-scratch")
    return train_attack(members, nonmembers, "logits-only", cfg)


def comparative_attack(member_file: FeatureFile, nonmember_file: FeatureFile, variant: str,
                       cfg: AttackTrainConfig = AttackTrainConfig()) -> AttackModel:
    """Same architecture as fusion with the gradient or activation vector as branch input."""
    if variant not in ("gradient", "activation"):
        raise InvalidSpec("comparative attacks are 'gradient' or 'activation'")
    branch_input(member_file, variant)
    branch_input(nonmember_file, variant)
    return train_attack(member_file, nonmember_file, variant, cfg)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_attack(model: AttackModel, path, **meta):
    cfg = asdict(model.cfg)
    cfg["hidden"] = list(cfg["hidden"])
    return save_container(path, "attack-model", {
        "variant": model.variant, "branch_dim": model.branch_dim, "num_classes": model.num_classes,
        "config": cfg, "seed": model.cfg.seed, "meta": meta,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    })


def load_attack(path) -> tuple[AttackModel, dict]:
    blob = load_container(path, "attack-model")
    cfg = dict(blob["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    model = AttackModel(blob["variant"], blob["branch_dim"], blob["num_classes"], AttackTrainConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})


def write_scores(path, sample_ids, scores, truth) -> None:
    """Tab-separated ``sample_id score decision truth`` with a header row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "score", "decision", "truth"])
        for sid, s, t in zip(sample_ids, scores, truth):
            w.writerow([int(sid), repr(float(s)), int(s >= 0.5), int(t)])


def read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    ids = np.array([int(r["sample_id"]) for r in rows], dtype=np.int64)
    scores = np.array([float(r["score"]) for r in rows])
    truth = np.array([int(r["truth"]) for r in rows], dtype=np.int64)
    return ids, scores, truth
