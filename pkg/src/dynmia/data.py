"""Dataset pools, four-way partitioning and the partition manifest format."""

from __future__ import annotations

import math
import os
import pickle
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (BudgetExceeded, CorruptData, CorruptRecord, DatasetNotFound,
                     InvalidSpec, VersionMismatch)

MANIFEST_HEADER = "dynmia-splits v1"
PARTITION_NAMES = ("target_train", "target_test", "shadow_train", "shadow_test", "reference")

_SYNTHETIC_RE = re.compile(r"^synthetic-(\d+)class$")


@dataclass(frozen=True)
class SplitSpec:
    dataset_name: str
    seed: int
    n_target_train: int
    n_target_test: int
    n_shadow_train: int
    n_shadow_test: int
    overlap_fraction: float = 0.0
    # defender-private non-member pool for adversarial regularization; 0 = none
    n_reference: int = 0

    @property
    def n_overlap(self) -> int:
        # half-up rounding so the count does not depend on banker's rounding
        return int(math.floor(self.overlap_fraction * self.n_shadow_train + 0.5))

    def validate(self) -> None:
        counts = (self.n_target_train, self.n_target_test, self.n_shadow_train, self.n_shadow_test)
        if any(int(c) != c or c < 1 for c in counts):
            raise InvalidSpec(f"all partition counts must be integers >= 1, got {counts}")
        if self.n_reference < 0:
            raise InvalidSpec("n_reference must be >= 0")
        if not (0.0 <= self.overlap_fraction <= 1.0) or math.isnan(self.overlap_fraction):
            raise InvalidSpec(f"overlap_fraction must lie in [0, 1], got {self.overlap_fraction}")
        if self.seed < 0:
            raise InvalidSpec("seed must be unsigned")
        if self.n_overlap > self.n_target_train:
            raise BudgetExceeded(
                f"overlap of {self.n_overlap} samples exceeds n_target_train={self.n_target_train}")

    def required_budget(self) -> int:
        """Number of distinct pool indices the partitioning needs."""
        fresh_shadow = self.n_shadow_train - self.n_overlap
        # shadow_test may borrow from target_test once the fresh supply runs out
        return (self.n_target_train + fresh_shadow + max(self.n_target_test, self.n_shadow_test)
                + self.n_reference)


@dataclass
class DataPartitions:
    target_train: list[int]
    target_test: list[int]
    shadow_train: list[int]
    shadow_test: list[int]
    reference: list[int] = field(default_factory=list)
    seed: int = 0

    def items(self):
        for name in PARTITION_NAMES:
            part = getattr(self, name)
            if name == "reference" and not part:
                continue
            yield name, part

    def check(self) -> None:
        """Assert the membership-hygiene invariants; raises AssertionError."""
        tt, te = set(self.target_train), set(self.target_test)
        st, se = set(self.shadow_train), set(self.shadow_test)
        ref = set(self.reference)
        assert not tt & te, "target_train and target_test intersect"
        assert not st & se, "shadow_train and shadow_test intersect"
        assert not te & st, "target_test and shadow_train intersect"
        assert not se & tt, "shadow_test and target_train intersect"
        assert not ref & (tt | te | st | se), "reference intersects another partition"
        for name, part in self.items():
            assert len(set(part)) == len(part), f"duplicate indices in {name}"


def _seeded_order(indices: np.ndarray, rng: np.random.Generator) -> list[int]:
    out = np.sort(indices)
    rng.shuffle(out)
    return [int(i) for i in out]


def make_partitions(spec: SplitSpec, pool_size: int) -> DataPartitions:
    """Split ``range(pool_size)`` into target/shadow train/test index lists.

    ``round(overlap_fraction * n_shadow_train)`` shadow-train indices are drawn
    from target_train; everything else is fresh. Test sets never touch either
    train set. shadow_test prefers fresh indices and only reuses target_test
    indices if the pool is too small to keep them apart.
    """
    spec.validate()
    if spec.required_budget() > pool_size:
        raise BudgetExceeded(
            f"split needs {spec.required_budget()} distinct samples but the pool has {pool_size}")

    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(pool_size)
    pos = 0

    def take(n):
        nonlocal pos
        out = perm[pos:pos + n]
        pos += n
        return out

    target_train = take(spec.n_target_train)
    target_test = take(spec.n_target_test)
    n_overlap = spec.n_overlap
    shared = rng.choice(np.sort(target_train), size=n_overlap, replace=False)
    shadow_train = np.concatenate([shared, take(spec.n_shadow_train - n_overlap)])
    reference = take(spec.n_reference)
    n_fresh = min(spec.n_shadow_test, pool_size - pos)
    fresh = take(n_fresh)
    borrowed = rng.choice(np.sort(target_test), size=spec.n_shadow_test - n_fresh, replace=False)
    shadow_test = np.concatenate([fresh, borrowed])

    return DataPartitions(
        target_train=_seeded_order(target_train, rng),
        target_test=_seeded_order(target_test, rng),
        shadow_train=_seeded_order(shadow_train, rng),
        shadow_test=_seeded_order(shadow_test, rng),
        reference=_seeded_order(reference, rng),
        seed=spec.seed,
    )


def write_manifest(parts: DataPartitions, path) -> None:
    lines = [MANIFEST_HEADER]
    for name, idx in parts.items():
        lines.append(f"{name} {parts.seed} {','.join(str(i) for i in idx)}")
    data = ("\n".join(lines) + "\n").encode("ascii")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_manifest(path) -> DataPartitions:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise CorruptRecord(f"{path}: not an ASCII manifest") from exc
    if not text.endswith("\n"):
        raise CorruptRecord(f"{path}: truncated manifest (missing final newline)")
    lines = text[:-1].split("\n")
    if lines[0] != MANIFEST_HEADER:
        raise VersionMismatch(f"{path}: expected header {MANIFEST_HEADER!r}, got {lines[0]!r}")
    found, seeds = {}, set()
    for ln in lines[1:]:
        parts = ln.split(" ")
        if len(parts) != 3 or parts[0] not in PARTITION_NAMES or parts[0] in found:
            raise CorruptRecord(f"{path}: malformed manifest line {ln[:60]!r}")
        try:
            seeds.add(int(parts[1]))
            found[parts[0]] = [int(i) for i in parts[2].split(",")] if parts[2] else []
        except ValueError as exc:
            raise CorruptRecord(f"{path}: non-integer entry in line {parts[0]!r}") from exc
    missing = [n for n in PARTITION_NAMES[:4] if n not in found]
    if missing or len(seeds) != 1:
        raise CorruptRecord(f"{path}: missing partitions {missing}" if missing
                            else f"{path}: inconsistent seeds {sorted(seeds)}")
    return DataPartitions(seed=seeds.pop(), reference=found.pop("reference", []), **found)


# --------------------------------------------------------------------------
# pools
# --------------------------------------------------------------------------

def _channel_stats(samples: np.ndarray, chunk: int = 4096):
    # chunked so a uint8 pool is never copied to float in full
    scale = 255.0 if samples.dtype == np.uint8 else 1.0
    s = np.zeros(samples.shape[1])
    s2 = np.zeros(samples.shape[1])
    for i in range(0, len(samples), chunk):
        x = samples[i:i + chunk].astype(np.float64) / scale
        s += x.sum(axis=(0, 2, 3))
        s2 += (x * x).sum(axis=(0, 2, 3))
    n = len(samples) * samples.shape[2] * samples.shape[3]
    mean = s / n
    std = np.sqrt(np.maximum(s2 / n - mean * mean, 0.0)) + 1e-8
    return mean.astype(np.float32), std.astype(np.float32)


@dataclass
class Pool:
    """The merged train+test collection of one dataset.

    ``samples`` is ``(N, 3, H, W)``; uint8 for image datasets, float32 for the
    synthetic generator.
    """

    name: str
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean, self.std = _channel_stats(self.samples)

    @property
    def size(self) -> int:
        return len(self.labels)

    def __iter__(self):
        # allows ``samples, labels, pool_size = load_pool(...)``
        return iter((self.samples, self.labels, self.size))

    def tensors(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        idx = np.asarray(indices, dtype=np.int64)
        x = self.samples[idx].astype(np.float32)
        if self.samples.dtype == np.uint8:
            x /= 255.0
        x = (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return torch.from_numpy(x), torch.from_numpy(self.labels[idx].astype(np.int64))


def synthetic_pool(num_classes: int = 2, n: int = 2000, seed: int = 0,
                   separation: float = 2.0, size: int = 32) -> Pool:
    """Class-conditional Gaussian images: a fixed mean pattern per class plus N(0, 1) pixel noise.

    Each class mean is an oriented colour grating (random direction, 2-5
    cycles per image, random phase per channel) scaled so that its RMS pixel
    value is ``separation / 2``. Classes overlap; a network at 100% train
    accuracy has memorised part of the noise.
    """
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    means = np.empty((num_classes, 3, size, size))
    for k in range(num_classes):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 5.0) / size
        phase = rng.uniform(0, 2 * np.pi, size=3)
        wave = 2 * np.pi * freq * (np.cos(theta) * ii + np.sin(theta) * jj)
        # cos has RMS 1/sqrt(2)
        means[k] = np.sqrt(2.0) * np.cos(wave[None] + phase[:, None, None])
    means *= separation / 2.0
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    samples = means[labels] + rng.standard_normal((n, 3, size, size))
    return Pool(f"synthetic-{num_classes}class", samples.astype(np.float32),
                labels.astype(np.int64), num_classes)


def _md5_ok(path: Path, md5: str) -> bool:
    from torchvision.datasets.utils import check_integrity
    return check_integrity(str(path), md5)


def _load_cifar(root: Path, name: str) -> Pool:
    from torchvision.datasets import CIFAR10, CIFAR100

    cls = CIFAR10 if name == "cifar10" else CIFAR100
    base = root / cls.base_folder
    files = cls.train_list + cls.test_list
    if not base.is_dir() or any(not (base / f).is_file() for f, _ in files):
        raise DatasetNotFound(f"{name}: expected {cls.base_folder}/ under {root}")
    xs, ys = [], []
    for fname, md5 in files:
        if not _md5_ok(base / fname, md5):
            raise CorruptData(f"{name}: checksum mismatch for {fname}")
        with open(base / fname, "rb") as fh:
            entry = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(entry["labels"] if "labels" in entry else entry["fine_labels"]))
    return Pool(name, np.concatenate(xs), np.concatenate(ys).astype(np.int64),
                10 if name == "cifar10" else 100)


def _load_stl10(root: Path) -> Pool:
    from torchvision.datasets import STL10

    base = root / STL10.base_folder
    xs, ys = [], []
    for split in ("train", "test"):
        xf, yf = f"{split}_X.bin", f"{split}_y.bin"
        if not (base / xf).is_file() or not (base / yf).is_file():
            raise DatasetNotFound(f"stl10: expected {STL10.base_folder}/{xf} under {root}")
        md5s = dict(STL10.train_list + STL10.test_list)
        for f in (xf, yf):
            if f in md5s and not _md5_ok(base / f, md5s[f]):
                raise CorruptData(f"stl10: checksum mismatch for {f}")
        x = np.fromfile(base / xf, dtype=np.uint8)
        if x.size % (3 * 96 * 96):
            raise CorruptData(f"stl10: {xf} has a partial image")
        # stored column-major per channel
        xs.append(x.reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2))
        ys.append(np.fromfile(base / yf, dtype=np.uint8).astype(np.int64) - 1)
    return Pool("stl10", np.ascontiguousarray(np.concatenate(xs)), np.concatenate(ys), 10)


def _load_gtsrb(root: Path, size: int = 32) -> Pool:
    from PIL import Image
    from torchvision.datasets import GTSRB

    xs, ys = [], []
    for split in ("train", "test"):
        try:
            ds = GTSRB(str(root), split=split, download=False)
        except RuntimeError as exc:
            raise DatasetNotFound(f"gtsrb: {exc}") from exc
        for path, label in ds._samples:
            try:
                img = Image.open(path).convert("RGB").resize((size, size), Image.BILINEAR)
            except OSError as exc:
                raise CorruptData(f"gtsrb: unreadable image {path}") from exc
            xs.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
            ys.append(label)
    labels = np.asarray(ys, dtype=np.int64)
    return Pool("gtsrb", np.stack(xs), labels, int(labels.max()) + 1)


def default_data_root() -> Path:
    return Path(os.environ.get("DYNMIA_DATA_ROOT", "~/.cache/dynmia")).expanduser()


def load_pool(dataset_name: str, root=None, seed: int = 0, synthetic_n: int = 2000,
              synthetic_separation: float = 2.0) -> Pool:
    """Load a dataset as one merged pool (train and test splits concatenated).

    ``synthetic-<k>class`` is generated in memory; image datasets are read
    from ``root`` (default ``$DYNMIA_DATA_ROOT``) in their standard release
    layout and never downloaded.
    """
    m = _SYNTHETIC_RE.match(dataset_name)
    if m:
        return synthetic_pool(int(m.group(1)), n=synthetic_n, seed=seed, separation=synthetic_separation)
    root = Path(root).expanduser() if root is not None else default_data_root()
    if dataset_name in ("cifar10", "cifar100"):
        return _load_cifar(root, dataset_name)
    if dataset_name == "stl10":
        return _load_stl10(root)
    if dataset_name == "gtsrb":
        return _load_gtsrb(root)
    raise DatasetNotFound(f"unknown dataset {dataset_name!r}")
