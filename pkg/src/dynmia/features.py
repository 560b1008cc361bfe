"""Per-sample attack features and the ``dynmia-features v1`` text format.

File layout (UTF-8, ``\\n`` line ends, every line newline-terminated)::

    dynmia-features v1
    {"model_id": ..., "gate_dim": N, "num_classes": C, "act_dim": ..., "grad_dim": ...,
     "n_records": R, "fingerprint": ...}
    {"id": 17, "cf": "0110...", "logits": [1.25, -0.5, ...], "y": 1}
    ...

Record keys always appear in the order ``id, cf, logits, act, grad, y``;
``act``/``grad`` are present only when the header's dimension for them is
non-null. ``cf`` is a string of ``0``/``1`` characters. Floats are float32
values written in their shortest round-trip decimal form.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptRecord, MissingLabels, ShapeMismatch, VersionMismatch
from .models import DynamicNet, extract_last_conv, forward

FEATURES_HEADER = "dynmia-features v1"
_HEADER_KEYS = ("model_id", "gate_dim", "num_classes", "act_dim", "grad_dim", "n_records", "fingerprint")


@dataclass
class FeatureRecord:
    sample_id: int
    control_flow: np.ndarray
    logits: np.ndarray
    membership: int
    activation: np.ndarray | None = None
    gradient: np.ndarray | None = None


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and bool(np.array_equal(a, b))


def _rows(a, n: int, dtype) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    if a.ndim == 2:
        return a
    return a.reshape(n, -1) if n else a.reshape(0, 0)


@dataclass(eq=False)
class FeatureFile:
    """Column-oriented store of the records extracted from one model and index set."""

    ids: np.ndarray
    control_flow: np.ndarray
    logits: np.ndarray
    membership: np.ndarray
    activation: np.ndarray | None = None
    gradient: np.ndarray | None = None
    model_id: str = ""
    fingerprint: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.ids)
        self.control_flow = _rows(self.control_flow, n, np.uint8)
        self.logits = _rows(self.logits, n, np.float32)
        self.membership = np.asarray(self.membership, dtype=np.uint8)
        if self.activation is not None:
            self.activation = _rows(self.activation, n, np.float32)
        if self.gradient is not None:
            self.gradient = _rows(self.gradient, n, np.float32)
        self.validate()

    @property
    def gate_dim(self) -> int:
        return self.control_flow.shape[1]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        n = len(self.ids)
        for name in ("control_flow", "logits", "membership", "activation", "gradient"):
            a = getattr(self, name)
            if a is not None and len(a) != n:
                raise ShapeMismatch(f"{name} has {len(a)} rows for {n} ids")
        if len(np.unique(self.ids)) != n:
            raise ShapeMismatch("sample ids must be unique within a feature file")
        if self.control_flow.size and self.control_flow.max(initial=0) > 1:
            raise ShapeMismatch("control-flow entries must be 0 or 1")
        if self.membership.size and self.membership.max(initial=0) > 1:
            raise ShapeMismatch("membership labels must be 0 or 1")
        for name in ("logits", "activation", "gradient"):
            a = getattr(self, name)
            if a is not None and not np.isfinite(a).all():
                raise ShapeMismatch(f"{name} contains non-finite values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureFile):
            return NotImplemented
        return (self.model_id == other.model_id and self.fingerprint == other.fingerprint
                and all(_same(getattr(self, k), getattr(other, k))
                        for k in ("ids", "control_flow", "logits", "membership", "activation", "gradient")))

    def records(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> FeatureRecord:
        return FeatureRecord(
            sample_id=int(self.ids[i]), control_flow=self.control_flow[i], logits=self.logits[i],
            membership=int(self.membership[i]),
            activation=None if self.activation is None else self.activation[i],
            gradient=None if self.gradient is None else self.gradient[i])

    def subset(self, rows) -> "FeatureFile":
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda a: None if a is None else a[rows]
        return FeatureFile(self.ids[rows], self.control_flow[rows], self.logits[rows],
                           self.membership[rows], pick(self.activation), pick(self.gradient),
                           self.model_id, self.fingerprint)

    def rows_for(self, sample_ids) -> np.ndarray:
        pos = {int(s): i for i, s in enumerate(self.ids)}
        return np.asarray([pos[int(s)] for s in sample_ids], dtype=np.int64)


def concat(files) -> FeatureFile:
    """Stack files with identical dimensions (e.g. members then non-members)."""
    files = list(files)
    first = files[0]
    for f in files[1:]:
        if (f.gate_dim, f.num_classes) != (first.gate_dim, first.num_classes):
            raise ShapeMismatch("cannot concatenate feature files of different dimensions")
        for name in ("activation", "gradient"):
            a, b = getattr(first, name), getattr(f, name)
            if (a is None) != (b is None) or (a is not None and a.shape[1] != b.shape[1]):
                raise ShapeMismatch(f"{name} presence/dimension differs between files")
    cat = lambda k: None if getattr(first, k) is None else np.concatenate([getattr(f, k) for f in files])
    return FeatureFile(cat("ids"), cat("control_flow"), cat("logits"), cat("membership"),
                       cat("activation"), cat("gradient"), first.model_id, first.fingerprint)


# --------------------------------------------------------------------------
# extraction
# --------------------------------------------------------------------------

def extract_features(net: DynamicNet, inputs: torch.Tensor, sample_ids, membership_label: int, *,
                     labels: torch.Tensor | None = None, with_gradients: bool = False,
                     with_activations: bool = False, model_id: str = "", fingerprint: str = "",
                     batch_size: int = 500) -> FeatureFile:
    """One record per input: binary control flow, raw logits and the given label."""
    if membership_label not in (0, 1):
        raise ValueError("membership_label must be 0 or 1")
    if with_gradients and labels is None:
        raise MissingLabels("gradient features need the true label of every sample")
    ids = np.asarray(sample_ids, dtype=np.int64)
    if len(ids) != len(inputs):
        raise ShapeMismatch(f"{len(ids)} ids for {len(inputs)} inputs")
    cfs, logits, acts, grads = [], [], [], []
    for i in range(0, len(ids), batch_size):
        x = inputs[i:i + batch_size]
        lg, cf = forward(net, x)
        cfs.append(cf.to(torch.uint8).numpy())
        logits.append(lg.float().numpy())
        if with_gradients or with_activations:
            y = labels[i:i + batch_size] if labels is not None else lg.argmax(1)
            a, g = extract_last_conv(net, x, y)
            acts.append(a.float().numpy())
            grads.append(g.float().numpy())
    stack = lambda parts, on: np.concatenate(parts) if on else None
    return FeatureFile(
        ids=ids, control_flow=np.concatenate(cfs), logits=np.concatenate(logits),
        membership=np.full(len(ids), membership_label, dtype=np.uint8),
        activation=stack(acts, with_activations), gradient=stack(grads, with_gradients),
        model_id=model_id, fingerprint=fingerprint)


def extract_from_pool(net: DynamicNet, pool, indices, membership_label: int, **kw) -> FeatureFile:
    x, y = pool.tensors(indices)
    return extract_features(net, x, indices, membership_label, labels=y, **kw)


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

def _floats(a: np.ndarray) -> str:
    # str(np.float32) is the shortest decimal that parses back to the same float32
    return "[" + ", ".join(str(v) for v in a) + "]"


def dumps_record(ff: FeatureFile, i: int) -> str:
    parts = [f'"id": {int(ff.ids[i])}',
             '"cf": "' + "".join("1" if b else "0" for b in ff.control_flow[i]) + '"',
             f'"logits": {_floats(ff.logits[i])}']
    if ff.activation is not None:
        parts.append(f'"act": {_floats(ff.activation[i])}')
    if ff.gradient is not None:
        parts.append(f'"grad": {_floats(ff.gradient[i])}')
    parts.append(f'"y": {int(ff.membership[i])}')
    return "{" + ", ".join(parts) + "}"


def write_features(ff: FeatureFile, path) -> Path:
    ff.validate()
    header = {
        "model_id": ff.model_id,
        "gate_dim": ff.gate_dim,
        "num_classes": ff.num_classes,
        "act_dim": None if ff.activation is None else ff.activation.shape[1],
        "grad_dim": None if ff.gradient is None else ff.gradient.shape[1],
        "n_records": len(ff),
        "fingerprint": ff.fingerprint,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FEATURES_HEADER + "\n")
        fh.write(json.dumps(header) + "\n")
        for i in range(len(ff)):
            fh.write(dumps_record(ff, i) + "\n")
    os.replace(tmp, path)
    return path


def _vector(rec: dict, key: str, dim: int, lineno: int) -> list:
    v = rec.get(key)
    if not isinstance(v, list) or len(v) != dim:
        raise CorruptRecord(f"line {lineno}: {key!r} must be a list of {dim} numbers")
    return v


def read_features(path) -> FeatureFile:
    raw = Path(path).read_text(encoding="utf-8")
    if not raw.startswith(FEATURES_HEADER + "\n"):
        first = raw.split("\n", 1)[0]
        if first.startswith("dynmia-features"):
            raise VersionMismatch(f"{path}: unsupported version {first!r}")
        raise CorruptRecord(f"{path}: missing {FEATURES_HEADER!r} header")
    if not raw.endswith("\n"):
        raise CorruptRecord(f"{path}: truncated (last record has no line end)")
    lines = raw[:-1].split("\n")
    try:
        header = json.loads(lines[1])
    except (IndexError, json.JSONDecodeError) as exc:
        raise CorruptRecord(f"{path}: unreadable header") from exc
    if not isinstance(header, dict) or tuple(header) != _HEADER_KEYS:
        raise CorruptRecord(f"{path}: header keys must be {_HEADER_KEYS}")
    body = lines[2:]
    if len(body) != header["n_records"]:
        raise CorruptRecord(f"{path}: header promises {header['n_records']} records, found {len(body)}")
    g, c = header["gate_dim"], header["num_classes"]
    ad, gd = header["act_dim"], header["grad_dim"]
    keys = ["id", "cf", "logits"] + (["act"] if ad is not None else []) + (["grad"] if gd is not None else []) + ["y"]
    n = len(body)
    ids = np.empty(n, dtype=np.int64)
    cf = np.empty((n, g), dtype=np.uint8)
    logits = np.empty((n, c), dtype=np.float32)
    y = np.empty(n, dtype=np.uint8)
    act = np.empty((n, ad), dtype=np.float32) if ad is not None else None
    grad = np.empty((n, gd), dtype=np.float32) if gd is not None else None
    for i, ln in enumerate(body):
        lineno = i + 3
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"{path}: line {lineno} is not a valid record") from exc
        if not isinstance(rec, dict) or list(rec) != keys:
            raise CorruptRecord(f"{path}: line {lineno} keys must be {keys}")
        bits = rec["cf"]
        if not isinstance(bits, str) or len(bits) != g or set(bits) - {"0", "1"}:
            raise CorruptRecord(f"{path}: line {lineno} control flow must be {g} binary digits")
        if not isinstance(rec["id"], int) or rec["y"] not in (0, 1):
            raise CorruptRecord(f"{path}: line {lineno} has a bad id or membership label")
        ids[i] = rec["id"]
        cf[i] = np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0")
        logits[i] = _vector(rec, "logits", c, lineno)
        if act is not None:
            act[i] = _vector(rec, "act", ad, lineno)
        if grad is not None:
            grad[i] = _vector(rec, "grad", gd, lineno)
        y[i] = rec["y"]
    try:
        return FeatureFile(ids, cf, logits, y, act, grad, header["model_id"], header["fingerprint"])
    except ShapeMismatch as exc:
        raise CorruptRecord(f"{path}: {exc}") from exc
