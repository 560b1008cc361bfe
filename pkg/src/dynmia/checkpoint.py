"""Single-file checkpoint container shared by dynamic nets and attack models."""

import os
import pickle
from pathlib import Path

import torch

from .errors import CorruptRecord, VersionMismatch

CKPT_HEADER = "dynmia-ckpt v1"


def save_container(path, kind: str, payload: dict) -> Path:
    """Write ``payload`` atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save({"header": CKPT_HEADER, "kind": kind, **payload}, tmp)
    os.replace(tmp, path)
    return path


def load_container(path, kind: str | None = None) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (EOFError, RuntimeError, OSError, ValueError, pickle.UnpicklingError) as exc:
        # torch raises a mix of these for truncated or non-zip files
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptRecord(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("header") != CKPT_HEADER:
        got = blob.get("header") if isinstance(blob, dict) else type(blob).__name__
        raise VersionMismatch(f"{path}: expected {CKPT_HEADER!r}, got {got!r}")
    if kind is not None and blob.get("kind") != kind:
        raise VersionMismatch(f"{path}: expected a {kind!r} checkpoint, got {blob.get('kind')!r}")
    return blob
