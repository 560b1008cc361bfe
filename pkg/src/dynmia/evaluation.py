"""Attack metrics on balanced member/non-member sets, reports and comparison figures."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySet, InvalidSpec, UnbalancedInput


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class EvalReport:
    asr: float
    precision: float | None
    recall: float
    counts: ConfusionCounts
    n_members: int
    n_nonmembers: int
    seed: int | None = None
    fingerprint: str = ""

    def to_dict(self) -> dict:
        c = self.counts
        return {"asr": self.asr, "precision": self.precision, "recall": self.recall,
                "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, "n": c.total,
                "seed": self.seed, "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        counts = ConfusionCounts(d["tp"], d["fp"], d["fn"], d["tn"])
        return cls(d["asr"], d["precision"], d["recall"], counts,
                   counts.tp + counts.fn, counts.fp + counts.tn, d.get("seed"), d.get("fingerprint", ""))


def balanced_sample(member_ids, nonmember_ids, seed: int) -> tuple[list[int], list[int]]:
    """Equal-size seeded draws of ``min(|members|, |non-members|)`` from each side."""
    m = np.asarray(member_ids)
    n = np.asarray(nonmember_ids)
    if len(m) == 0 or len(n) == 0:
        raise EmptySet("balanced sampling needs members and non-members")
    k = min(len(m), len(n))
    rng = np.random.default_rng(seed)
    pm = rng.permutation(len(m))[:k]
    pn = rng.permutation(len(n))[:k]
    return [int(i) for i in m[pm]], [int(i) for i in n[pn]]


def confusion(scores, truth, threshold: float = 0.5) -> ConfusionCounts:
    pred = np.asarray(scores) >= threshold
    truth = np.asarray(truth).astype(bool)
    return ConfusionCounts(tp=int((pred & truth).sum()), fp=int((pred & ~truth).sum()),
                           fn=int((~pred & truth).sum()), tn=int((~pred & ~truth).sum()))


def compute_metrics(scores, truth, threshold: float = 0.5, seed: int | None = None,
                    fingerprint: str = "") -> EvalReport:
    """ASR (accuracy), precision TP/(TP+FP) and recall TP/(TP+FN) of ``score >= threshold``.

    Inputs must hold as many members as non-members. Precision is ``None``
    when the attack predicts no member at all.
    """
    truth = np.asarray(truth)
    if len(truth) == 0:
        raise EmptySet("no scores to evaluate")
    if len(np.asarray(scores)) != len(truth):
        raise InvalidSpec("scores and truth differ in length")
    n_mem = int((truth == 1).sum())
    n_non = int((truth == 0).sum())
    if n_mem + n_non != len(truth):
        raise InvalidSpec("truth labels must be 0 or 1")
    if n_mem != n_non:
        raise UnbalancedInput(f"{n_mem} members vs {n_non} non-members")
    c = confusion(scores, truth, threshold)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    return EvalReport(asr=(c.tp + c.tn) / c.total, precision=precision, recall=c.tp / (c.tp + c.fn),
                      counts=c, n_members=n_mem, n_nonmembers=n_non, seed=seed, fingerprint=fingerprint)


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report.to_dict(), sort_keys=False) + "\n")
    os.replace(tmp, path)
    return path


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _fmt(v) -> str:
    return "null" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def compare_reports(reports, figure_path=None, title: str = "Attack success rate") -> str:
    """Text table of named reports sorted by ASR (descending), plus an optional bar chart.

    ``reports`` is a mapping or a sequence of ``(name, EvalReport)`` pairs.
    """
    items = list(reports.items()) if isinstance(reports, dict) else list(reports)
    if len(items) < 2:
        raise InvalidSpec("comparison needs at least two reports")
    items.sort(key=lambda kv: (-kv[1].asr, kv[0]))
    width = max(len("attack"), *(len(k) for k, _ in items))
    lines = [f"{'attack':<{width}}  {'ASR':>6}  {'precision':>9}  {'recall':>6}  {'n':>6}"]
    for name, r in items:
        lines.append(f"{name:<{width}}  {_fmt(r.asr):>6}  {_fmt(r.precision):>9}  "
                     f"{_fmt(r.recall):>6}  {r.counts.total:>6}")
    table = "\n".join(lines)
    if figure_path is not None:
        _bar_figure(items, figure_path, title)
    return table


def _bar_figure(items, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [k for k, _ in items]
    # fixed salt keeps svg element ids stable between runs
    with matplotlib.rc_context({"svg.hashsalt": "dynmia"}):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.2))
        ax.bar(names, [r.asr for _, r in items], color="tab:blue")
        ax.axhline(0.5, color="grey", lw=0.8, ls="--")
        ax.set_ylim(0, 1)
        ax.set_ylabel("ASR")
        ax.set_title(title)
        fig.tight_layout()
        meta = {"Date": None} if str(path).endswith(".svg") else {"Software": None}
        fig.savefig(path, metadata=meta)
        plt.close(fig)
