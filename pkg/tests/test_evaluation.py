import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynmia.errors import EmptySet, InvalidSpec, UnbalancedInput
from dynmia.evaluation import (ConfusionCounts, EvalReport, balanced_sample, compare_reports,
                               compute_metrics, confusion, read_report, write_report)

from oracles import exact_metrics, same_ratio


def _report(asr):
    return EvalReport(asr, 0.5, 0.5, ConfusionCounts(5, 5, 5, 5), 10, 10)


def test_all_correct():
    r = compute_metrics([0.9] * 10 + [0.1] * 10, [1] * 10 + [0] * 10)
    assert (r.asr, r.precision, r.recall) == (1.0, 1.0, 1.0)


def test_direct_formula_counts():
    # 4 members vs 16 non-members, so check the confusion counts directly
    scores = [0.9] * 3 + [0.2] + [0.8] + [0.1] * 15
    truth = [1] * 3 + [1] + [0] + [0] * 15
    c = confusion(scores, truth)
    assert (c.tp, c.fn, c.fp, c.tn) == (3, 1, 1, 15)
    assert c.tp / (c.tp + c.fp) == 0.75
    assert c.tp / (c.tp + c.fn) == 0.75


def test_gtsrb_reference_row():
    # 1000+1000 balanced set with recall 0.93 and precision 0.5351 forces
    # TP=930, FN=70, FP=808, TN=192, which gives ASR 0.561
    scores = [1.0] * 930 + [0.0] * 70 + [1.0] * 808 + [0.0] * 192
    truth = [1] * 1000 + [0] * 1000
    r = compute_metrics(scores, truth)
    assert r.recall == pytest.approx(0.9300, abs=5e-5)
    assert r.precision == pytest.approx(0.5351, abs=5e-5)
    assert r.asr == pytest.approx(0.5610, abs=5e-5)


def test_precision_null_when_no_positive_prediction(tmp_path):
    r = compute_metrics([0.1] * 4, [1, 1, 0, 0])
    assert r.precision is None
    write_report(r, tmp_path / "r.json")
    assert '"precision": null' in (tmp_path / "r.json").read_text()


def test_unbalanced_rejected():
    with pytest.raises(UnbalancedInput):
        compute_metrics([0.6, 0.4, 0.3], [1, 0, 0])
    with pytest.raises(EmptySet):
        compute_metrics([], [])


def test_threshold_is_inclusive():
    r = compute_metrics([0.5, 0.4999999], [1, 0])
    assert r.asr == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2 ** 32 - 1))
def test_metrics_match_bruteforce_oracle(half, seed):
    rng = np.random.default_rng(seed)
    truth = rng.permutation(np.array([1] * half + [0] * half))
    scores = rng.random(2 * half)
    scores[rng.random(2 * half) < 0.1] = 0.5
    r = compute_metrics(scores, truth)
    counts, asr, precision, recall = exact_metrics(scores, truth)
    assert (r.counts.tp, r.counts.fp, r.counts.fn, r.counts.tn) == counts
    assert same_ratio(r.asr, asr) and same_ratio(r.recall, recall)
    assert (r.precision is None) == (precision is None)
    if precision is not None:
        assert same_ratio(r.precision, precision)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
def test_metrics_invariant_under_permutation(half, seed):
    rng = np.random.default_rng(seed)
    truth = np.array([1] * half + [0] * half)
    scores = rng.random(2 * half)
    p = rng.permutation(2 * half)
    assert compute_metrics(scores, truth).to_dict() == compute_metrics(scores[p], truth[p]).to_dict()


def test_coin_flip_scorer_is_at_chance():
    n = 10_000
    rng = np.random.default_rng(0)
    truth = np.array([1] * (n // 2) + [0] * (n // 2))
    r = compute_metrics(rng.random(n), truth)
    assert abs(r.asr - 0.5) <= 3 / math.sqrt(n)


def test_balanced_sample_min_rule_and_seed():
    m, n = balanced_sample(range(100), range(1000, 1040), seed=3)
    assert len(m) == len(n) == 40
    assert set(n) == set(range(1000, 1040))
    assert (m, n) == balanced_sample(range(100), range(1000, 1040), seed=3)
    m2, n2 = balanced_sample(range(10), range(10, 20), seed=1)
    assert sorted(m2) == list(range(10)) and sorted(n2) == list(range(10, 20))
    with pytest.raises(EmptySet):
        balanced_sample([], [1], 0)


def test_report_round_trip_keys(tmp_path):
    r = compute_metrics([0.7, 0.2, 0.6, 0.9], [1, 0, 0, 1], seed=4, fingerprint="abc")
    path = write_report(r, tmp_path / "r.json")
    d = json.loads(path.read_text())
    assert list(d) == ["asr", "precision", "recall", "tp", "fp", "fn", "tn", "n", "seed", "fingerprint"]
    assert read_report(path) == r


def test_compare_reports_sorted_and_needs_two(tmp_path):
    table = compare_reports({"baseline": _report(0.6664), "ours": _report(0.7243)})
    rows = table.splitlines()[1:]
    assert rows[0].startswith("ours") and rows[1].startswith("baseline")
    assert "0.7243" in rows[0] and "0.6664" in rows[1]
    with pytest.raises(InvalidSpec):
        compare_reports({"only": _report(0.5)})


@pytest.mark.parametrize("suffix", ["png", "svg"])
def test_compare_figure_is_deterministic(tmp_path, suffix):
    reports = {"ours": _report(0.72), "baseline": _report(0.67)}
    a, b = tmp_path / f"a.{suffix}", tmp_path / f"b.{suffix}"
    compare_reports(reports, a)
    compare_reports(reports, b)
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert a.stat().st_size > 0 and digest(a) == digest(b)
