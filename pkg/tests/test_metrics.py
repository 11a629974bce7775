import numpy as np
import pytest

from firesense.errors import ConfigurationError, EmptyMaskWarning, ShapeMismatchError
from firesense.metrics import (AP_UNDEFINED, THRESHOLDS, MetricsReport, audit_csv_row,
                               auc_pr, confusion, effective_target, evaluate,
                               inflation_audit, prf1, threshold_sweep)
from firesense.rng import rng_for
from oracles import ap_oracle, confusion_oracle, prf1_oracle


def fixture_4x4():
    """Prev mask 4 fire px; clean target adds 2 new px and labels prev as 0."""
    prev = np.zeros((4, 4))
    prev[1:3, 1:3] = 1.0
    target = np.zeros((4, 4), dtype=np.int8)
    target[1, 3] = 1
    target[3, 1] = 1
    probs = prev.copy()  # the copy-prev predictor
    return probs, prev, target


def test_thresholds_grid():
    assert len(THRESHOLDS) == 19
    assert THRESHOLDS[0] == pytest.approx(0.05)
    assert THRESHOLDS[-1] == pytest.approx(0.95)
    assert np.allclose(np.diff(THRESHOLDS), 0.05)


def test_effective_target_clean_excludes_unknown():
    prev = np.zeros((2, 2))
    target = np.array([[1, 0], [-1, 1]])
    eff, include = effective_target(prev, target, "clean")
    assert eff.tolist() == [True, False, False, True]
    assert include.tolist() == [True, True, False, True]


def test_effective_target_inflated_unions_prev_and_keeps_all():
    prev = np.array([[1.0, 0.0], [0.6, 0.0]])
    target = np.array([[0, 1], [-1, -1]])
    eff, include = effective_target(prev, target, "inflated")
    assert eff.tolist() == [True, True, True, False]  # -1 relabeled via prev union
    assert include.all()
    with pytest.raises(ConfigurationError):
        effective_target(prev, target, "both")


def test_confusion_4x4_fixture_clean_and_inflated():
    probs, prev, target = fixture_4x4()
    clean = confusion(probs, prev, target, "clean", 0.5)
    assert clean == {"tp": 0, "fp": 4, "fn": 2, "tn": 10}
    assert prf1(clean)[2] == 0.0
    inflated = confusion(probs, prev, target, "inflated", 0.5)
    assert inflated == {"tp": 4, "fp": 0, "fn": 2, "tn": 10}
    assert prf1(inflated)[2] == pytest.approx(0.8, abs=1e-12)


def test_confusion_counts_sum_to_included_pixels():
    probs, prev, target = fixture_4x4()
    clean = confusion(probs, prev, target, "clean", 0.5)
    assert sum(clean.values()) == 16
    target[0, 0] = -1
    clean = confusion(probs, prev, target, "clean", 0.5)
    assert sum(clean.values()) == 15


def test_prf1_conventions():
    assert prf1({"tp": 2, "fp": 1, "fn": 1, "tn": 0}) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
    assert prf1({"tp": 0, "fp": 0, "fn": 0, "tn": 5}) == (0.0, 0.0, 0.0)
    assert prf1({"tp": 7, "fp": 0, "fn": 0, "tn": 0}) == (1.0, 1.0, 1.0)


def test_probs_out_of_range_rejected():
    with pytest.raises(ConfigurationError):
        confusion(np.array([1.5]), np.array([0.0]), np.array([1]), "clean", 0.5)
    with pytest.raises(ShapeMismatchError):
        confusion(np.zeros(4), np.zeros(3), np.zeros(4), "clean", 0.5)


def test_auc_pr_hand_ranked_fixture():
    ap = auc_pr(np.array([0.9, 0.8, 0.7, 0.1]), np.array([1, 0, 1, 0], dtype=bool))
    assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-9)


def test_auc_pr_single_positive_cases():
    assert auc_pr(np.array([0.9, 0.1, 0.2]), np.array([1, 0, 0], dtype=bool)) == 1.0
    n = 100
    probs = np.linspace(1.0, 0.01, n)
    labels = np.zeros(n, dtype=bool)
    labels[-1] = True  # perfect mis-ranking: the positive lands at rank 100
    assert auc_pr(probs, labels) == pytest.approx(1.0 / 100.0, abs=1e-12)


def test_auc_pr_stable_tie_order():
    probs = np.array([0.5, 0.5, 0.5])
    a = auc_pr(probs, np.array([1, 0, 0], dtype=bool))   # positive first among ties
    b = auc_pr(probs, np.array([0, 0, 1], dtype=bool))   # positive last among ties
    assert a == 1.0
    assert b == pytest.approx(1.0 / 3.0)


def test_auc_pr_no_positives_sentinel_and_warning():
    with pytest.warns(EmptyMaskWarning):
        out = auc_pr(np.array([0.3, 0.4]), np.array([0, 0], dtype=bool))
    assert out == AP_UNDEFINED == -1.0


def test_auc_pr_respects_exclusion_mask():
    probs = np.array([0.9, 0.8, 0.1])
    labels = np.array([0, 1, 0], dtype=bool)
    include = np.array([False, True, True])
    assert auc_pr(probs, labels, include) == 1.0


def test_threshold_sweep_fixture_lowest_tie():
    probs = np.array([0.1, 0.6, 0.9])
    prev = np.zeros(3)
    target = np.array([0, 1, 1])
    best, rows = threshold_sweep(probs, prev, target, "clean")
    assert len(rows) == 19
    assert best == pytest.approx(0.15)
    f1_by_thr = {round(r["threshold"], 2): r["f1"] for r in rows}
    assert f1_by_thr[0.15] == 1.0 and f1_by_thr[0.6] == 1.0
    assert f1_by_thr[0.05] < 1.0  # 0.1 tips into a false positive there


def test_threshold_sweep_all_negative_defaults_low():
    probs = np.array([0.2, 0.4])
    best, rows = threshold_sweep(probs, np.zeros(2), np.zeros(2, dtype=int), "clean")
    assert best == pytest.approx(0.05)
    assert all(r["f1"] == 0.0 for r in rows)


def test_evaluate_produces_report_and_csv_row():
    probs, prev, target = fixture_4x4()
    report, rows = evaluate(probs, prev, target, "inflated", model="copy-prev")
    assert isinstance(report, MetricsReport)
    assert report.f1 == pytest.approx(0.8)
    assert len(rows) == 19
    line = report.csv_row()
    assert line.startswith("copy-prev,inflated,")
    assert len(line.split(",")) == 11


def test_clean_metrics_ignore_probs_at_excluded_pixels(rng):
    probs = rng.random((8, 8))
    prev = (rng.random((8, 8)) > 0.8).astype(float)
    target = rng.integers(-1, 2, size=(8, 8))
    if not (target == -1).any():
        target[0, 0] = -1
    poked = np.array(probs)
    poked[target == -1] = 1.0 - poked[target == -1]
    for thr in (0.2, 0.5, 0.8):
        assert (confusion(probs, prev, target, "clean", thr)
                == confusion(poked, prev, target, "clean", thr))
    eff, include = effective_target(prev, target, "clean")
    assert auc_pr(probs.reshape(-1), eff, include) == auc_pr(poked.reshape(-1), eff, include)


def test_confusion_matches_loop_oracle_randomized():
    rng = rng_for(21, "metric-oracle")
    for _ in range(50):
        probs = rng.random((16, 16))
        prev = (rng.random((16, 16)) > 0.7).astype(float)
        target = rng.integers(-1, 2, size=(16, 16))
        thr = float(rng.choice(THRESHOLDS))
        for protocol in ("clean", "inflated"):
            got = confusion(probs, prev, target, protocol, thr)
            want = confusion_oracle(probs, prev, target, protocol, thr)
            assert got == want
            assert prf1(got) == pytest.approx(prf1_oracle(want), abs=1e-15)


def test_auc_pr_matches_hand_ranked_oracle_randomized():
    rng = rng_for(22, "ap-oracle")
    for _ in range(30):
        probs = rng.random(60)
        probs[rng.random(60) < 0.3] = 0.5  # force score ties
        labels = rng.random(60) > 0.7
        if not labels.any():
            labels[0] = True
        assert auc_pr(probs, labels) == pytest.approx(ap_oracle(probs, labels), abs=1e-12)


def test_inflation_audit_fixture_undefined_marker():
    probs, prev, target = fixture_4x4()
    audit = inflation_audit(probs, prev, target, model="copy-prev")
    assert audit["clean"].f1 == 0.0
    assert audit["inflated"].f1 == pytest.approx(0.8)
    assert audit["inflation_pct"] is None
    row = audit_csv_row(audit)
    assert row.endswith("undefined")


def test_inflation_audit_same_protocol_is_zero_pct(rng):
    probs = rng.random((6, 6))
    target = (rng.random((6, 6)) > 0.7).astype(int)
    target[0, 0] = 1  # keep clean F1 > 0 achievable
    probs[target == 1] = 0.9
    prev = np.zeros((6, 6))  # no prev fire: protocols coincide
    audit = inflation_audit(probs, prev, target)
    assert audit["inflation_pct"] == pytest.approx(0.0, abs=1e-12)


def test_inflated_never_below_clean_for_copy_prev_property():
    rng = rng_for(23, "inflate-prop")
    for _ in range(25):
        prev = (rng.random((8, 8)) > 0.75).astype(float)
        new = (rng.random((8, 8)) > 0.85) & (prev == 0)
        target = np.where(new, 1, 0)
        target[(rng.random((8, 8)) < 0.05)] = -1
        c = prf1(confusion(prev, prev, target, "clean", 0.5))[2]
        i = prf1(confusion(prev, prev, target, "inflated", 0.5))[2]
        assert i >= c
