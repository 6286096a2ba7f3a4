import csv
import json

import numpy as np
import pytest

from meshgrow.metrics import (
    FPR_GRID,
    METRICS_CSV_HEADER,
    ROC_CSV_HEADER,
    EvalReport,
    FoldMetrics,
    MetricsError,
    ModelEval,
    RocCurve,
    confusion_metrics,
    emit_report,
    fold_metrics,
    interp_tpr,
    mean_auc,
    mean_roc,
    model_summary,
    report_from_dict,
    report_to_dict,
    roc_curve,
)


def predictions_for(tp, fn, fp, tn):
    labels = np.array([1] * (tp + fn) + [0] * (fp + tn))
    preds = np.array([1] * tp + [0] * fn + [1] * fp + [0] * tn)
    return preds, labels


def random_fold(rng, n=30):
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = np.clip(rng.random(n) * 0.5 + labels * rng.random(n) * 0.5, 0, 1)
    preds = (scores >= 0.5).astype(int)
    return fold_metrics(preds, labels, scores)


# --- confusion metrics ------------------------------------------------------


def test_confusion_example():
    preds, labels = predictions_for(tp=2, fn=2, fp=1, tn=5)
    accuracy, macro_f1, sensitivity, specificity, counts = confusion_metrics(preds, labels)
    assert counts.tp == 2 and counts.fn == 2 and counts.fp == 1 and counts.tn == 5
    assert counts.total == 10
    assert accuracy == pytest.approx(0.7, abs=1e-12)
    assert sensitivity == pytest.approx(0.5, abs=1e-12)
    assert specificity == pytest.approx(5 / 6, abs=1e-12)
    assert macro_f1 == pytest.approx((4 / 7 + 10 / 13) / 2, abs=1e-12)


def test_perfect_predictor():
    preds, labels = predictions_for(tp=4, fn=0, fp=0, tn=6)
    accuracy, macro_f1, sensitivity, specificity, _ = confusion_metrics(preds, labels)
    assert (accuracy, macro_f1, sensitivity, specificity) == (1.0, 1.0, 1.0, 1.0)


def test_always_stable_predictor():
    labels = np.array([1, 0] * 5)
    preds = np.zeros(10, dtype=int)
    accuracy, macro_f1, sensitivity, specificity, _ = confusion_metrics(preds, labels)
    assert sensitivity == 0.0
    assert specificity == 1.0
    assert accuracy == 0.5
    # growing F1 = 0 (no predicted positives), stable F1 = 2/3
    assert macro_f1 == pytest.approx((0 + 2 / 3) / 2, abs=1e-12)


def test_undefined_f1_flagged():
    # class 1 absent from labels and predictions: its F1 is undefined -> 0
    preds = np.zeros(4, dtype=int)
    labels = np.zeros(4, dtype=int)
    with pytest.warns(UserWarning, match="growing"):
        _, macro_f1, _, _, _ = confusion_metrics(preds, labels)
    assert macro_f1 == pytest.approx(0.5)


def test_macro_f1_class_swap_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        labels = rng.integers(0, 2, 25)
        preds = rng.integers(0, 2, 25)
        _, f1_a, _, _, _ = confusion_metrics(preds, labels)
        _, f1_b, _, _, _ = confusion_metrics(1 - preds, 1 - labels)
        assert f1_a == pytest.approx(f1_b, abs=1e-12)


def test_rate_identities():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    preds = rng.integers(0, 2, 40)
    _, _, sensitivity, specificity, c = confusion_metrics(preds, labels)
    fnr = c.fn / (c.tp + c.fn)
    fpr = c.fp / (c.fp + c.tn)
    assert sensitivity + fnr == pytest.approx(1.0, abs=1e-12)
    assert specificity + fpr == pytest.approx(1.0, abs=1e-12)


def test_confusion_validation():
    with pytest.raises(MetricsError):
        confusion_metrics(np.array([]), np.array([]))
    with pytest.raises(MetricsError):
        confusion_metrics(np.array([0, 1]), np.array([0]))
    with pytest.raises(MetricsError):
        confusion_metrics(np.array([0, 2]), np.array([0, 1]))


# --- roc --------------------------------------------------------------------


def test_roc_perfect_separation():
    curve = roc_curve(np.array([0.9, 0.8, 0.4, 0.3]), np.array([1, 1, 0, 0]))
    assert curve.auc == pytest.approx(1.0, abs=1e-12)
    assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
    assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0


def test_roc_mixed_ordering():
    # 2 of 4 positive-negative pairs correctly ordered
    curve = roc_curve(np.array([0.8, 0.9, 0.7, 0.2]), np.array([1, 0, 1, 0]))
    assert curve.auc == pytest.approx(0.5, abs=1e-12)


def test_roc_all_ties():
    curve = roc_curve(np.full(6, 0.4), np.array([1, 0, 1, 0, 1, 0]))
    assert curve.auc == pytest.approx(0.5, abs=1e-12)
    # one grouped step from (0,0) straight to (1,1)
    assert len(curve.fpr) == 2


def test_roc_monotone_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(25):
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(40), 2)  # force ties
        curve = roc_curve(scores, labels)
        assert np.all(np.diff(curve.fpr) >= 0)
        assert np.all(np.diff(curve.tpr) >= 0)
        assert 0.0 <= curve.auc <= 1.0


def mann_whitney_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


@pytest.mark.parametrize("tie_grid", [None, 20, 3])
def test_auc_equals_mann_whitney(tie_grid):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.random(n)
        if tie_grid is not None:
            scores = np.round(scores * tie_grid) / tie_grid
        curve = roc_curve(scores, labels)
        assert curve.auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)


def test_roc_single_class_flagged():
    with pytest.warns(UserWarning):
        curve = roc_curve(np.array([0.2, 0.6, 0.9]), np.array([1, 1, 1]))
    assert np.isnan(curve.auc)


def test_roc_score_range_validation():
    with pytest.raises(MetricsError):
        roc_curve(np.array([0.5, 1.2]), np.array([0, 1]))


# --- fold averaging ---------------------------------------------------------


def test_mean_roc_identical_folds():
    curve = roc_curve(np.array([0.9, 0.7, 0.6, 0.2]), np.array([1, 0, 1, 0]))
    mean = mean_roc([curve, curve, curve])
    np.testing.assert_array_equal(mean.fpr, FPR_GRID)
    np.testing.assert_allclose(mean.tpr, interp_tpr(curve), atol=1e-15)
    m, s = mean_auc([curve, curve, curve])
    assert m == pytest.approx(curve.auc, abs=1e-15)
    assert s == 0.0


def test_mean_auc_arithmetic():
    perfect = roc_curve(np.array([0.9, 0.8, 0.4, 0.3]), np.array([1, 1, 0, 0]))
    chance = roc_curve(np.full(4, 0.5), np.array([1, 1, 0, 0]))
    m, s = mean_auc([perfect, chance])
    assert m == pytest.approx(0.75, abs=1e-12)
    assert s == pytest.approx(0.25, abs=1e-12)  # population std


def test_mean_auc_single_fold_identity():
    curve = roc_curve(np.array([0.9, 0.1, 0.7, 0.3]), np.array([1, 0, 0, 1]))
    m, s = mean_auc([curve])
    assert m == curve.auc and s == 0.0


def test_mean_matches_bruteforce_recompute():
    rng = np.random.default_rng(3)
    folds = [random_fold(rng).roc for _ in range(5)]
    mean = mean_roc(folds)
    stacked = np.stack([interp_tpr(f) for f in folds])
    np.testing.assert_allclose(mean.tpr, stacked.mean(axis=0), atol=1e-12)
    m, s = mean_auc(folds)
    aucs = [f.auc for f in folds]
    assert m == pytest.approx(np.mean(aucs), abs=1e-12)
    assert s == pytest.approx(np.std(aucs), abs=1e-12)
    # mean AUC is the fold average, not the trapezoid of the mean curve
    assert mean.auc == pytest.approx(np.mean(aucs), abs=1e-12)


def test_mean_roc_empty_rejected():
    with pytest.raises(MetricsError):
        mean_roc([])
    with pytest.raises(MetricsError):
        mean_auc([])


def test_report_aggregates_match_folds():
    rng = np.random.default_rng(4)
    folds = tuple(random_fold(rng) for _ in range(5))
    summary = model_summary(ModelEval(name="m", folds=folds))
    for key, getter in [
        ("accuracy", lambda f: f.accuracy),
        ("macro_f1", lambda f: f.macro_f1),
        ("sensitivity", lambda f: f.sensitivity),
        ("specificity", lambda f: f.specificity),
    ]:
        values = [getter(f) for f in folds]
        assert summary[key]["mean"] == pytest.approx(np.mean(values), abs=1e-12)
        assert summary[key]["std"] == pytest.approx(np.std(values), abs=1e-12)


# --- report emission --------------------------------------------------------


def sample_report(seed=5, n_models=2):
    rng = np.random.default_rng(seed)
    models = tuple(
        ModelEval(name=f"uia_model_{i + 1}", folds=tuple(random_fold(rng) for _ in range(5)))
        for i in range(n_models)
    )
    return EvalReport(models=models)


def test_report_json_roundtrip():
    report = sample_report()
    clone = report_from_dict(report_to_dict(report))
    for m0, m1 in zip(report.models, clone.models):
        assert m0.name == m1.name
        for f0, f1 in zip(m0.folds, m1.folds):
            assert f0.accuracy == f1.accuracy
            assert f0.macro_f1 == f1.macro_f1
            assert f0.counts == f1.counts
            np.testing.assert_array_equal(f0.roc.fpr, f1.roc.fpr)
            assert f0.roc.auc == f1.roc.auc


def test_emit_report_files(tmp_path):
    report = sample_report()
    paths = emit_report(report, tmp_path)
    assert set(paths) >= {"metrics_json", "metrics_csv", "roc_csv", "roc_png"}
    for p in paths.values():
        assert p.exists()

    with open(paths["metrics_csv"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_CSV_HEADER
    assert len(rows) == 1 + 2  # one line per model
    assert rows[1][0] == "uia_model_1"
    for cell in rows[1][1:]:
        # "0.704 (0.077)" layout
        mean_part, std_part = cell.split(" ")
        assert len(mean_part.split(".")[1]) == 3
        assert std_part.startswith("(") and std_part.endswith(")")

    with open(paths["roc_csv"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ROC_CSV_HEADER
    assert len(rows) == 1 + 2 * len(FPR_GRID)
    assert float(rows[1][1]) == 0.0
    assert float(rows[len(FPR_GRID)][1]) == 1.0


def test_emitted_json_restores_report(tmp_path):
    report = sample_report(seed=6)
    paths = emit_report(report, tmp_path)
    data = json.loads(paths["metrics_json"].read_text())
    clone = report_from_dict(data)
    m, s = mean_auc([f.roc for f in report.models[0].folds])
    m2, s2 = mean_auc([f.roc for f in clone.models[0].folds])
    assert (m, s) == (m2, s2)


def test_emit_report_deterministic_bytes(tmp_path):
    report = sample_report(seed=7)
    a = emit_report(report, tmp_path / "a")
    b = emit_report(report, tmp_path / "b")
    for key in ("metrics_json", "metrics_csv", "roc_csv"):
        assert a[key].read_bytes() == b[key].read_bytes()
