"""Confusion metrics, ROC/AUC, fold averaging, and report emission.

Positive class is "growing" (label 1): a true positive is a correctly
identified growing case, a true negative a correctly identified stable one.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# fixed abscissa for vertical ROC averaging: 0.00, 0.01, ..., 1.00
FPR_GRID = np.linspace(0.0, 1.0, 101)

METRICS_CSV_HEADER = ["model", "accuracy", "f1_score", "sensitivity", "specificity", "auc"]
ROC_CSV_HEADER = ["model", "fpr", "mean_tpr", "std_tpr"]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep ROC points plus trapezoid AUC.

    For a mean curve produced by `mean_roc`, `auc` is the average of the
    per-fold AUCs rather than the trapezoid of the averaged points.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass(frozen=True)
class FoldMetrics:
    accuracy: float
    macro_f1: float
    sensitivity: float
    specificity: float
    counts: ConfusionCounts
    roc: RocCurve


@dataclass(frozen=True)
class ModelEval:
    """Cross-validated results for one named model."""

    name: str
    folds: tuple[FoldMetrics, ...]


@dataclass(frozen=True)
class EvalReport:
    models: tuple[ModelEval, ...]
    # labels how the mean curve was built; vertical averaging is a choice,
    # not a requirement of the evaluation protocol
    roc_averaging: str = "vertical"


SCALAR_METRICS = ("accuracy", "macro_f1", "sensitivity", "specificity")


def _binary_f1(tp: int, fp: int, fn: int) -> tuple[float, bool]:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0, True
    return 2 * tp / denom, False


def confusion_metrics(predictions, labels) -> tuple[float, float, float, float, ConfusionCounts]:
    """Accuracy, macro F1, sensitivity, specificity, and raw counts.

    Macro F1 averages the growing-class and stable-class F1 scores. A
    per-class F1 with an empty denominator counts as 0 and raises a
    warning so degenerate predictors are visible but still comparable.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise MetricsError("predictions and labels must be equal-length 1-D")
    if predictions.size == 0:
        raise MetricsError("cannot compute metrics on empty input")
    for arr, what in ((predictions, "predictions"), (labels, "labels")):
        if not np.isin(arr, (0, 1)).all():
            raise MetricsError(f"{what} must be binary (0=stable, 1=growing)")

    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    counts = ConfusionCounts(tp=tp, fn=fn, fp=fp, tn=tn)

    accuracy = (tp + tn) / counts.total
    sensitivity = tp / (tp + fn) if (tp + fn) else 0.0
    specificity = tn / (tn + fp) if (tn + fp) else 0.0
    f1_pos, undef_pos = _binary_f1(tp, fp, fn)
    f1_neg, undef_neg = _binary_f1(tn, fn, fp)
    if undef_pos or undef_neg:
        which = [name for name, u in (("growing", undef_pos), ("stable", undef_neg)) if u]
        warnings.warn(f"F1 undefined for class(es) {which}; counted as 0", stacklevel=2)
    macro_f1 = 0.5 * (f1_pos + f1_neg)
    return accuracy, macro_f1, sensitivity, specificity, counts


def roc_curve(scores, labels) -> RocCurve:
    """Descending threshold sweep over the growing-class score.

    Tied scores collapse into a single step so the curve has one point per
    distinct threshold. Single-class labels make AUC undefined; the curve
    is returned with auc=nan and a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise MetricsError("scores and labels must be equal-length, non-empty 1-D")
    if np.any(scores < 0) or np.any(scores > 1):
        raise MetricsError("scores must lie in [0, 1]")

    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    s = scores[order]
    # indices of the last element in each tie group
    boundary = np.nonzero(np.diff(s))[0]
    last = np.concatenate([boundary, [y.size - 1]])
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    n_pos = int(tps[-1])
    n_neg = int(fps[-1])
    if n_pos == 0 or n_neg == 0:
        warnings.warn("single-class labels: AUC is undefined", stacklevel=2)
        swept = np.concatenate([[0.0], (last + 1) / y.size])
        zeros = np.zeros_like(swept)
        fpr, tpr = (swept, zeros) if n_pos == 0 else (zeros, swept)
        return RocCurve(fpr=fpr, tpr=tpr, auc=float("nan"))
    fpr = np.concatenate([[0.0], fps / n_neg])
    tpr = np.concatenate([[0.0], tps / n_pos])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc)


def interp_tpr(curve: RocCurve, grid: np.ndarray = FPR_GRID) -> np.ndarray:
    """TPR of `curve` linearly interpolated onto `grid` FPR values."""
    return np.interp(grid, curve.fpr, curve.tpr)


def mean_roc(folds: list[RocCurve] | tuple[RocCurve, ...]) -> RocCurve:
    """Vertical average: fold TPRs interpolated onto FPR_GRID, then meaned.

    The attached auc is the arithmetic mean of the per-fold trapezoid AUCs,
    not the trapezoid of the averaged curve.
    """
    if not folds:
        raise MetricsError("mean_roc requires at least one fold")
    tprs = np.stack([interp_tpr(c) for c in folds])
    return RocCurve(
        fpr=FPR_GRID.copy(),
        tpr=tprs.mean(axis=0),
        auc=float(np.mean([c.auc for c in folds])),
    )


def roc_tpr_std(folds: list[RocCurve] | tuple[RocCurve, ...]) -> np.ndarray:
    if not folds:
        raise MetricsError("roc_tpr_std requires at least one fold")
    return np.stack([interp_tpr(c) for c in folds]).std(axis=0)


def mean_auc(folds: list[RocCurve] | tuple[RocCurve, ...]) -> tuple[float, float]:
    if not folds:
        raise MetricsError("mean_auc requires at least one fold")
    aucs = np.array([c.auc for c in folds], dtype=np.float64)
    return float(aucs.mean()), float(aucs.std())


def fold_metrics(predictions, labels, scores) -> FoldMetrics:
    """Bundle confusion metrics and ROC for one validation fold."""
    accuracy, macro_f1, sensitivity, specificity, counts = confusion_metrics(predictions, labels)
    return FoldMetrics(
        accuracy=accuracy,
        macro_f1=macro_f1,
        sensitivity=sensitivity,
        specificity=specificity,
        counts=counts,
        roc=roc_curve(scores, labels),
    )


def model_summary(model: ModelEval) -> dict:
    """Mean and population std of each scalar metric plus AUC."""
    out: dict = {}
    for name in SCALAR_METRICS:
        vals = np.array([getattr(f, name) for f in model.folds], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    am, astd = mean_auc([f.roc for f in model.folds])
    out["auc"] = {"mean": am, "std": astd}
    return out


# metrics.json layout


def _roc_to_dict(curve: RocCurve) -> dict:
    return {"fpr": curve.fpr.tolist(), "tpr": curve.tpr.tolist(), "auc": curve.auc}


def _roc_from_dict(d: dict) -> RocCurve:
    return RocCurve(
        fpr=np.array(d["fpr"], dtype=np.float64),
        tpr=np.array(d["tpr"], dtype=np.float64),
        auc=float(d["auc"]),
    )


def report_to_dict(report: EvalReport) -> dict:
    models = []
    for model in report.models:
        mean_curve = mean_roc([f.roc for f in model.folds])
        band = roc_tpr_std([f.roc for f in model.folds])
        models.append(
            {
                "name": model.name,
                "summary": model_summary(model),
                "folds": [
                    {
                        "accuracy": f.accuracy,
                        "macro_f1": f.macro_f1,
                        "sensitivity": f.sensitivity,
                        "specificity": f.specificity,
                        "counts": {
                            "tp": f.counts.tp,
                            "fn": f.counts.fn,
                            "fp": f.counts.fp,
                            "tn": f.counts.tn,
                        },
                        "roc": _roc_to_dict(f.roc),
                    }
                    for f in model.folds
                ],
                "mean_roc": {
                    "fpr": mean_curve.fpr.tolist(),
                    "tpr": mean_curve.tpr.tolist(),
                    "std_tpr": band.tolist(),
                    "auc": mean_curve.auc,
                },
            }
        )
    return {"roc_averaging": report.roc_averaging, "models": models}


def report_from_dict(data: dict) -> EvalReport:
    models = []
    for m in data["models"]:
        folds = tuple(
            FoldMetrics(
                accuracy=float(f["accuracy"]),
                macro_f1=float(f["macro_f1"]),
                sensitivity=float(f["sensitivity"]),
                specificity=float(f["specificity"]),
                counts=ConfusionCounts(**{k: int(v) for k, v in f["counts"].items()}),
                roc=_roc_from_dict(f["roc"]),
            )
            for f in m["folds"]
        )
        models.append(ModelEval(name=m["name"], folds=folds))
    return EvalReport(models=tuple(models), roc_averaging=data["roc_averaging"])


def _format_mean_std(entry: dict) -> str:
    return f"{entry['mean']:.3f} ({entry['std']:.3f})"


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write metrics.json, metrics.csv, roc_points.csv, and roc.png.

    metrics.csv has one row per model with "mean (std)" cells; the figure
    shows each model's mean ROC with a +-1 std band.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics_json": out / "metrics.json",
        "metrics_csv": out / "metrics.csv",
        "roc_csv": out / "roc_points.csv",
        "roc_png": out / "roc.png",
    }

    data = report_to_dict(report)
    paths["metrics_json"].write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    with paths["metrics_csv"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for m in data["models"]:
            s = m["summary"]
            writer.writerow(
                [
                    m["name"],
                    _format_mean_std(s["accuracy"]),
                    _format_mean_std(s["macro_f1"]),
                    _format_mean_std(s["sensitivity"]),
                    _format_mean_std(s["specificity"]),
                    _format_mean_std(s["auc"]),
                ]
            )

    with paths["roc_csv"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROC_CSV_HEADER)
        for m in data["models"]:
            curve = m["mean_roc"]
            for fpr, tpr, std in zip(curve["fpr"], curve["tpr"], curve["std_tpr"]):
                writer.writerow([m["name"], f"{fpr:.2f}", repr(tpr), repr(std)])

    _plot_roc(data, paths["roc_png"])
    return paths


def _plot_roc(data: dict, path: Path) -> None:
    # Figure + canvas directly: no pyplot state, safe in headless runs
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    fig = Figure(figsize=(6.0, 5.0), dpi=120)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    for m in data["models"]:
        curve = m["mean_roc"]
        fpr = np.asarray(curve["fpr"])
        tpr = np.asarray(curve["tpr"])
        std = np.asarray(curve["std_tpr"])
        (line,) = ax.plot(fpr, tpr, label=f"{m['name']} (AUC {curve['auc']:.3f})")
        ax.fill_between(
            fpr,
            np.clip(tpr - std, 0.0, 1.0),
            np.clip(tpr + std, 0.0, 1.0),
            alpha=0.15,
            color=line.get_color(),
        )
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"Mean ROC ({data['roc_averaging']} averaging)")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
