"""Dataset handling, weighted sampling, k-fold training, and experiments.

Labels are integers: 0 = stable, 1 = growing (the positive class). Class
weights are stored in label order, so the default (0.3, 0.7) puts weight
0.7 on growing. The same weights drive both the loss and the sampler.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import (
    EdgeFeatureMatrix,
    FeatureNormStats,
    apply_normalization,
    assemble_features,
    fit_normalization,
)
from .decimate import decimate, reachable_edge_target
from .mesh import build_edge_adjacency, load_mesh
from .metrics import EvalReport, FoldMetrics, ModelEval, confusion_metrics, emit_report, fold_metrics
from .network import (
    ModelConfig,
    NetworkState,
    TrainingDivergedError,
    adam_step,
    backward,
    forward,
    init_state,
    predict_proba,
    save_checkpoint,
    weighted_cross_entropy,
)
from .pooling import pad_columns

LABEL_NAMES = ("stable", "growing")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    mesh_path: str
    label: int
    group_id: str | None = None
    # optional precomputed features; channel count must match the model
    features: EdgeFeatureMatrix | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DatasetError(f"label must be 0 (stable) or 1 (growing), got {self.label!r}")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    class_weights: tuple[float, float] = (0.3, 0.7)
    batch_size: int = 50
    lr: float = 2e-4
    max_epochs: int = 200
    validate_every: int = 5
    k_folds: int = 5
    seed: int = 0
    dtype: str = "float32"
    split_mode: str = "random"

    def __post_init__(self):
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise DatasetError("class_weights must be two positive values")
        for name in ("batch_size", "lr", "max_epochs", "validate_every", "k_folds"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive")
        if self.validate_every > self.max_epochs:
            raise DatasetError("validate_every must not exceed max_epochs")
        if self.dtype not in ("float32", "float64"):
            raise DatasetError("dtype must be float32 or float64")
        if self.split_mode not in ("random", "group"):
            raise DatasetError("split_mode must be random or group")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "class_weights": list(self.class_weights),
            "batch_size": self.batch_size,
            "lr": self.lr,
            "max_epochs": self.max_epochs,
            "validate_every": self.validate_every,
            "k_folds": self.k_folds,
            "seed": self.seed,
            "dtype": self.dtype,
            "split_mode": self.split_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if "class_weights" in kwargs:
            kwargs["class_weights"] = tuple(kwargs["class_weights"])
        return cls(**kwargs)


@dataclass(frozen=True)
class FoldResult:
    fold_index: int
    best_epoch: int
    best_f1: float
    history: tuple[dict, ...]
    state: NetworkState
    norm_stats: FeatureNormStats
    # validation outputs of the selected checkpoint
    val_predictions: np.ndarray
    val_scores: np.ndarray
    val_labels: np.ndarray


def model_label(mode: str, with_coords: bool) -> str:
    """Configuration names used in reports: {uia,roi}_model_{1,2}."""
    return f"{mode}_model_{2 if with_coords else 1}"


def load_manifest(path) -> list[Sample]:
    """Read a dataset manifest CSV: mesh_path, label[, group_id].

    Labels may be the class names or 0/1. Relative mesh paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    samples = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "mesh_path" not in reader.fieldnames:
            raise DatasetError(f"{path}: manifest needs a mesh_path column")
        if "label" not in reader.fieldnames:
            raise DatasetError(f"{path}: manifest needs a label column")
        for row in reader:
            raw = row["label"].strip().lower()
            if raw in LABEL_NAMES:
                label = LABEL_NAMES.index(raw)
            elif raw in ("0", "1"):
                label = int(raw)
            else:
                raise DatasetError(f"{path}: unknown label {row['label']!r}")
            mesh_path = Path(row["mesh_path"])
            if not mesh_path.is_absolute():
                mesh_path = path.parent / mesh_path
            group = (row.get("group_id") or "").strip() or None
            samples.append(Sample(mesh_path=str(mesh_path), label=label, group_id=group))
    if not samples:
        raise DatasetError(f"{path}: empty manifest")
    return samples


def kfold_split(n: int, k: int, seed: int, groups=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random k-fold partition of range(n) into (train, validation) pairs.

    With `groups`, whole groups are assigned to folds (greedy smallest-fold
    first over shuffled groups) so same-group samples never straddle folds.
    """
    if k < 2:
        raise DatasetError("k must be at least 2")
    if n < k:
        raise DatasetError(f"need at least {k} samples for {k} folds, got {n}")
    rng = np.random.default_rng(seed)
    if groups is None:
        val_sets = np.array_split(rng.permutation(n), k)
    else:
        groups = np.asarray(groups)
        if groups.shape != (n,):
            raise DatasetError("groups must have one entry per sample")
        uniq = rng.permutation(np.unique(groups))
        if uniq.size < k:
            raise DatasetError(f"need at least {k} groups for {k} folds, got {uniq.size}")
        buckets: list[list[int]] = [[] for _ in range(k)]
        for g in uniq:
            members = np.nonzero(groups == g)[0]
            smallest = min(range(k), key=lambda i: (len(buckets[i]), i))
            buckets[smallest].extend(members.tolist())
        val_sets = [np.array(b, dtype=np.int64) for b in buckets]
    folds = []
    everything = np.arange(n)
    for val in val_sets:
        val = np.sort(val)
        train = np.setdiff1d(everything, val, assume_unique=True)
        folds.append((train, val))
    return folds


def save_split(folds, path, seed: int | None = None) -> None:
    data = {
        "seed": seed,
        "folds": [val.tolist() for _, val in folds],
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_split(path, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    data = json.loads(Path(path).read_text())
    everything = np.arange(n)
    folds = []
    seen: set[int] = set()
    for val_list in data["folds"]:
        val = np.sort(np.asarray(val_list, dtype=np.int64))
        if val.size and (val[0] < 0 or val[-1] >= n):
            raise DatasetError(f"{path}: split index out of range for {n} samples")
        if seen.intersection(val.tolist()):
            raise DatasetError(f"{path}: overlapping validation folds")
        seen.update(val.tolist())
        folds.append((np.setdiff1d(everything, val, assume_unique=True), val))
    if len(seen) != n:
        raise DatasetError(f"{path}: validation folds do not cover all {n} samples")
    return folds


def weighted_sampler(labels, class_weights, seed: int):
    """Infinite index stream with P(i) proportional to its class weight."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DatasetError("cannot sample from an empty label list")
    weights = np.asarray(class_weights, dtype=np.float64)[labels]
    p = weights / weights.sum()
    rng = np.random.default_rng(seed)
    while True:
        # buffered draws keep the stream cheap without changing semantics
        for i in rng.choice(labels.size, size=1024, p=p):
            yield int(i)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


def load_sample(sample: Sample, model: ModelConfig) -> tuple[EdgeFeatureMatrix, np.ndarray]:
    """Raw (un-normalized) features and edge adjacency at the model's budget.

    Meshes are expected to arrive at or below the edge budget; anything
    larger is decimated to the largest reachable count first. Loads the
    mesh even when features are cached, since adjacency comes from it.
    """
    mesh = load_mesh(sample.mesh_path)
    if mesh.edge_count > model.input_edges:
        mesh = decimate(mesh, reachable_edge_target(mesh.edge_count, model.input_edges))
    adjacency = build_edge_adjacency(mesh)
    if sample.features is not None:
        if sample.features.channel_count != model.input_channels:
            raise DatasetError(
                f"cached features have {sample.features.channel_count} channels, "
                f"model expects {model.input_channels}"
            )
        if sample.features.edge_count != mesh.edge_count:
            raise DatasetError("cached features do not match the mesh at the edge budget")
        return sample.features, adjacency
    return assemble_features(mesh, with_coords=model.input_channels == 10), adjacency


@dataclass(frozen=True)
class _Tensors:
    features: np.ndarray  # (N, C, budget)
    adjacency: np.ndarray  # (N, budget, 4)
    reals: list[int]
    labels: np.ndarray


def _prepare(loaded, labels, model: ModelConfig, stats: FeatureNormStats, dtype) -> _Tensors:
    feats, adjs, reals = [], [], []
    for matrix, adjacency in loaded:
        normalized = apply_normalization(matrix, stats)
        padded, padded_adj, real = pad_columns(
            normalized.values.astype(dtype), adjacency, model.input_edges
        )
        feats.append(padded)
        adjs.append(padded_adj)
        reals.append(real)
    return _Tensors(
        features=np.stack(feats),
        adjacency=np.stack(adjs),
        reals=reals,
        labels=np.asarray(labels, dtype=np.int64),
    )


def _clone_state(state: NetworkState) -> NetworkState:
    return NetworkState(
        config=state.config,
        params={k: v.copy() for k, v in state.params.items()},
        buffers={k: v.copy() for k, v in state.buffers.items()},
        adam_m={k: v.copy() for k, v in state.adam_m.items()},
        adam_v={k: v.copy() for k, v in state.adam_v.items()},
        adam_step=state.adam_step,
    )


def evaluate(state: NetworkState, tensors: _Tensors, batch_size: int = 50):
    """Eval-mode predictions: (argmax labels, growing-class scores)."""
    scores = []
    for start in range(0, len(tensors.reals), batch_size):
        stop = start + batch_size
        proba = predict_proba(
            state,
            tensors.features[start:stop],
            tensors.adjacency[start:stop],
            tensors.reals[start:stop],
        )
        scores.append(proba[:, 1])
    scores = np.concatenate(scores)
    return (scores >= 0.5).astype(np.int64), scores


def train_fold(train_samples, val_samples, config: TrainConfig, fold_index: int = 0) -> FoldResult:
    """Train one fold; checkpoint = highest validation macro F1, ties to
    the earlier epoch. Normalization statistics come from the training
    split only."""
    if not train_samples or not val_samples:
        raise DatasetError("train and validation sets must be non-empty")
    dtype = np.float32 if config.dtype == "float32" else np.float64
    loaded_train = [load_sample(s, config.model) for s in train_samples]
    loaded_val = [load_sample(s, config.model) for s in val_samples]
    stats = fit_normalization([matrix for matrix, _ in loaded_train])
    train_t = _prepare(loaded_train, [s.label for s in train_samples], config.model, stats, dtype)
    val_t = _prepare(loaded_val, [s.label for s in val_samples], config.model, stats, dtype)

    state = init_state(config.model, seed=_derived_seed(config.seed, fold_index, 1), dtype=dtype)
    sampler = weighted_sampler(
        train_t.labels, config.class_weights, seed=_derived_seed(config.seed, fold_index, 2)
    )
    weights = np.asarray(config.class_weights, dtype=np.float64)
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)

    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state = None
    for epoch in range(1, config.max_epochs + 1):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            idx = [next(sampler) for _ in range(config.batch_size)]
            logits, cache = forward(
                state,
                train_t.features[idx],
                train_t.adjacency[idx],
                [train_t.reals[i] for i in idx],
                training=True,
            )
            loss, dlogits = weighted_cross_entropy(logits, train_t.labels[idx], weights)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"training loss became non-finite at fold {fold_index}, epoch {epoch}",
                    snapshot={
                        "fold": fold_index,
                        "epoch": epoch,
                        "loss": float(loss),
                        "max_abs_param": max(
                            float(np.max(np.abs(v))) for v in state.params.values()
                        ),
                    },
                )
            grads = backward(state, cache, dlogits)
            adam_step(state, grads, lr=config.lr)
            epoch_loss += float(loss)
        if epoch % config.validate_every == 0:
            preds, scores = evaluate(state, val_t, config.batch_size)
            accuracy, macro_f1, _, _, _ = confusion_metrics(preds, val_t.labels)
            history.append(
                {
                    "epoch": epoch,
                    "train_loss": epoch_loss / steps_per_epoch,
                    "val_macro_f1": macro_f1,
                    "val_accuracy": accuracy,
                }
            )
            if macro_f1 > best_f1:
                best_f1 = macro_f1
                best_epoch = epoch
                best_state = _clone_state(state)
                best_outputs = (preds, scores)
    assert best_state is not None  # validate_every <= max_epochs guarantees this
    return FoldResult(
        fold_index=fold_index,
        best_epoch=best_epoch,
        best_f1=best_f1,
        history=tuple(history),
        state=best_state,
        norm_stats=stats,
        val_predictions=best_outputs[0],
        val_scores=best_outputs[1],
        val_labels=val_t.labels.copy(),
    )


def run_experiment(
    config: TrainConfig,
    samples,
    out_dir=None,
    model_name: str = "model",
    split_path=None,
):
    """Cross-validated training: k FoldResults plus an aggregate report.

    When `out_dir` is given, persists split.json, per-fold checkpoints,
    and the report files. An existing `split_path` is reused so different
    model configurations see identical folds.
    """
    samples = list(samples)
    n = len(samples)
    groups = None
    if config.split_mode == "group":
        groups = [s.group_id if s.group_id is not None else f"sample-{i}" for i, s in enumerate(samples)]
    if split_path is not None and Path(split_path).exists():
        folds = load_split(split_path, n)
    else:
        folds = kfold_split(n, config.k_folds, config.seed, groups=groups)
        if split_path is not None:
            save_split(folds, split_path, seed=config.seed)

    labels = np.array([s.label for s in samples])
    for i, (train_idx, val_idx) in enumerate(folds):
        for part, idx in (("train", train_idx), ("validation", val_idx)):
            present = set(labels[idx].tolist())
            if present != {0, 1}:
                raise DatasetError(
                    f"fold {i}: {part} split is missing a class "
                    f"(has {sorted(LABEL_NAMES[p] for p in present)})"
                )

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if split_path is None:
            save_split(folds, out / "split.json", seed=config.seed)

    results: list[FoldResult] = []
    fold_stats: list[FoldMetrics] = []
    for i, (train_idx, val_idx) in enumerate(folds):
        result = train_fold(
            [samples[j] for j in train_idx],
            [samples[j] for j in val_idx],
            config,
            fold_index=i,
        )
        results.append(result)
        fold_stats.append(
            fold_metrics(result.val_predictions, result.val_labels, result.val_scores)
        )
        if out is not None:
            fold_dir = out / f"fold_{i}"
            fold_dir.mkdir(exist_ok=True)
            save_checkpoint(
                result.state,
                fold_dir / "checkpoint.json",
                extra={
                    "fold_index": i,
                    "best_epoch": result.best_epoch,
                    "best_f1": result.best_f1,
                    "history": list(result.history),
                    "norm_mean": result.norm_stats.mean.tolist(),
                    "norm_std": result.norm_stats.std.tolist(),
                },
            )

    report = EvalReport(models=(ModelEval(name=model_name, folds=tuple(fold_stats)),))
    if out is not None:
        emit_report(report, out / "report")
    return results, report
