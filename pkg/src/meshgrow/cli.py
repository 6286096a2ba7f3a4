"""Command-line entry point tying the pipeline together.

Exit codes: 0 success, 1 runtime failure (with a JSON error line on
stderr), 2 usage error. Every subcommand that writes into an output
directory drops a run.json there capturing the resolved configuration,
seed, package version, and SHA-256 digests of its file inputs.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__

log = logging.getLogger("meshgrow")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_record(out_dir, subcommand: str, config: dict, seed, input_hashes: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "version": __version__,
        "input_sha256": input_hashes,
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _fail_on_error(fn):
    """Map internal failures to exit 1 with a machine-readable error line."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            log.debug("failure detail", exc_info=True)
            line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
            click.echo(line, err=True)
            sys.exit(1)

    return wrapper


def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("MESHGROW_SEED")
    return int(env) if env else 0


@click.group()
@click.option("--seed", type=int, default=None, help="Master seed (fallback: MESHGROW_SEED, then 0).")
@click.option(
    "--log-level",
    type=click.Choice(["debug", "info", "warning", "error"]),
    default="info",
    show_default=True,
)
@click.option("--threads", type=int, default=1, show_default=True, help="BLAS thread cap (1 = bit-reproducible).")
@click.version_option(version=__version__)
@click.pass_context
def main(ctx, seed, log_level, threads):
    """Mesh-based growth prediction pipeline."""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["seed"] = _resolve_seed(seed)
    ctx.obj["threads"] = threads
    if threads > 0:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(threads)
        except ImportError:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ.setdefault(var, str(threads))
    log.info("seed=%d threads=%d version=%s", ctx.obj["seed"], threads, __version__)


@main.command("mesh-from-mask")
@click.option("--lesion", "lesion_path", required=True, type=click.Path(exists=True), help="Lesion mask sidecar (.mask.json).")
@click.option("--vessels", "vessels_path", type=click.Path(exists=True), default=None, help="Vessel mask sidecar; required for roi mode.")
@click.option("--mode", type=click.Choice(["uia", "roi"]), default="uia", show_default=True)
@click.option("--cube-mm", type=float, default=20.0, show_default=True, help="ROI cube side (roi mode).")
@click.option("--target-edges", type=int, default=None, help="Edge budget (default 1000 uia / 2000 roi).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output mesh (.obj or .off).")
@click.pass_context
@_fail_on_error
def mesh_from_mask(ctx, lesion_path, vessels_path, mode, cube_mm, target_edges, out_path):
    """Surface a voxel mask: [ROI crop,] marching cubes, decimation."""
    from .decimate import decimate, reachable_edge_target
    from .mesh import save_mesh
    from .voxel import RoiSpec, extract_roi, load_mask, marching_cubes, mask_sha256

    if target_edges is None:
        target_edges = 1000 if mode == "uia" else 2000
    lesion = load_mask(lesion_path)
    hashes = {str(lesion_path): mask_sha256(lesion_path)}
    if mode == "roi":
        if vessels_path is None:
            raise click.UsageError("roi mode requires --vessels")
        vessels = load_mask(vessels_path)
        hashes[str(vessels_path)] = mask_sha256(vessels_path)
        volume = extract_roi(vessels, lesion, RoiSpec(cube_side_mm=cube_mm))
    else:
        volume = lesion
    mesh = marching_cubes(volume)
    log.info("isosurface: %d vertices, %d edges", mesh.vertex_count, mesh.edge_count)
    if mesh.edge_count > target_edges:
        mesh = decimate(mesh, reachable_edge_target(mesh.edge_count, target_edges))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out_path)
    log.info("wrote %s with %d edges", out_path, mesh.edge_count)
    _write_run_record(
        Path(out_path).parent,
        "mesh-from-mask",
        {
            "lesion": str(lesion_path),
            "vessels": str(vessels_path) if vessels_path else None,
            "mode": mode,
            "cube_mm": cube_mm,
            "target_edges": target_edges,
            "out": str(out_path),
        },
        ctx.obj["seed"],
        hashes,
    )


@main.command("features")
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True))
@click.option("--with-coords", is_flag=True, help="Append edge midpoint coordinate channels.")
@click.option("--center-coords", is_flag=True, help="Express midpoints relative to the mesh centroid.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output CSV, one row per edge.")
@click.pass_context
@_fail_on_error
def features_cmd(ctx, mesh_path, with_coords, center_coords, out_path):
    """Edge feature matrix of a mesh as CSV."""
    from .features import assemble_features
    from .mesh import face_areas, load_mesh

    mesh = load_mesh(mesh_path)
    center = None
    if center_coords:
        if not with_coords:
            raise click.UsageError("--center-coords only applies with --with-coords")
        areas = face_areas(mesh)
        face_centroids = mesh.vertices[mesh.faces].mean(axis=1)
        center = (face_centroids * areas[:, None]).sum(axis=0) / areas.sum()
    matrix = assemble_features(mesh, with_coords=with_coords, center=center)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(matrix.channel_names)
        for row in matrix.values.T:
            writer.writerow([repr(float(v)) for v in row])
    log.info("wrote %d edges x %d channels to %s", matrix.edge_count, matrix.channel_count, out_path)
    _write_run_record(
        Path(out_path).parent,
        "features",
        {
            "mesh": str(mesh_path),
            "with_coords": with_coords,
            "center_coords": center_coords,
            "out": str(out_path),
        },
        ctx.obj["seed"],
        {str(mesh_path): _sha256(mesh_path)},
    )


@main.command("synth")
@click.option("--n", "n_samples", required=True, type=int)
@click.option("--growing-frac", type=float, default=0.30, show_default=True)
@click.option("--mode", type=click.Choice(["uia", "roi"]), default="uia", show_default=True)
@click.option("--spacing", type=float, default=0.4, show_default=True, help="Voxel spacing for rasterization (mm).")
@click.option("--with-masks", is_flag=True, help="Also write voxel masks for each sample.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
@_fail_on_error
def synth_cmd(ctx, n_samples, growing_frac, mode, spacing, with_masks, out_dir):
    """Generate a labeled synthetic dataset with manifest.csv."""
    from .synth import SynthConfig, generate_dataset

    config = SynthConfig(
        n_samples=n_samples,
        growing_fraction=growing_frac,
        mode=mode,
        voxel_spacing=spacing,
        seed=ctx.obj["seed"],
    )
    manifest = generate_dataset(config, out_dir, with_masks=with_masks)
    log.info("wrote %s", manifest)
    _write_run_record(
        out_dir,
        "synth",
        {
            "n_samples": n_samples,
            "growing_fraction": growing_frac,
            "mode": mode,
            "voxel_spacing": spacing,
            "with_masks": with_masks,
            "out": str(out_dir),
        },
        config.seed,
        {str(manifest): _sha256(manifest)},
    )


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True), help="Experiment JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
@_fail_on_error
def train_cmd(ctx, config_path, out_dir):
    """Cross-validated training from an experiment config.

    The config holds every TrainConfig field plus "manifest" (dataset CSV)
    and optionally "model_name" and "split_file".
    """
    from .training import TrainConfig, load_manifest, run_experiment

    spec = json.loads(Path(config_path).read_text())
    manifest_path = spec.pop("manifest", None)
    if manifest_path is None:
        raise click.UsageError("experiment config must name a dataset 'manifest'")
    manifest_path = Path(manifest_path)
    if not manifest_path.is_absolute():
        manifest_path = Path(config_path).parent / manifest_path
    model_name = spec.pop("model_name", "model")
    split_file = spec.pop("split_file", None)
    if "seed" not in spec:
        spec["seed"] = ctx.obj["seed"]
    config = TrainConfig.from_dict(spec)
    log.info("resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))

    samples = load_manifest(manifest_path)
    hashes = {str(config_path): _sha256(config_path), str(manifest_path): _sha256(manifest_path)}
    for s in samples:
        hashes[str(s.mesh_path)] = _sha256(s.mesh_path)
    results, report = run_experiment(
        config,
        samples,
        out_dir=out_dir,
        model_name=model_name,
        split_path=split_file,
    )
    _write_run_record(
        out_dir,
        "train",
        {**config.to_dict(), "manifest": str(manifest_path), "model_name": model_name},
        config.seed,
        hashes,
    )
    for r in results:
        log.info("fold %d: best macro F1 %.3f at epoch %d", r.fold_index, r.best_f1, r.best_epoch)


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True), help="A train output directory.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
@_fail_on_error
def eval_cmd(ctx, run_dir, out_dir):
    """Re-evaluate a train run's checkpoints and emit the report files."""
    from .features import FeatureNormStats
    from .metrics import EvalReport, ModelEval, emit_report, fold_metrics
    from .network import load_checkpoint
    from .training import TrainConfig, _prepare, evaluate, load_manifest, load_sample, load_split

    run_dir = Path(run_dir)
    record = json.loads((run_dir / "run.json").read_text())
    conf = dict(record["config"])
    model_name = conf.pop("model_name", "model")
    manifest_path = conf.pop("manifest")
    config = TrainConfig.from_dict(conf)
    samples = load_manifest(manifest_path)
    folds = load_split(run_dir / "split.json", len(samples))
    dtype = np.float32 if config.dtype == "float32" else np.float64

    hashes = {str(run_dir / "split.json"): _sha256(run_dir / "split.json")}
    stats_list = []
    for i, (_, val_idx) in enumerate(folds):
        ckpt_path = run_dir / f"fold_{i}" / "checkpoint.json"
        state, extra = load_checkpoint(ckpt_path)
        hashes[str(ckpt_path)] = _sha256(ckpt_path)
        stats = FeatureNormStats(
            mean=np.asarray(extra["norm_mean"], dtype=np.float64),
            std=np.asarray(extra["norm_std"], dtype=np.float64),
        )
        val_samples = [samples[j] for j in val_idx]
        loaded = [load_sample(s, config.model) for s in val_samples]
        tensors = _prepare(loaded, [s.label for s in val_samples], config.model, stats, dtype)
        preds, scores = evaluate(state, tensors, config.batch_size)
        stats_list.append(fold_metrics(preds, tensors.labels, scores))
        log.info("fold %d: evaluated %d validation samples", i, len(val_samples))

    report = EvalReport(models=(ModelEval(name=model_name, folds=tuple(stats_list)),))
    paths = emit_report(report, out_dir)
    _write_run_record(
        out_dir,
        "eval",
        {"run": str(run_dir), "out": str(out_dir)},
        ctx.obj["seed"],
        hashes,
    )
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


@main.command("gradcheck")
@click.option("--edges", type=int, default=150, show_default=True, help="Edge count of the check fixture.")
@click.pass_context
@_fail_on_error
def gradcheck_cmd(ctx, edges):
    """Finite-difference gradient audit; exit 0 iff all errors in tolerance."""
    from .gradcheck import E2E_TOL, LAYER_TOL, end_to_end_check, layer_checks

    seed = ctx.obj["seed"]
    ok = True
    for name, err in layer_checks(seed=seed, edges=edges).items():
        status = "ok" if err <= LAYER_TOL else "FAIL"
        if err > LAYER_TOL:
            ok = False
        click.echo(f"{name:<24} {err:.3e}  {status}")
    for name, err in end_to_end_check(seed=seed, edges=edges).items():
        status = "ok" if err <= E2E_TOL else "FAIL"
        if err > E2E_TOL:
            ok = False
        click.echo(f"end_to_end/{name:<13} {err:.3e}  {status}")
    if not ok:
        raise RuntimeError("gradient check exceeded tolerance")
    click.echo(f"all gradients within tolerance (layers {LAYER_TOL:g}, end-to-end {E2E_TOL:g})")


if __name__ == "__main__":
    main()
