"""Synthetic labeled shape populations for desk-scale pipeline validation.

Stable samples are smoothed random ellipsoids; growing samples share the
same base shape (same seed) plus Gaussian surface blebs and a
higher-frequency radial ripple, so surface irregularity is the
discriminative signal by construction. ROI mode embeds the shape in a
voxel mask together with parent-vessel tubes and runs the voxel pipeline
(ROI crop, marching cubes) before decimation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decimate import decimate, reachable_edge_target
from .mesh import Mesh, NonManifoldError, MeshError, make_mesh, save_mesh
from .primitives import icosphere
from .voxel import RoiSpec, VoxelMask, VoxelError, extract_roi, marching_cubes, save_mask

SHAPE_RETRIES = 5
EDGE_BUDGETS = {"uia": 1000, "roi": 2000}


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    growing_fraction: float = 0.30
    mode: str = "uia"
    radius_range: tuple[float, float] = (4.0, 7.0)
    bleb_count_range: tuple[int, int] = (1, 3)
    bleb_amplitude_range: tuple[float, float] = (0.42, 1.05)
    noise_amplitude: float = 0.042
    voxel_spacing: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise SynthError("n_samples must be positive")
        if not 0.0 < self.growing_fraction < 1.0:
            raise SynthError("growing_fraction must lie in (0, 1)")
        if self.mode not in EDGE_BUDGETS:
            raise SynthError(f"mode must be one of {sorted(EDGE_BUDGETS)}")
        if self.radius_range[0] <= 0 or self.radius_range[1] < self.radius_range[0]:
            raise SynthError("radius_range must be a positive, ordered pair")
        if self.bleb_count_range[0] < 1 or self.bleb_count_range[1] < self.bleb_count_range[0]:
            raise SynthError("bleb_count_range must be ordered and at least 1")
        if self.bleb_amplitude_range[0] < 0 or self.bleb_amplitude_range[1] < self.bleb_amplitude_range[0]:
            raise SynthError("bleb_amplitude_range must be ordered and non-negative")
        if self.noise_amplitude < 0:
            raise SynthError("noise_amplitude must be non-negative")
        if self.voxel_spacing <= 0:
            raise SynthError("voxel_spacing must be positive")

    @property
    def edge_budget(self) -> int:
        return EDGE_BUDGETS[self.mode]


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _draw_params(label: int, config: SynthConfig, seed) -> dict:
    """All random shape parameters for one sample.

    The base-shape stream is independent of the growth stream, so a
    stable and a growing sample drawn from the same seed share their
    underlying ellipsoid exactly.
    """
    base_ss, grow_ss, vessel_ss = np.random.SeedSequence(seed).spawn(3)
    base = np.random.default_rng(base_ss)
    axes = base.uniform(*config.radius_range, size=3)
    # uniform random rotation from a quaternion
    q = base.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rotation = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    low_freq = [
        (_unit(base), base.uniform(1.0, 4.0), base.uniform(0.0, 2 * np.pi))
        for _ in range(4)
    ]
    params = {
        "axes": axes,
        "rotation": rotation,
        "low_freq": low_freq,
        "low_amp": config.noise_amplitude,
        "blebs": [],
        "ripples": [],
        "tubes": [],
    }
    if label == 1:
        grow = np.random.default_rng(grow_ss)
        count = int(grow.integers(config.bleb_count_range[0], config.bleb_count_range[1] + 1))
        amps = []
        for _ in range(count):
            amp = grow.uniform(*config.bleb_amplitude_range)
            amps.append(amp)
            params["blebs"].append((_unit(grow), amp, grow.uniform(0.28, 0.5)))
        ripple_amp = 0.09 * float(np.mean(amps))
        params["ripples"] = [
            (_unit(grow), grow.uniform(6.0, 10.0), grow.uniform(0.0, 2 * np.pi), ripple_amp)
            for _ in range(4)
        ]
    if config.mode == "roi":
        vessel = np.random.default_rng(vessel_ss)
        for _ in range(int(vessel.integers(1, 3))):
            params["tubes"].append((_unit(vessel), vessel.uniform(1.0, 1.6)))
    return params


def _radial_field(params: dict, dirs: np.ndarray) -> np.ndarray:
    """Surface radius along each unit direction (star-shaped by design)."""
    d = dirs @ params["rotation"].T
    r = 1.0 / np.sqrt(np.sum((d / params["axes"]) ** 2, axis=1))
    for u, freq, phase in params["low_freq"]:
        r = r * (1.0 + params["low_amp"] * np.sin(freq * np.pi * (dirs @ u) + phase))
    for center_dir, amp, sigma in params["blebs"]:
        angle = np.arccos(np.clip(dirs @ center_dir, -1.0, 1.0))
        r = r + amp * np.exp(-0.5 * (angle / sigma) ** 2)
    for u, freq, phase, amp in params["ripples"]:
        r = r + amp * np.sin(freq * np.pi * (dirs @ u) + phase)
    return r


def _radial_mesh(params: dict, subdivisions: int = 3) -> Mesh:
    base = icosphere(subdivisions, 1.0)
    dirs = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    verts = dirs * _radial_field(params, dirs)[:, None]
    return make_mesh(verts, base.faces)


def _inside_blob(params: dict, points: np.ndarray) -> np.ndarray:
    rel = points
    rho = np.linalg.norm(rel, axis=1)
    inside = np.zeros(len(points), dtype=bool)
    nz = rho > 1e-12
    dirs = rel[nz] / rho[nz, None]
    inside[nz] = rho[nz] <= _radial_field(params, dirs)
    inside[~nz] = True
    return inside


def _inside_tubes(params: dict, points: np.ndarray, length: float = 30.0) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for direction, radius in params["tubes"]:
        # capsule from the shape center outward through the ROI wall
        t = np.clip(points @ direction, 0.0, length)
        dist = np.linalg.norm(points - t[:, None] * direction, axis=1)
        inside |= dist <= radius
    return inside


def rasterize(
    params: dict,
    spacing: float,
    half_extent: float,
    blob: bool = True,
    tubes: bool = True,
) -> VoxelMask:
    """Binary occupancy of the blob and/or its tubes on a centered grid."""
    n = int(np.ceil(2 * half_extent / spacing)) + 1
    coords = (np.arange(n) - (n - 1) / 2) * spacing
    xs, ys, zs = np.meshgrid(coords, coords, coords, indexing="ij")
    points = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    occupied = np.zeros(len(points), dtype=bool)
    if blob:
        occupied |= _inside_blob(params, points)
    if tubes and params["tubes"]:
        occupied |= _inside_tubes(params, points)
    values = occupied.reshape(n, n, n).astype(np.uint8)
    origin = (coords[0], coords[0], coords[0])
    return VoxelMask(values=values, spacing=(spacing,) * 3, origin=origin)


def _build_uia(params: dict, budget: int) -> Mesh:
    mesh = _radial_mesh(params)
    return decimate(mesh, reachable_edge_target(mesh.edge_count, budget))


def _build_roi(params: dict, budget: int, spacing: float) -> tuple[Mesh, VoxelMask]:
    lesion = rasterize(params, spacing, half_extent=11.0, tubes=False)
    vessels = rasterize(params, spacing, half_extent=11.0, blob=False)
    roi = extract_roi(vessels, lesion, RoiSpec(cube_side_mm=20.0))
    mesh = marching_cubes(roi)
    return decimate(mesh, reachable_edge_target(mesh.edge_count, budget)), roi


def generate_shape(label: int, config: SynthConfig, seed, with_mask: bool = False):
    """One labeled shape at the mode's edge budget; always a closed manifold.

    Returns the mesh, or (mesh, mask) when `with_mask` is set. Degenerate
    parameter draws are retried with derived seeds a bounded number of
    times before giving up.
    """
    if label not in (0, 1):
        raise SynthError(f"label must be 0 (stable) or 1 (growing), got {label!r}")
    budget = config.edge_budget
    last_error: Exception | None = None
    for attempt in range(SHAPE_RETRIES):
        attempt_seed = seed if attempt == 0 else (
            int(np.random.SeedSequence((_as_entropy(seed), attempt)).generate_state(1)[0])
        )
        params = _draw_params(label, config, attempt_seed)
        try:
            if config.mode == "roi":
                mesh, mask = _build_roi(params, budget, config.voxel_spacing)
            else:
                mesh = _build_uia(params, budget)
                mask = (
                    rasterize(
                        params,
                        config.voxel_spacing,
                        half_extent=float(np.max(params["axes"]) + 4.0),
                    )
                    if with_mask
                    else None
                )
            return (mesh, mask) if with_mask else mesh
        except (MeshError, NonManifoldError, VoxelError, ValueError) as exc:
            last_error = exc
    raise SynthError(
        f"could not generate a valid shape for seed {seed!r} after {SHAPE_RETRIES} attempts"
    ) from last_error


def _as_entropy(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    raise SynthError(f"seed must be an integer, got {type(seed).__name__}")


def generate_dataset(config: SynthConfig, out_dir, with_masks: bool = False):
    """Write meshes plus manifest.csv; returns the manifest path.

    Exactly round(n * growing_fraction) samples are growing. Each sample's
    shape depends only on (config.seed, sample index, label), so the files
    are reproducible hash-for-hash from the config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = config.n_samples
    n_growing = int(round(n * config.growing_fraction))
    if n_growing == 0 or n_growing == n:
        raise SynthError("growing_fraction leaves a class empty at this n_samples")
    labels = np.array([1] * n_growing + [0] * (n - n_growing))
    order_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xD5)))
    labels = labels[order_rng.permutation(n)]

    manifest_path = out / "manifest.csv"
    rows = []
    for i, label in enumerate(labels):
        sample_seed = int(
            np.random.SeedSequence((config.seed, i)).generate_state(1)[0]
        )
        name = f"sample_{i:04d}"
        if with_masks:
            mesh, mask = generate_shape(int(label), config, sample_seed, with_mask=True)
            save_mask(mask, out / f"{name}.mask.json")
        else:
            mesh = generate_shape(int(label), config, sample_seed)
        mesh_file = f"{name}.obj"
        save_mesh(mesh, out / mesh_file)
        rows.append((mesh_file, "growing" if label == 1 else "stable", ""))
    with manifest_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mesh_path", "label", "group_id"])
        writer.writerows(rows)
    return manifest_path
