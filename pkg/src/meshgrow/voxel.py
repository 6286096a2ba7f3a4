"""Voxel masks, ROI extraction and isosurface meshing.

Masks live on regular grids described by (dims, spacing_mm, origin_mm); the
world position of voxel (i, j, k) is origin + (i, j, k) * spacing. On disk a
mask is a JSON sidecar plus a raw little-endian uint8 array, x fastest.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes as _skimage_marching_cubes

from .mesh import Mesh, make_mesh, signed_volume


class VoxelError(ValueError):
    pass


class EmptyMaskError(VoxelError):
    """Mask has no foreground voxels."""


class EmptyIsosurfaceError(VoxelError):
    """Iso level does not intersect the scalar field."""


class GridMismatchError(VoxelError):
    """Two masks do not share dims/spacing/origin."""


@dataclass(frozen=True)
class VoxelMask:
    """values: (nx, ny, nz) array; spacing/origin are mm triples."""

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise VoxelError(f"mask must be 3-D, got shape {v.shape}")
        if any(s <= 0 for s in self.spacing):
            raise VoxelError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)


@dataclass(frozen=True)
class RoiSpec:
    cube_side_mm: float = 20.0

    def __post_init__(self):
        if self.cube_side_mm <= 0:
            raise VoxelError("cube side must be positive")


def center_of_mass(mask: VoxelMask) -> np.ndarray:
    """World-space (mm) centroid of foreground voxel centers."""
    fg = np.asarray(mask.values) > 0
    if not fg.any():
        raise EmptyMaskError("center of mass of an empty mask")
    idx = ndimage.center_of_mass(fg)
    return np.asarray(mask.origin) + np.asarray(idx) * np.asarray(mask.spacing)


def _same_grid(a: VoxelMask, b: VoxelMask) -> bool:
    return (
        a.dims == b.dims
        and np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9)
        and np.allclose(a.origin, b.origin, rtol=0, atol=1e-9)
    )


def extract_roi(vessels: VoxelMask, lesion: VoxelMask, spec: RoiSpec = RoiSpec()) -> VoxelMask:
    """Crop the vessel+lesion union to a cube around the lesion centroid.

    The crop keeps voxels whose centers fall inside the axis-aligned cube of
    side spec.cube_side_mm centered at the lesion's center of mass, clamped
    to the grid. Within the crop, 26-connected components of the union that
    do not touch the lesion are discarded. Output is a binary mask on the
    cropped subgrid.
    """
    if not _same_grid(vessels, lesion):
        raise GridMismatchError(
            f"grids differ: dims {vessels.dims} vs {lesion.dims}, "
            f"spacing {vessels.spacing} vs {lesion.spacing}, origin {vessels.origin} vs {lesion.origin}"
        )
    com = center_of_mass(lesion)
    half = spec.cube_side_mm / 2.0
    spacing = np.asarray(lesion.spacing)
    origin = np.asarray(lesion.origin)
    lo = np.ceil((com - half - origin) / spacing - 1e-9).astype(int)
    hi = np.floor((com + half - origin) / spacing + 1e-9).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(lesion.dims) - 1)
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))

    lesion_c = np.asarray(lesion.values)[sl] > 0
    union_c = (np.asarray(vessels.values)[sl] > 0) | lesion_c
    labels, _ = ndimage.label(union_c, structure=np.ones((3, 3, 3), dtype=int))
    keep = np.unique(labels[lesion_c])
    keep = keep[keep > 0]
    out = np.isin(labels, keep).astype(np.uint8)
    return VoxelMask(out, lesion.spacing, tuple(origin + lo * spacing))


def marching_cubes(mask: VoxelMask, iso: float = 0.5) -> Mesh:
    """Extract the iso-level surface as a closed, outward-oriented mesh.

    The field is zero-padded by one voxel so surfaces cut by the grid
    boundary come out capped; vertex coordinates are in world mm.
    """
    values = np.asarray(mask.values, dtype=np.float64)
    if not (values.min() < iso < values.max()):
        raise EmptyIsosurfaceError(
            f"iso level {iso} outside field range [{values.min()}, {values.max()}]"
        )
    padded = np.pad(values, 1, mode="constant", constant_values=0.0)
    verts, faces, _, _ = _skimage_marching_cubes(
        padded, level=iso, spacing=mask.spacing, allow_degenerate=False
    )
    verts = verts + (np.asarray(mask.origin) - np.asarray(mask.spacing))
    mesh = make_mesh(verts, faces.astype(np.int64))
    if signed_volume(mesh) < 0:
        mesh = make_mesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


# ---------------------------------------------------------------------------
# mask file format: <name>.json sidecar + raw little-endian uint8, x fastest


def save_mask(mask: VoxelMask, json_path) -> None:
    json_path = str(json_path)
    if not json_path.endswith(".json"):
        raise VoxelError("mask sidecar path must end in .json")
    base = os.path.basename(json_path)
    for suffix in (".mask.json", ".json"):
        if base.endswith(suffix):
            data_file = base[: -len(suffix)] + ".raw"
            break
    raw = np.asarray(mask.values > 0, dtype=np.uint8)
    # x fastest => Fortran order on (nx, ny, nz)
    with open(os.path.join(os.path.dirname(json_path) or ".", data_file), "wb") as fh:
        fh.write(np.asfortranarray(raw).tobytes(order="F"))
    sidecar = {
        "dims": list(mask.dims),
        "spacing_mm": list(mask.spacing),
        "origin_mm": list(mask.origin),
        "dtype": "u8",
        "data_file": data_file,
    }
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mask(json_path) -> VoxelMask:
    json_path = str(json_path)
    try:
        with open(json_path) as fh:
            sidecar = json.load(fh)
    except json.JSONDecodeError as exc:
        raise VoxelError(f"{json_path}: invalid JSON sidecar: {exc}")
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "data_file"):
        if key not in sidecar:
            raise VoxelError(f"{json_path}: sidecar missing key {key!r}")
    if sidecar["dtype"] != "u8":
        raise VoxelError(f"{json_path}: unsupported dtype {sidecar['dtype']!r}")
    dims = tuple(int(d) for d in sidecar["dims"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VoxelError(f"{json_path}: bad dims {sidecar['dims']}")
    raw_path = os.path.join(os.path.dirname(json_path) or ".", sidecar["data_file"])
    raw = np.fromfile(raw_path, dtype=np.uint8)
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VoxelError(
            f"{raw_path}: raw size {raw.size} does not match dims product {expected}"
        )
    values = raw.reshape(dims, order="F")
    return VoxelMask(values, tuple(sidecar["spacing_mm"]), tuple(sidecar["origin_mm"]))


def mask_sha256(json_path) -> str:
    """Digest of sidecar + raw payload, for provenance records."""
    json_path = str(json_path)
    h = hashlib.sha256()
    with open(json_path, "rb") as fh:
        payload = fh.read()
    h.update(payload)
    data_file = json.loads(payload)["data_file"]
    with open(os.path.join(os.path.dirname(json_path) or ".", data_file), "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()
