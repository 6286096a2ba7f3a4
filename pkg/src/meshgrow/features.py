"""Per-edge input channels: relative geometric features, shape descriptors
and optional edge midpoints.

Channel order is fixed: [dihedral, inner_angle_1, inner_angle_2, ratio_1,
ratio_2, shape_index, curvedness] plus [mid_x, mid_y, mid_z] when
coordinates are enabled. Vertex-based descriptors are averaged onto edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, NonManifoldError, build_edge_adjacency, edge_face_counts, face_normals

GEOMETRIC_CHANNELS = ("dihedral", "inner_angle_1", "inner_angle_2", "ratio_1", "ratio_2")
SHAPE_CHANNELS = ("shape_index", "curvedness")
COORD_CHANNELS = ("mid_x", "mid_y", "mid_z")

UMBILIC_TOL = 1e-9
FLAT_TOL = 1e-12


class DegenerateFaceError(ValueError):
    def __init__(self, face_id: int):
        self.face_id = int(face_id)
        super().__init__(f"degenerate (zero-area) face {face_id}")


class DegenerateRingError(ValueError):
    def __init__(self, vertex_id: int):
        self.vertex_id = int(vertex_id)
        super().__init__(f"degenerate (zero-area) one-ring at vertex {vertex_id}")


@dataclass(frozen=True)
class VertexCurvatures:
    """Principal curvatures per vertex (1/mm), k1 >= k2."""

    k1: np.ndarray
    k2: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return 0.5 * (self.k1 + self.k2)

    @property
    def gaussian(self) -> np.ndarray:
        return self.k1 * self.k2


@dataclass(frozen=True)
class EdgeFeatureMatrix:
    """(C, E) float64 matrix plus its channel names."""

    values: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.values.shape[0] != len(self.channel_names):
            raise ValueError("channel name count does not match matrix rows")

    @property
    def channel_count(self) -> int:
        return int(self.values.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class FeatureNormStats:
    mean: np.ndarray
    std: np.ndarray


def _require_closed(mesh: Mesh) -> None:
    if (edge_face_counts(mesh) != 2).any():
        raise NonManifoldError("operation requires a closed 2-manifold mesh")


def _face_corner_angles(mesh: Mesh) -> np.ndarray:
    """(F, 3) interior angles at corners (v0, v1, v2)."""
    v = mesh.vertices
    f = mesh.faces
    p = [v[f[:, i]] for i in range(3)]
    ang = np.empty((len(f), 3))
    for i in range(3):
        e1 = p[(i + 1) % 3] - p[i]
        e2 = p[(i + 2) % 3] - p[i]
        c = np.einsum("ij,ij->i", e1, e2)
        s = np.linalg.norm(np.cross(e1, e2), axis=1)
        ang[:, i] = np.arctan2(s, c)
    return ang


def geometric_edge_features(mesh: Mesh) -> np.ndarray:
    """5 x E matrix: dihedral, two opposite inner angles (sorted), two
    height/edge-length ratios (sorted).

    The dihedral is the interior angle between the incident faces: pi when
    coplanar, < pi across convex edges, > pi across concave ones (decided by
    which side of the first face's plane the far apex lies on).
    """
    _require_closed(mesh)
    v = mesh.vertices
    f = mesh.faces
    areas2 = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    bad = np.flatnonzero(areas2 < 1e-14)
    if bad.size:
        raise DegenerateFaceError(bad[0])

    normals = face_normals(mesh)
    e0 = mesh.edges[:, 0]
    e1 = mesh.edges[:, 1]
    f1 = mesh.edge_faces[:, 0]
    f2 = mesh.edge_faces[:, 1]

    # apex of each incident face = the face vertex not on the edge
    def apex(face_ids):
        tri = mesh.faces[face_ids]  # (E, 3)
        on_edge = (tri == e0[:, None]) | (tri == e1[:, None])
        return tri[~on_edge]

    w1 = apex(f1)
    w2 = apex(f2)

    n1 = normals[f1]
    n2 = normals[f2]
    cosang = np.clip(np.einsum("ij,ij->i", n1, n2), -1.0, 1.0)
    delta = np.arccos(cosang)
    side = np.einsum("ij,ij->i", n1, v[w2] - v[e0])
    dihedral = np.where(side <= 0, np.pi - delta, np.pi + delta)

    p0 = v[e0]
    p1 = v[e1]
    edge_vec = p1 - p0
    edge_len = np.linalg.norm(edge_vec, axis=1)

    def opposite_angle_and_ratio(w):
        a = p0 - v[w]
        b = p1 - v[w]
        cross = np.cross(a, b)
        s = np.linalg.norm(cross, axis=1)
        c = np.einsum("ij,ij->i", a, b)
        angle = np.arctan2(s, c)
        height = s / edge_len  # twice triangle area / base
        return angle, height / edge_len

    ang1, rat1 = opposite_angle_and_ratio(w1)
    ang2, rat2 = opposite_angle_and_ratio(w2)
    angles = np.sort(np.stack([ang1, ang2]), axis=0)
    ratios = np.sort(np.stack([rat1, rat2]), axis=0)
    return np.stack([dihedral, angles[0], angles[1], ratios[0], ratios[1]])


def _mixed_voronoi_areas(mesh: Mesh, angles: np.ndarray) -> np.ndarray:
    """Meyer mixed areas per vertex: Voronoi weights for acute triangles,
    T/2 at the obtuse corner and T/4 at the others otherwise."""
    v = mesh.vertices
    f = mesh.faces
    area = np.zeros(len(v))
    tri_area = 0.5 * np.linalg.norm(
        np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
    )
    cot = np.cos(angles) / np.sin(angles)
    obtuse = angles.max(axis=1) > np.pi / 2
    sq = np.empty((len(f), 3))
    for i in range(3):
        sq[:, i] = np.einsum("ij,ij->i", v[f[:, (i + 1) % 3]] - v[f[:, i]], v[f[:, (i + 1) % 3]] - v[f[:, i]])
    # sq[:, i] = |v_i v_{i+1}|^2 ; corner i sees opposite edge (i+1, i+2)
    for i in range(3):
        opp1 = (i + 1) % 3  # edge (i, i+1) has cot at corner i+2
        opp2 = (i + 2) % 3
        voronoi = (sq[:, i] * cot[:, opp2] + sq[:, opp2] * cot[:, opp1]) / 8.0
        corner_obtuse = angles[:, i] > np.pi / 2
        contrib = np.where(
            obtuse, np.where(corner_obtuse, tri_area / 2.0, tri_area / 4.0), voronoi
        )
        np.add.at(area, f[:, i], contrib)
    return area


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    n = face_normals(mesh, normalize=False)  # area-weighted
    out = np.zeros_like(mesh.vertices)
    for i in range(3):
        np.add.at(out, mesh.faces[:, i], n)
    lens = np.linalg.norm(out, axis=1, keepdims=True)
    return np.where(lens > 0, out / lens, 0.0)


def vertex_curvatures(mesh: Mesh) -> VertexCurvatures:
    """Discrete principal curvatures.

    H comes from the cotangent-Laplacian mean-curvature normal, signed by
    the outward vertex normal so convex regions are positive; K from the
    angle deficit over the Meyer mixed Voronoi area.
    """
    _require_closed(mesh)
    v = mesh.vertices
    f = mesh.faces
    angles = _face_corner_angles(mesh)
    if (np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1) < 1e-14).any():
        bad = np.flatnonzero(
            np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1) < 1e-14
        )
        raise DegenerateFaceError(bad[0])
    areas = _mixed_voronoi_areas(mesh, angles)
    tiny = np.flatnonzero(areas < 1e-14)
    if tiny.size:
        raise DegenerateRingError(tiny[0])

    # cotangent Laplacian: for edge (i, j) in face with far corner k,
    # cot(angle at k) weights (p_j - p_i) into vertex i and vice versa
    lap = np.zeros_like(v)
    cot = np.cos(angles) / np.sin(angles)
    for i in range(3):
        a = f[:, (i + 1) % 3]
        b = f[:, (i + 2) % 3]
        w = cot[:, i][:, None]
        np.add.at(lap, a, w * (v[b] - v[a]))
        np.add.at(lap, b, w * (v[a] - v[b]))
    lap /= 2.0 * areas[:, None]

    nrm = vertex_normals(mesh)
    h = -0.5 * np.einsum("ij,ij->i", lap, nrm)

    deficit = 2.0 * np.pi - np.bincount(
        f.ravel(order="F"), weights=angles.ravel(order="F"), minlength=len(v)
    )
    k_gauss = deficit / areas

    disc = np.sqrt(np.maximum(h * h - k_gauss, 0.0))
    return VertexCurvatures(k1=h + disc, k2=h - disc)


def angle_deficit_sum(mesh: Mesh) -> float:
    angles = _face_corner_angles(mesh)
    deficit = 2.0 * np.pi - np.bincount(
        mesh.faces.ravel(order="F"), weights=angles.ravel(order="F"), minlength=mesh.vertex_count
    )
    return float(deficit.sum())


def shape_index_curvedness(curv: VertexCurvatures) -> tuple[np.ndarray, np.ndarray]:
    """Koenderink shape index in [-1, 1] and curvedness (1/mm)."""
    k1 = np.asarray(curv.k1, dtype=np.float64)
    k2 = np.asarray(curv.k2, dtype=np.float64)
    c = np.sqrt(0.5 * (k1 * k1 + k2 * k2))
    spread = k1 - k2
    flat = c < FLAT_TOL
    umbilic = spread < UMBILIC_TOL * np.maximum(c, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        si = (2.0 / np.pi) * np.arctan2(k1 + k2, spread)
    si = np.where(umbilic, np.sign(k1 + k2), si)
    si = np.where(flat, 0.0, si)
    return si, c


def vertex_to_edge(values: np.ndarray, mesh: Mesh) -> np.ndarray:
    values = np.asarray(values)
    return 0.5 * (values[mesh.edges[:, 0]] + values[mesh.edges[:, 1]])


def edge_midpoints(mesh: Mesh) -> np.ndarray:
    """3 x E world-coordinate midpoints."""
    v = mesh.vertices
    return 0.5 * (v[mesh.edges[:, 0]] + v[mesh.edges[:, 1]]).T


def assemble_features(mesh: Mesh, with_coords: bool = False, center=None) -> EdgeFeatureMatrix:
    """Stack the documented channels into a (7 or 10) x E matrix.

    center: optional world point subtracted from the midpoint channels
    (cohort recentring); ignored when with_coords is false.
    """
    geo = geometric_edge_features(mesh)
    si_v, c_v = shape_index_curvedness(vertex_curvatures(mesh))
    rows = [geo, vertex_to_edge(si_v, mesh)[None, :], vertex_to_edge(c_v, mesh)[None, :]]
    names = GEOMETRIC_CHANNELS + SHAPE_CHANNELS
    if with_coords:
        mid = edge_midpoints(mesh)
        if center is not None:
            mid = mid - np.asarray(center, dtype=np.float64).reshape(3, 1)
        rows.append(mid)
        names = names + COORD_CHANNELS
    values = np.concatenate(rows, axis=0)
    if not np.isfinite(values).all():
        raise ValueError("feature matrix contains NaN/Inf")
    return EdgeFeatureMatrix(values=values, channel_names=names)


def fit_normalization(train_features) -> FeatureNormStats:
    """Pooled per-channel mean/std over all edges of all training matrices."""
    mats = [fm.values if isinstance(fm, EdgeFeatureMatrix) else np.asarray(fm) for fm in train_features]
    if not mats:
        raise ValueError("need at least one training matrix")
    pooled = np.concatenate(mats, axis=1)
    mean = pooled.mean(axis=1)
    std = pooled.std(axis=1)
    std = np.where(std > 1e-12, std, 1.0)
    return FeatureNormStats(mean=mean, std=std)


def apply_normalization(features: EdgeFeatureMatrix, stats: FeatureNormStats) -> EdgeFeatureMatrix:
    vals = (features.values - stats.mean[:, None]) / stats.std[:, None]
    return EdgeFeatureMatrix(values=vals, channel_names=features.channel_names)
