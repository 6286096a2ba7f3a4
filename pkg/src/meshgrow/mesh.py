"""Triangle mesh container, edge topology, manifold checks and OBJ/OFF I/O.

Edge identity is the sorted vertex pair; edge ids follow lexicographic order
over those pairs. Incident faces of an edge are listed by ascending face
index. Those two orderings pin every downstream edge-indexed computation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Structurally invalid mesh data (bad indices, degenerate faces)."""


class MeshParseError(MeshError):
    """Unreadable or malformed mesh file."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class NonManifoldError(MeshError):
    """Operation requires a closed 2-manifold and the mesh is not one."""


@dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh.

    vertices: (V, 3) float64 positions.
    faces: (F, 3) int64 vertex indices, counter-clockwise seen from outside.
    edges: (E, 2) int64 sorted vertex pairs, rows in lexicographic order.
    edge_faces: (E, 2) int64 incident face ids, ascending; -1 marks a missing
        second face (boundary edge). Edges with more than two incident faces
        keep the two lowest here; validate_manifold counts the real incidence.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    edge_faces: np.ndarray

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def face_count(self) -> int:
        return int(self.faces.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])


@dataclass(frozen=True)
class ManifoldReport:
    is_closed_manifold: bool
    boundary_edge_count: int
    non_manifold_edge_count: int
    euler_characteristic: int
    connected_component_count: int


def _face_edge_pairs(faces: np.ndarray) -> np.ndarray:
    """(3F, 2) sorted vertex pairs: rows f, f+F, f+2F are face f's edges."""
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(pairs, axis=1)


def make_mesh(vertices, faces) -> Mesh:
    """Build a Mesh, deriving edges and edge->face incidence.

    Raises MeshError if a face is out of range or repeats a vertex. Boundary
    and non-manifold configurations are allowed here; validate_manifold
    reports them and stricter operations reject them.
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshError(f"vertices must be (V, 3), got {vertices.shape}")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshError(f"faces must be (F, 3), got {faces.shape}")
    if faces.size:
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise MeshError("face references a vertex index out of range")
        degen = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if degen.any():
            raise MeshError(f"face {int(np.flatnonzero(degen)[0])} repeats a vertex")
    if not np.isfinite(vertices).all():
        raise MeshError("non-finite vertex coordinate")

    pairs = _face_edge_pairs(faces)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    face_ids = np.tile(np.arange(len(faces), dtype=np.int64), 3)
    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    # fill ascending face ids per edge; the two lowest ids win for
    # over-full (non-manifold) edges
    order = np.lexsort((face_ids, inverse.ravel()))
    eid_sorted = inverse.ravel()[order]
    fid_sorted = face_ids[order]
    first = np.ones(len(eid_sorted), dtype=bool)
    first[1:] = eid_sorted[1:] != eid_sorted[:-1]
    slot = np.arange(len(eid_sorted)) - np.maximum.accumulate(np.where(first, np.arange(len(eid_sorted)), -1))
    keep = slot < 2
    edge_faces[eid_sorted[keep], slot[keep]] = fid_sorted[keep]
    return Mesh(vertices, faces, edges, edge_faces)


def edge_face_counts(mesh: Mesh) -> np.ndarray:
    """(E,) number of faces incident to each edge (counts beyond 2 too)."""
    pairs = _face_edge_pairs(mesh.faces)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    # uniq rows are exactly mesh.edges rows (same construction)
    out = np.zeros(mesh.edge_count, dtype=np.int64)
    out[:] = counts
    return out


def validate_manifold(mesh: Mesh) -> ManifoldReport:
    """Report closedness/manifoldness; never raises on bad topology."""
    counts = edge_face_counts(mesh)
    boundary = int((counts == 1).sum())
    non_manifold = int((counts > 2).sum())
    euler = mesh.vertex_count - mesh.edge_count + mesh.face_count
    if mesh.edge_count:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        e = mesh.edges
        n = mesh.vertex_count
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        ncomp, labels = connected_components(adj, directed=False)
        used = np.zeros(n, dtype=bool)
        used[e.ravel()] = True
        ncomp = len(np.unique(labels[used]))
    else:
        ncomp = 0
    return ManifoldReport(
        is_closed_manifold=(boundary == 0 and non_manifold == 0 and mesh.face_count > 0),
        boundary_edge_count=boundary,
        non_manifold_edge_count=non_manifold,
        euler_characteristic=euler,
        connected_component_count=ncomp,
    )


def build_edge_adjacency(mesh: Mesh) -> np.ndarray:
    """(E, 4) neighbor edge ids (a, b, c, d) for each edge.

    (a, b) are the other two edges of the lower-indexed incident face, in
    counter-clockwise order starting from the edge; (c, d) likewise for the
    higher-indexed face. Requires every edge to have exactly two incident
    faces; raises NonManifoldError naming offenders otherwise.
    """
    counts = edge_face_counts(mesh)
    bad = np.flatnonzero(counts != 2)
    if bad.size:
        raise NonManifoldError(
            f"{bad.size} edge(s) without exactly two incident faces, e.g. edge ids {bad[:8].tolist()}"
        )
    pairs = _face_edge_pairs(mesh.faces)
    _, inverse = np.unique(pairs, axis=0, return_inverse=True)
    face_edge = inverse.reshape(3, -1).T  # (F, 3): edge ids of (v0v1, v1v2, v2v0)

    adj = np.empty((mesh.edge_count, 4), dtype=np.int64)
    for col, fcol in ((0, 0), (1, 1)):
        fids = mesh.edge_faces[:, fcol]
        cyc = face_edge[fids]  # (E, 3) edge ids in ccw cycle order
        pos = np.argmax(cyc == np.arange(mesh.edge_count)[:, None], axis=1)
        nxt = cyc[np.arange(mesh.edge_count), (pos + 1) % 3]
        nnx = cyc[np.arange(mesh.edge_count), (pos + 2) % 3]
        adj[:, 2 * col] = nxt
        adj[:, 2 * col + 1] = nnx
    return adj


def edge_lengths(mesh: Mesh) -> np.ndarray:
    d = mesh.vertices[mesh.edges[:, 0]] - mesh.vertices[mesh.edges[:, 1]]
    return np.linalg.norm(d, axis=1)


def face_normals(mesh: Mesh, normalize: bool = True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = np.where(lens > 0, n / lens, 0.0)
    return n


def face_areas(mesh: Mesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalize=False), axis=1)


def surface_area(mesh: Mesh) -> float:
    return float(face_areas(mesh).sum())


def signed_volume(mesh: Mesh) -> float:
    """Enclosed volume via the divergence theorem; positive for outward winding."""
    v = mesh.vertices
    f = mesh.faces
    return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


# ---------------------------------------------------------------------------
# OBJ / OFF I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError:
                    raise MeshParseError(path, lineno, f"bad vertex coordinate in {line.rstrip()!r}")
            elif tok[0] == "f":
                refs = tok[1:]
                if len(refs) != 3:
                    raise MeshParseError(path, lineno, f"face has {len(refs)} vertices, triangles only")
                idx = []
                for r in refs:
                    head = r.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshParseError(path, lineno, f"bad face index {r!r}")
                    if i == 0:
                        raise MeshParseError(path, lineno, "OBJ face indices are 1-based, got 0")
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(idx)
            # other record types (vn, vt, usemtl, ...) are ignored
    try:
        return make_mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise MeshParseError(path, 0, str(exc))


def save_off(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.vertex_count} {mesh.face_count} {mesh.edge_count}\n")
        for v in mesh.vertices:
            fh.write(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def load_off(path) -> Mesh:
    with open(path) as fh:
        lines = fh.readlines()
    # strip comments/blank lines, remember original numbers for errors
    body = [(i + 1, ln.strip()) for i, ln in enumerate(lines)]
    body = [(no, ln) for no, ln in body if ln and not ln.startswith("#")]
    if not body:
        raise MeshParseError(path, 1, "empty OFF file")
    no0, header = body[0]
    rest = body[1:]
    if header.split()[0] != "OFF":
        raise MeshParseError(path, no0, f"expected OFF header, got {header!r}")
    if header != "OFF" and len(header.split()) == 4:
        # counts on the header line ("OFF V F E")
        counts_line, counts_no = header.split()[1:], no0
    else:
        if not rest:
            raise MeshParseError(path, no0, "missing counts line")
        (counts_no, counts_ln), rest = rest[0], rest[1:]
        counts_line = counts_ln.split()
    try:
        nv, nf = int(counts_line[0]), int(counts_line[1])
    except (ValueError, IndexError):
        raise MeshParseError(path, counts_no, "counts line must be 'V F E'")
    if len(rest) < nv + nf:
        raise MeshParseError(path, counts_no, f"expected {nv} vertices + {nf} faces, file has {len(rest)} records")
    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        no, ln = rest[i]
        tok = ln.split()
        try:
            verts[i] = [float(t) for t in tok[:3]]
        except (ValueError, IndexError):
            raise MeshParseError(path, no, f"bad vertex line {ln!r}")
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        no, ln = rest[nv + i]
        tok = ln.split()
        try:
            arity = int(tok[0])
        except (ValueError, IndexError):
            raise MeshParseError(path, no, f"bad face line {ln!r}")
        if arity != 3:
            raise MeshParseError(path, no, f"face has {arity} vertices, triangles only")
        try:
            faces[i] = [int(t) for t in tok[1:4]]
        except ValueError:
            raise MeshParseError(path, no, f"bad face line {ln!r}")
    try:
        return make_mesh(verts, faces)
    except MeshError as exc:
        raise MeshParseError(path, 0, str(exc))


def save_mesh(mesh: Mesh, path) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        save_obj(mesh, path)
    elif ext == ".off":
        save_off(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format {ext!r} (use .obj or .off)")


def load_mesh(path) -> Mesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return load_obj(path)
    if ext == ".off":
        return load_off(path)
    raise MeshError(f"unsupported mesh format {ext!r} (use .obj or .off)")
