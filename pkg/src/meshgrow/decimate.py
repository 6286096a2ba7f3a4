"""Greedy quadric-error edge-collapse decimation.

Each collapse of a manifold interior edge removes 1 vertex, 2 faces and 3
edges, so from E0 edges only counts congruent to E0 (mod 3) are reachable;
decimate() stops at the largest reachable count <= target_edges. Collapses
that would break the vertex link condition, flip a face normal or create a
degenerate face are skipped.
"""

from __future__ import annotations

import heapq

import numpy as np

from .mesh import Mesh, NonManifoldError, edge_face_counts, make_mesh


class DecimationError(RuntimeError):
    """Target not reachable without breaking manifoldness."""


def reachable_edge_target(current_edges: int, target_edges: int) -> int:
    """Largest edge count <= target reachable by -3 steps from current."""
    if target_edges >= current_edges:
        return current_edges
    return current_edges - 3 * int(np.ceil((current_edges - target_edges) / 3.0))


def _plane_quadric(n: np.ndarray, d: float) -> np.ndarray:
    p = np.array([n[0], n[1], n[2], d])
    return np.outer(p, p)


def _vertex_quadrics(verts, faces) -> np.ndarray:
    q = np.zeros((len(verts), 4, 4))
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(norms > 0, n / norms, 0.0)
    d = -np.einsum("ij,ij->i", n, v0)
    p = np.concatenate([n, d[:, None]], axis=1)  # (F, 4)
    k = np.einsum("fi,fj->fij", p, p)
    for col in range(3):
        np.add.at(q, faces[:, col], k)
    return q


def _optimal_point(q: np.ndarray, p0: np.ndarray, p1: np.ndarray):
    """Collapse position minimizing quadric cost; falls back to best of
    endpoint/midpoint candidates when the system is near-singular."""
    a = q[:3, :3]
    b = -q[:3, 3]
    try:
        if abs(np.linalg.det(a)) > 1e-12:
            x = np.linalg.solve(a, b)
            return x, _quadric_cost(q, x)
    except np.linalg.LinAlgError:
        pass
    cands = [p0, p1, 0.5 * (p0 + p1)]
    costs = [_quadric_cost(q, c) for c in cands]
    i = int(np.argmin(costs))
    return cands[i], costs[i]


def _quadric_cost(q: np.ndarray, x: np.ndarray) -> float:
    h = np.array([x[0], x[1], x[2], 1.0])
    return float(h @ q @ h)


class _EditableMesh:
    """Mutable halfedge-free topology for collapse editing.

    Keeps faces as vertex triples with alive flags plus per-vertex incident
    face sets; edge bookkeeping is implicit (derived from faces on demand).
    """

    def __init__(self, mesh: Mesh):
        self.verts = mesh.vertices.copy()
        self.faces = mesh.faces.copy()
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.vert_faces = [set() for _ in range(len(self.verts))]
        for fi, (a, b, c) in enumerate(self.faces):
            self.vert_faces[a].add(fi)
            self.vert_faces[b].add(fi)
            self.vert_faces[c].add(fi)
        self.n_edges = mesh.edge_count

    def vertex_neighbors(self, v: int) -> set:
        out = set()
        for fi in self.vert_faces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def faces_with_edge(self, u: int, v: int) -> list:
        return [fi for fi in self.vert_faces[u] & self.vert_faces[v]]

    def collapse_ok(self, u: int, v: int, new_pos: np.ndarray) -> bool:
        shared = self.faces_with_edge(u, v)
        if len(shared) != 2:
            return False
        # link condition: common one-ring neighbors must be exactly the two
        # apices of the shared faces
        common = self.vertex_neighbors(u) & self.vertex_neighbors(v)
        if len(common) != 2:
            return False
        # no normal flips or degenerate faces among surviving faces
        for fi in (self.vert_faces[u] | self.vert_faces[v]) - set(shared):
            tri = self.faces[fi]
            old = [self.verts[i] for i in tri]
            new = [new_pos if i in (u, v) else self.verts[i] for i in tri]
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            nn = np.linalg.norm(n_new)
            if nn < 1e-14 or np.dot(n_old, n_new) <= 1e-12 * np.linalg.norm(n_old) * nn:
                return False
        return True

    def collapse(self, u: int, v: int, new_pos: np.ndarray) -> None:
        """Merge v into u placed at new_pos. Caller checked collapse_ok."""
        for fi in self.faces_with_edge(u, v):
            self.face_alive[fi] = False
            for w in self.faces[fi]:
                self.vert_faces[w].discard(fi)
        for fi in list(self.vert_faces[v]):
            tri = self.faces[fi]
            self.faces[fi] = [u if w == v else w for w in tri]
            self.vert_faces[v].discard(fi)
            self.vert_faces[u].add(fi)
        self.verts[u] = new_pos
        self.n_edges -= 3

    def to_mesh(self) -> Mesh:
        faces = self.faces[self.face_alive]
        used = np.zeros(len(self.verts), dtype=bool)
        used[faces.ravel()] = True
        remap = np.cumsum(used) - 1
        return make_mesh(self.verts[used], remap[faces])


def decimate(mesh: Mesh, target_edges: int) -> Mesh:
    if target_edges < 6:
        raise ValueError(f"target_edges must be >= 6, got {target_edges}")
    if mesh.edge_count <= target_edges:
        return mesh
    counts = edge_face_counts(mesh)
    if (counts != 2).any():
        raise NonManifoldError("decimate requires a closed 2-manifold mesh")

    em = _EditableMesh(mesh)
    quadrics = _vertex_quadrics(em.verts, mesh.faces)
    stop_at = reachable_edge_target(mesh.edge_count, target_edges)

    heap: list = []
    stamp = {}

    def push(u, v):
        key = (min(u, v), max(u, v))
        pos, cost = _optimal_point(quadrics[u] + quadrics[v], em.verts[u], em.verts[v])
        ver = stamp.get(key, 0) + 1
        stamp[key] = ver
        heapq.heappush(heap, (cost, key, ver, pos))

    for u, v in mesh.edges:
        push(int(u), int(v))

    deferred: list = []
    progressed = True
    while em.n_edges > stop_at:
        if not heap:
            if not deferred or not progressed:
                raise DecimationError(
                    f"no valid collapse available at {em.n_edges} edges (target {stop_at})"
                )
            for key in deferred:
                push(*key)
            deferred = []
            progressed = False
            continue
        cost, key, ver, pos = heapq.heappop(heap)
        if stamp.get(key) != ver:
            continue  # stale entry
        u, v = key
        # endpoints may have been merged away
        if not em.vert_faces[u] or not em.vert_faces[v]:
            continue
        if v not in em.vertex_neighbors(u):
            continue
        if not em.collapse_ok(u, v, pos):
            deferred.append(key)
            continue
        em.collapse(u, v, pos)
        quadrics[u] = quadrics[u] + quadrics[v]
        progressed = True
        for w in em.vertex_neighbors(u):
            push(u, int(w))
    return em.to_mesh()
