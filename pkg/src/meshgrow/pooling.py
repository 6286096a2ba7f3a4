"""Feature-ordered edge-collapse pooling over the edge adjacency graph.

A collapse of edge e with neighbors (a, b, c, d) merges a with c and b with
d (features averaged) and drops e, removing exactly 3 columns. Collapses are
attempted in ascending L2 feature-norm order (ties by ascending column id),
with priorities fixed at pool entry; invalid candidates are re-queued after
the queue drains and the pool fails if a full retry round makes no progress.

Counts move in steps of -3, so targets not congruent to the live count mod 3
are topped up with inert zero-feature, self-adjacent padding columns, the
same scheme used to bring decimated meshes up to the network's edge budget.
Padding columns never collapse and are dropped/re-created between layers.
Real columns always occupy the leading positions.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


class PoolError(RuntimeError):
    """Pooling target unreachable (component at its minimum)."""


@dataclass
class PoolTrace:
    """Exact record of one pooling pass, enough to route gradients back."""

    in_cols: int
    out_cols: int
    survivors: np.ndarray  # ascending original column ids of surviving real edges
    collapses: list = field(default_factory=list)  # (e, a, b, c, d) original ids


def pad_columns(features: np.ndarray, adjacency: np.ndarray, budget: int):
    """Zero-pad feature columns / self-adjacent rows up to `budget` columns.

    Returns (features (C, budget), adjacency (budget, 4), real_count).
    """
    c, e = features.shape
    if e > budget:
        raise ValueError(f"mesh has {e} edges, exceeding the budget {budget}")
    out_f = np.zeros((c, budget), dtype=features.dtype)
    out_f[:, :e] = features
    out_a = np.tile(np.arange(budget, dtype=np.int64)[:, None], (1, 4))
    out_a[:e] = adjacency
    return out_f, out_a, e


def _far_pair(adj_row: np.ndarray, e: int):
    """The pair of adj_row not containing e, or None when both contain it."""
    in0 = adj_row[0] == e or adj_row[1] == e
    in1 = adj_row[2] == e or adj_row[3] == e
    if in0 and in1:
        return None
    if in0:
        return int(adj_row[2]), int(adj_row[3])
    return int(adj_row[0]), int(adj_row[1])


def mesh_pool(features: np.ndarray, adjacency: np.ndarray, real_count: int, target: int):
    """Pool (C, E) features to exactly `target` columns.

    Returns (features (C, target), adjacency (target, 4), real_count, trace).
    """
    n_ch, in_cols = features.shape
    feats = features.copy()
    adj = adjacency.copy()
    alive = np.zeros(in_cols, dtype=bool)
    alive[:real_count] = True

    live = real_count
    stop_at = live if target >= live else live - 3 * int(np.ceil((live - target) / 3.0))
    norms = np.einsum("ce,ce->e", feats[:, :real_count], feats[:, :real_count])
    heap = [(float(norms[e]), e) for e in range(real_count)]
    heapq.heapify(heap)
    trace = PoolTrace(in_cols=in_cols, out_cols=target, survivors=None)
    deferred: list = []
    progressed = True

    while live > stop_at:
        if not heap:
            if not deferred or not progressed:
                raise PoolError(
                    f"cannot pool below {live} edges (target {target}): no valid collapse"
                )
            for pri, e in deferred:
                heapq.heappush(heap, (pri, e))
            deferred = []
            progressed = False
            continue
        pri, e = heapq.heappop(heap)
        if not alive[e]:
            continue
        a, b, c, d = (int(x) for x in adj[e])
        if len({e, a, b, c, d}) != 5:
            deferred.append((pri, e))
            continue
        fa, fc, fb, fd = (_far_pair(adj[x], e) for x in (a, c, b, d))
        if fa is None or fb is None or fc is None or fd is None:
            deferred.append((pri, e))
            continue
        # the merged column may not end up adjacent to itself
        if {a, c} & set(fa) or {a, c} & set(fc) or {b, d} & set(fb) or {b, d} & set(fd):
            deferred.append((pri, e))
            continue

        remap = {c: a, d: b}
        for y in {*fa, *fc, *fb, *fd}:
            row = adj[y]
            for s in range(4):
                row[s] = remap.get(int(row[s]), int(row[s]))
        adj[a] = [remap.get(x, x) for x in (*fa, *fc)]
        adj[b] = [remap.get(x, x) for x in (*fb, *fd)]
        feats[:, a] = 0.5 * (feats[:, a] + feats[:, c])
        feats[:, b] = 0.5 * (feats[:, b] + feats[:, d])
        alive[c] = alive[d] = alive[e] = False
        live -= 3
        progressed = True
        trace.collapses.append((e, a, b, c, d))

    survivors = np.flatnonzero(alive)
    trace.survivors = survivors
    out_f = np.zeros((n_ch, target), dtype=feats.dtype)
    out_f[:, : len(survivors)] = feats[:, survivors]
    new_id = np.full(in_cols, -1, dtype=np.int64)
    new_id[survivors] = np.arange(len(survivors))
    out_a = np.tile(np.arange(target, dtype=np.int64)[:, None], (1, 4))
    out_a[: len(survivors)] = new_id[adj[survivors]]
    return out_f, out_a, len(survivors), trace


def mesh_pool_backward(grad_out: np.ndarray, trace: PoolTrace) -> np.ndarray:
    """Route output-column gradients back to input columns.

    Merges were x_a <- (x_a + x_c)/2 and x_b <- (x_b + x_d)/2 with the
    collapsed edge's feature dropped, so the reverse replay halves the
    survivor gradient into both sources; dropped and padding columns get
    zero.
    """
    n_ch = grad_out.shape[0]
    g = np.zeros((n_ch, trace.in_cols), dtype=grad_out.dtype)
    g[:, trace.survivors] = grad_out[:, : len(trace.survivors)]
    for e, a, b, c, d in reversed(trace.collapses):
        ga = 0.5 * g[:, a]
        g[:, a] = ga
        g[:, c] = ga
        gb = 0.5 * g[:, b]
        g[:, b] = gb
        g[:, d] = gb
    return g
