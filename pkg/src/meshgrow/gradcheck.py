"""Central finite-difference verification of every layer and the full model.

All checks run in float64. Layer checks compare analytic gradients of a
random scalar projection against central differences; the end-to-end check
differentiates the weighted cross-entropy loss through the whole network,
including pooling (exact trace replay) and batch normalization.
"""

from __future__ import annotations

import numpy as np

from .decimate import decimate, reachable_edge_target
from .features import assemble_features
from .mesh import build_edge_adjacency
from .network import (
    ModelConfig,
    NetworkState,
    backward,
    batch_norm_backward,
    batch_norm_forward,
    edge_conv_backward,
    edge_conv_forward,
    forward,
    init_state,
    weighted_cross_entropy,
)
from .pooling import mesh_pool, mesh_pool_backward, pad_columns
from .primitives import icosphere

LAYER_TOL = 1e-4
E2E_TOL = 1e-3


def _rel_err(analytic: float, fd: float) -> float:
    # Central differences on a ~O(1) loss bottom out near 5e-11 at
    # eps=1e-6; below 1e-8 both values are noise, so compare absolutely.
    scale = max(abs(analytic), abs(fd))
    if scale < 1e-8:
        return abs(analytic - fd)
    return abs(analytic - fd) / scale


def fd_max_error(f, x: np.ndarray, grad: np.ndarray, eps: float = 1e-6, sample: int | None = None, rng=None) -> float:
    """Max relative error between `grad` and central differences of f at x."""
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=sample, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        worst = max(worst, _rel_err(float(gflat[i]), (fp - fm) / (2.0 * eps)))
    return worst


def _fixture(seed: int, edges: int = 150):
    """Closed manifold with exactly `edges` edges plus random conv features."""
    base = icosphere(2, 1.0)
    mesh = decimate(base, reachable_edge_target(base.edge_count, edges))
    adj = build_edge_adjacency(mesh)
    return mesh, adj


def layer_checks(seed: int = 0, edges: int = 150) -> dict:
    """Per-layer max relative FD errors. Keys name layer and argument."""
    rng = np.random.default_rng(seed)
    mesh, adj = _fixture(seed, edges)
    e = mesh.edge_count
    c_in, c_out = 5, 7
    x = rng.normal(size=(c_in, e))
    kernel = rng.normal(size=(c_out, c_in, 5))
    bias = rng.normal(size=c_out)
    w = rng.normal(size=(c_out, e))
    out = {}

    def conv_loss():
        return float((w * edge_conv_forward(x, adj, kernel, bias)).sum())

    dx, dk, db = edge_conv_backward(w, x, adj, kernel)
    out["edge_conv/input"] = fd_max_error(conv_loss, x, dx, sample=60, rng=rng)
    out["edge_conv/kernel"] = fd_max_error(conv_loss, kernel, dk, sample=60, rng=rng)
    out["edge_conv/bias"] = fd_max_error(conv_loss, bias, db)

    bsz = 3
    xb = rng.normal(size=(bsz, c_in, e))
    gamma = rng.normal(size=c_in) + 1.5
    beta = rng.normal(size=c_in)
    wb = rng.normal(size=(bsz, c_in, e))

    def bn_loss():
        y, _ = batch_norm_forward(xb, gamma, beta, np.zeros(c_in), np.ones(c_in), 1e-5, 0.1, training=True)
        return float((wb * y).sum())

    y, stats = batch_norm_forward(xb, gamma, beta, np.zeros(c_in), np.ones(c_in), 1e-5, 0.1, training=True)
    dxb, dg, dbeta = batch_norm_backward(wb, xb, gamma, stats)
    out["batch_norm/input"] = fd_max_error(bn_loss, xb, dxb, sample=60, rng=rng)
    out["batch_norm/gamma"] = fd_max_error(bn_loss, gamma, dg)
    out["batch_norm/beta"] = fd_max_error(bn_loss, beta, dbeta)

    xp, ap, real = pad_columns(rng.normal(size=(c_in, e)), adj, e + 2)
    target = real - 3 * (real // 5) + 1  # forces a padded, non-mod-3 output
    wp = rng.normal(size=(c_in, target))

    def pool_loss():
        yy, _, _, _ = mesh_pool(xp, ap, real, target)
        return float((wp * yy).sum())

    yy, _, _, tr = mesh_pool(xp, ap, real, target)
    gp = mesh_pool_backward(wp, tr)
    out["mesh_pool/input"] = fd_max_error(pool_loss, xp, gp, sample=80, rng=rng)

    logits = rng.normal(size=(6, 2))
    labels = np.array([0, 1, 1, 0, 1, 0])
    weights = np.array([0.3, 0.7])

    def ce_loss():
        return weighted_cross_entropy(logits, labels, weights)[0]

    _, dlogits = weighted_cross_entropy(logits, labels, weights)
    out["cross_entropy/logits"] = fd_max_error(ce_loss, logits, dlogits)
    return out


def end_to_end_check(seed: int = 0, edges: int = 150, sample_per_tensor: int = 20) -> dict:
    """FD-check d(loss)/d(param) through the whole network. float64."""
    rng = np.random.default_rng(seed)
    mesh, adj = _fixture(seed, edges)
    feats = assemble_features(mesh, with_coords=False).values
    budget = edges
    # Pool chain keeps the proportions of the 150-edge fixture
    # (120/100/80/64) so any budget gets a strictly decreasing ladder.
    targets = []
    prev = budget
    for frac in (4 / 5, 2 / 3, 8 / 15, 32 / 75):
        prev = min(prev - 1, max(6, round(budget * frac)))
        targets.append(prev)
    config = ModelConfig(
        input_channels=7,
        input_edges=budget,
        conv_channels=(6, 8, 10, 12),
        pool_targets=tuple(targets),
        fc_hidden=16,
    )
    state = init_state(config, seed=seed + 1, dtype=np.float64)
    # Zero-init biases park pad-column conv outputs exactly on the relu
    # kink, where central differences and the subgradient disagree.
    # Jitter every parameter so the check runs at a differentiable point.
    jitter = np.random.default_rng(seed + 2)
    for key in state.params:
        state.params[key] = state.params[key] + 0.01 * jitter.normal(
            size=state.params[key].shape
        )
    bsz = 3
    fb = np.stack([feats * (1.0 + 0.05 * rng.normal(size=feats.shape)) for _ in range(bsz)])
    f0, a0, real = pad_columns(fb[0], adj, budget)
    batch_f = np.stack([pad_columns(fb[m], adj, budget)[0] for m in range(bsz)])
    batch_a = np.stack([a0] * bsz)
    reals = [real] * bsz
    labels = np.array([0, 1, 0])
    weights = np.array([0.3, 0.7])

    def loss():
        logits, _ = forward(state, batch_f, batch_a, reals, training=True)
        return weighted_cross_entropy(logits, labels, weights)[0]

    logits, cache = forward(state, batch_f, batch_a, reals, training=True)
    _, dlogits = weighted_cross_entropy(logits, labels, weights)
    grads = backward(state, cache, dlogits)
    report = {}
    for name in sorted(grads):
        report[name] = fd_max_error(loss, state.params[name], grads[name], sample=sample_per_tensor, rng=rng)
    return report
