"""Edge-convolutional classifier with mesh pooling, built on numpy.

Architecture: four blocks of [edge conv -> ReLU -> batch norm -> mesh pool]
(the norm/pool order can be swapped), then global average pooling over the
edge dimension and two fully connected layers producing class logits.

The edge convolution is permutation-ambiguity-safe: for an edge e with
neighbors (a, b) in one face and (c, d) in the other, the kernel sees the
5-tuple (x_e, |x_a - x_c|, x_a + x_c, |x_b - x_d|, x_b + x_d), which is
invariant to swapping the two faces together with their apices.

All forward/backward passes are exact (verified by central finite
differences); the optimizer is Adam. float32 and float64 are supported.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .pooling import mesh_pool, mesh_pool_backward


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int
    input_edges: int
    conv_channels: tuple = (32, 64, 128, 256)
    pool_targets: tuple = (750, 600, 500, 400)
    fc_hidden: int = 100
    n_classes: int = 2
    norm_after_pool: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_targets", tuple(int(t) for t in self.pool_targets))
        if self.input_channels not in (7, 10):
            raise ConfigError(f"input_channels must be 7 or 10, got {self.input_channels}")
        if len(self.conv_channels) != len(self.pool_targets):
            raise ConfigError("conv_channels and pool_targets must have equal length")
        if not self.conv_channels:
            raise ConfigError("need at least one block")
        seq = (self.input_edges,) + self.pool_targets
        if any(b >= a for a, b in zip(seq, seq[1:])):
            raise ConfigError(
                f"pool targets must decrease strictly from the edge budget, got {seq}"
            )
        if min(self.pool_targets) < 1 or self.input_edges < 1:
            raise ConfigError("edge counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class NetworkState:
    config: ModelConfig
    params: dict
    buffers: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0

    @property
    def dtype(self):
        return self.params["fc2_w"].dtype


def init_state(config: ModelConfig, seed: int, dtype=np.float32) -> NetworkState:
    """He-initialized parameters, zeroed biases and batch-norm buffers."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict = {}
    buffers: dict = {}
    c_in = config.input_channels
    for i, c_out in enumerate(config.conv_channels):
        fan_in = c_in * 5
        params[f"conv{i}_kernel"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, 5)).astype(dtype)
        params[f"conv{i}_bias"] = np.zeros(c_out, dtype=dtype)
        params[f"bn{i}_gamma"] = np.ones(c_out, dtype=dtype)
        params[f"bn{i}_beta"] = np.zeros(c_out, dtype=dtype)
        buffers[f"bn{i}_running_mean"] = np.zeros(c_out, dtype=dtype)
        buffers[f"bn{i}_running_var"] = np.ones(c_out, dtype=dtype)
        c_in = c_out
    params["fc1_w"] = rng.normal(0.0, np.sqrt(2.0 / c_in), (config.fc_hidden, c_in)).astype(dtype)
    params["fc1_b"] = np.zeros(config.fc_hidden, dtype=dtype)
    params["fc2_w"] = rng.normal(0.0, np.sqrt(2.0 / config.fc_hidden), (config.n_classes, config.fc_hidden)).astype(dtype)
    params["fc2_b"] = np.zeros(config.n_classes, dtype=dtype)
    state = NetworkState(config=config, params=params, buffers=buffers)
    state.adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    state.adam_v = {k: np.zeros_like(v) for k, v in params.items()}
    return state


# ---------------------------------------------------------------------------
# layers


def _gather(x: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """(C, 5, E) conv input tuple from (C, E) features and (E, 4) adjacency."""
    xa, xb, xc, xd = (x[:, adj[:, i]] for i in range(4))
    return np.stack([x, np.abs(xa - xc), xa + xc, np.abs(xb - xd), xb + xd], axis=1)


def edge_conv_forward(x: np.ndarray, adj: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c_out, c_in, _ = kernel.shape
    t = _gather(x, adj)
    y = kernel.reshape(c_out, c_in * 5) @ t.reshape(c_in * 5, -1)
    return y + bias[:, None]


def edge_conv_backward(dy: np.ndarray, x: np.ndarray, adj: np.ndarray, kernel: np.ndarray):
    """Returns (dx, dkernel, dbias). |.| uses the 0-at-0 subgradient."""
    c_out, c_in, _ = kernel.shape
    e = x.shape[1]
    t = _gather(x, adj)
    dkernel = (dy @ t.reshape(c_in * 5, e).T).reshape(c_out, c_in, 5)
    dbias = dy.sum(axis=1)
    dt = (kernel.reshape(c_out, c_in * 5).T @ dy).reshape(c_in, 5, e)

    xa, xb, xc, xd = (x[:, adj[:, i]] for i in range(4))
    s_ac = np.sign(xa - xc)
    s_bd = np.sign(xb - xd)
    dx = dt[:, 0].copy()
    # scatter-add neighbor contributions with one bincount per mesh
    cols = np.concatenate([adj[:, 0], adj[:, 2], adj[:, 0], adj[:, 2], adj[:, 1], adj[:, 3], adj[:, 1], adj[:, 3]])
    vals = np.concatenate(
        [dt[:, 1] * s_ac, -dt[:, 1] * s_ac, dt[:, 2], dt[:, 2], dt[:, 3] * s_bd, -dt[:, 3] * s_bd, dt[:, 4], dt[:, 4]],
        axis=1,
    )
    flat = (np.arange(c_in)[:, None] * e + cols[None, :]).ravel()
    dx += np.bincount(flat, weights=vals.ravel(), minlength=c_in * e).reshape(c_in, e).astype(dx.dtype)
    return dx, dkernel, dbias


def batch_norm_forward(x: np.ndarray, gamma, beta, running_mean, running_var, eps, momentum, training):
    """x: (B, C, E). Batch statistics pool the batch and edge dimensions.

    Running variance is updated with the unbiased estimate; normalization
    uses the biased one, the usual convention.
    """
    if training:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        n = x.shape[0] * x.shape[2]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (mean, inv)


def batch_norm_backward(dy: np.ndarray, x: np.ndarray, gamma, stats):
    mean, inv = stats
    n = dy.shape[0] * dy.shape[2]
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    dx = (inv[None, :, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray):
    """Weighted-mean cross entropy. Returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    wsum = w.sum()
    loss = -(w * logp[np.arange(len(labels)), labels]).sum() / wsum
    p = np.exp(logp)
    dlogits = p.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits *= (w / wsum)[:, None]
    return float(loss), dlogits


# ---------------------------------------------------------------------------
# full model


def forward(state: NetworkState, features: np.ndarray, adjacency: np.ndarray, real_counts, training: bool = False):
    """features: (B, C, E0), adjacency: (B, E0, 4), real_counts: (B,).

    Returns (logits (B, n_classes), cache); the cache feeds backward().
    """
    cfg = state.config
    p = state.params
    dtype = state.dtype
    x = np.ascontiguousarray(features, dtype=dtype)
    bsz, n_ch, n_e = x.shape
    if n_ch != cfg.input_channels or n_e != cfg.input_edges:
        raise ConfigError(
            f"input is ({n_ch} ch, {n_e} edges), model wants ({cfg.input_channels}, {cfg.input_edges})"
        )
    adjs = [np.asarray(adjacency[i]) for i in range(bsz)]
    reals = [int(r) for r in real_counts]
    blocks = []
    for i in range(len(cfg.conv_channels)):
        k, b = p[f"conv{i}_kernel"], p[f"conv{i}_bias"]
        conv_out = np.empty((bsz, k.shape[0], x.shape[2]), dtype=dtype)
        for m in range(bsz):
            conv_out[m] = edge_conv_forward(x[m], adjs[m], k, b)
        relu_out = np.maximum(conv_out, 0.0)
        blk = {"x": x, "adjs": adjs, "reals": reals, "conv_out": conv_out}

        def do_pool(src):
            target = cfg.pool_targets[i]
            out = np.zeros((bsz, src.shape[1], target), dtype=dtype)
            new_adjs, new_reals, traces = [], [], []
            for m in range(bsz):
                out[m], a2, r2, tr = mesh_pool(src[m], adjs[m], reals[m], target)
                new_adjs.append(a2)
                new_reals.append(r2)
                traces.append(tr)
            return out, new_adjs, new_reals, traces

        if cfg.norm_after_pool:
            pooled, new_adjs, new_reals, traces = do_pool(relu_out)
            blk["bn_in"] = pooled
            y, stats = batch_norm_forward(
                pooled, p[f"bn{i}_gamma"], p[f"bn{i}_beta"],
                state.buffers[f"bn{i}_running_mean"], state.buffers[f"bn{i}_running_var"],
                cfg.bn_eps, cfg.bn_momentum, training,
            )
        else:
            bn_out, stats = batch_norm_forward(
                relu_out, p[f"bn{i}_gamma"], p[f"bn{i}_beta"],
                state.buffers[f"bn{i}_running_mean"], state.buffers[f"bn{i}_running_var"],
                cfg.bn_eps, cfg.bn_momentum, training,
            )
            blk["bn_in"] = None  # recomputed as relu(conv_out) in backward
            y, new_adjs, new_reals, traces = do_pool(bn_out)
        blk["bn_stats"] = stats
        blk["traces"] = traces
        blocks.append(blk)
        x, adjs, reals = y, new_adjs, new_reals

    gap_in = x  # (B, C_last, E_last)
    vec = gap_in.mean(axis=2)
    fc1_pre = vec @ p["fc1_w"].T + p["fc1_b"]
    fc1_out = np.maximum(fc1_pre, 0.0)
    logits = fc1_out @ p["fc2_w"].T + p["fc2_b"]
    cache = {"blocks": blocks, "gap_in": gap_in, "vec": vec, "fc1_pre": fc1_pre, "fc1_out": fc1_out}
    return logits, cache


def backward(state: NetworkState, cache: dict, dlogits: np.ndarray) -> dict:
    """Exact gradients of the scalar loss w.r.t. every parameter."""
    cfg = state.config
    p = state.params
    dtype = state.dtype
    grads = {}
    dlogits = np.asarray(dlogits, dtype=dtype)
    fc1_out = cache["fc1_out"]
    grads["fc2_w"] = dlogits.T @ fc1_out
    grads["fc2_b"] = dlogits.sum(axis=0)
    dfc1 = (dlogits @ p["fc2_w"]) * (cache["fc1_pre"] > 0)
    grads["fc1_w"] = dfc1.T @ cache["vec"]
    grads["fc1_b"] = dfc1.sum(axis=0)
    dvec = dfc1 @ p["fc1_w"]
    gap_in = cache["gap_in"]
    dmap = np.broadcast_to((dvec / gap_in.shape[2])[:, :, None], gap_in.shape).astype(dtype)

    dy = dmap
    for i in reversed(range(len(cfg.conv_channels))):
        blk = cache["blocks"][i]
        bsz = dy.shape[0]
        relu_out = np.maximum(blk["conv_out"], 0.0)
        if cfg.norm_after_pool:
            dbn, dg, db = batch_norm_backward(dy, blk["bn_in"], p[f"bn{i}_gamma"], blk["bn_stats"])
            drelu = np.empty_like(relu_out)
            for m in range(bsz):
                drelu[m] = mesh_pool_backward(dbn[m], blk["traces"][m])
        else:
            dpool = np.empty_like(relu_out)
            for m in range(bsz):
                dpool[m] = mesh_pool_backward(dy[m], blk["traces"][m])
            drelu, dg, db = batch_norm_backward(dpool, relu_out, p[f"bn{i}_gamma"], blk["bn_stats"])
        grads[f"bn{i}_gamma"] = dg.astype(dtype)
        grads[f"bn{i}_beta"] = db.astype(dtype)
        dconv = drelu * (blk["conv_out"] > 0)
        k = p[f"conv{i}_kernel"]
        dk = np.zeros_like(k)
        dbias = np.zeros_like(p[f"conv{i}_bias"])
        dx = np.empty_like(blk["x"])
        for m in range(bsz):
            dx[m], dk_m, db_m = edge_conv_backward(dconv[m], blk["x"][m], blk["adjs"][m], k)
            dk += dk_m
            dbias += db_m
        grads[f"conv{i}_kernel"] = dk
        grads[f"conv{i}_bias"] = dbias
        dy = dx
    return grads


def adam_step(state: NetworkState, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.adam_step += 1
    t = state.adam_step
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        state.params[name] -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(state.params[name].dtype)


def predict_proba(state: NetworkState, features, adjacency, real_counts) -> np.ndarray:
    """(B, n_classes) softmax probabilities, inference mode."""
    logits, _ = forward(state, features, adjacency, real_counts, training=False)
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoints


def _encode_arrays(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        a = np.ascontiguousarray(v)
        out[k] = {
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii"),
        }
    return out


def _decode_arrays(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        a = np.frombuffer(base64.b64decode(v["data"]), dtype=np.dtype(v["dtype"]))
        out[k] = a.reshape(v["shape"]).copy()
    return out


CHECKPOINT_VERSION = 1


def save_checkpoint(state: NetworkState, path, extra: dict | None = None) -> None:
    """Bit-exact JSON checkpoint: params, buffers, Adam moments, metadata."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "params": _encode_arrays(state.params),
        "buffers": _encode_arrays(state.buffers),
        "adam_m": _encode_arrays(state.adam_m),
        "adam_v": _encode_arrays(state.adam_v),
        "adam_step": state.adam_step,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[NetworkState, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    cfg = ModelConfig.from_dict(payload["config"])
    state = NetworkState(
        config=cfg,
        params=_decode_arrays(payload["params"]),
        buffers=_decode_arrays(payload["buffers"]),
        adam_m=_decode_arrays(payload["adam_m"]),
        adam_v=_decode_arrays(payload["adam_v"]),
        adam_step=int(payload["adam_step"]),
    )
    return state, payload.get("extra", {})
