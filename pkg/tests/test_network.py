import numpy as np
import pytest

from meshgrow.features import assemble_features, fit_normalization, apply_normalization
from meshgrow.mesh import build_edge_adjacency, make_mesh
from meshgrow.network import (
    CHECKPOINT_VERSION,
    ConfigError,
    ModelConfig,
    TrainingDivergedError,
    adam_step,
    backward,
    batch_norm_forward,
    edge_conv_forward,
    forward,
    init_state,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    weighted_cross_entropy,
)
from meshgrow.pooling import pad_columns
from meshgrow.primitives import icosphere, tetrahedron

SMALL = ModelConfig(
    input_channels=7,
    input_edges=150,
    conv_channels=(8, 16),
    pool_targets=(100, 60),
    fc_hidden=20,
)


def batch_from_meshes(meshes, config, dtype=np.float64):
    mats = [assemble_features(m, with_coords=config.input_channels == 10) for m in meshes]
    stats = fit_normalization(mats)
    feats, adjs, reals = [], [], []
    for mesh, mat in zip(meshes, mats):
        f, a, r = pad_columns(
            apply_normalization(mat, stats).values.astype(dtype),
            build_edge_adjacency(mesh),
            config.input_edges,
        )
        feats.append(f)
        adjs.append(a)
        reals.append(r)
    return np.stack(feats), np.stack(adjs), reals


# --- configuration ----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_channels=5, input_edges=100)
    with pytest.raises(ConfigError):
        ModelConfig(input_channels=7, input_edges=100, conv_channels=(8,), pool_targets=(100,))
    with pytest.raises(ConfigError):
        ModelConfig(input_channels=7, input_edges=100, conv_channels=(8, 8), pool_targets=(80, 90))
    with pytest.raises(ConfigError):
        ModelConfig(input_channels=7, input_edges=100, conv_channels=(8,), pool_targets=())


def test_config_roundtrip():
    cfg = ModelConfig(input_channels=10, input_edges=2000)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_default_architecture():
    cfg = ModelConfig(input_channels=7, input_edges=1000)
    assert cfg.conv_channels == (32, 64, 128, 256)
    assert cfg.pool_targets == (750, 600, 500, 400)
    assert cfg.fc_hidden == 100
    assert cfg.n_classes == 2


def test_init_state_shapes():
    state = init_state(SMALL, seed=0)
    assert state.params["conv0_kernel"].shape == (8, 7, 5)
    assert state.params["conv1_kernel"].shape == (16, 8, 5)
    assert state.params["fc1_w"].shape == (20, 16)
    assert state.params["fc2_w"].shape == (2, 20)
    assert state.buffers["bn1_running_var"].shape == (16,)
    np.testing.assert_array_equal(state.params["conv0_bias"], 0.0)
    assert state.dtype == np.float32
    assert init_state(SMALL, seed=0, dtype=np.float64).dtype == np.float64


def test_init_is_seeded():
    a = init_state(SMALL, seed=3)
    b = init_state(SMALL, seed=3)
    c = init_state(SMALL, seed=4)
    np.testing.assert_array_equal(a.params["conv0_kernel"], b.params["conv0_kernel"])
    assert not np.array_equal(a.params["conv0_kernel"], c.params["conv0_kernel"])


# --- layers -----------------------------------------------------------------


def test_edge_conv_matches_explicit_loop():
    mesh = tetrahedron()
    adj = build_edge_adjacency(mesh)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6))
    kernel = rng.normal(size=(4, 3, 5))
    bias = rng.normal(size=4)
    y = edge_conv_forward(x, adj, kernel, bias)
    for e in range(6):
        a, b, c, d = adj[e]
        tup = np.stack(
            [
                x[:, e],
                np.abs(x[:, a] - x[:, c]),
                x[:, a] + x[:, c],
                np.abs(x[:, b] - x[:, d]),
                x[:, b] + x[:, d],
            ],
            axis=1,
        )  # (C_in, 5)
        for o in range(4):
            assert y[o, e] == pytest.approx(bias[o] + (kernel[o] * tup).sum(), rel=1e-12)


def test_edge_conv_neighbor_order_symmetry():
    """Swapping a<->c and b<->d leaves the symmetric functions unchanged."""
    mesh = tetrahedron()
    adj = build_edge_adjacency(mesh)
    swapped = adj[:, [2, 3, 0, 1]]
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 6))
    kernel = rng.normal(size=(4, 3, 5))
    bias = np.zeros(4)
    np.testing.assert_allclose(
        edge_conv_forward(x, adj, kernel, bias),
        edge_conv_forward(x, swapped, kernel, bias),
        atol=1e-12,
    )


def test_batch_norm_training_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 3, 10))
    gamma, beta = np.ones(3), np.zeros(3)
    rm, rv = np.zeros(3), np.ones(3)
    y, _ = batch_norm_forward(x, gamma, beta, rm, rv, eps=1e-5, momentum=0.1, training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=(0, 2)), 1.0, atol=1e-3)  # eps skews slightly
    # running buffers move toward batch statistics
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)), atol=1e-12)
    n = 40
    np.testing.assert_allclose(
        rv, 0.9 + 0.1 * x.var(axis=(0, 2)) * n / (n - 1), atol=1e-12
    )


def test_batch_norm_eval_uses_buffers():
    x = np.ones((2, 3, 4))
    rm = np.array([1.0, 2.0, 3.0])
    rv = np.array([4.0, 4.0, 4.0])
    y, _ = batch_norm_forward(
        x, np.ones(3), np.zeros(3), rm, rv, eps=0.0, momentum=0.1, training=False
    )
    expected = (1.0 - rm) / 2.0
    np.testing.assert_allclose(y[0, :, 0], expected, atol=1e-12)
    np.testing.assert_array_equal(rm, [1.0, 2.0, 3.0])  # untouched in eval


def test_weighted_cross_entropy_hand_example():
    logits = np.array([[0.0, 0.0], [2.0, 0.0]])
    labels = np.array([1, 0])
    w = np.array([0.3, 0.7])
    loss, dlogits = weighted_cross_entropy(logits, labels, w)
    expected = (0.7 * np.log(2.0) + 0.3 * np.log(1 + np.exp(-2.0))) / 1.0
    assert loss == pytest.approx(expected, rel=1e-12)
    assert dlogits.shape == (2, 2)
    np.testing.assert_allclose(dlogits.sum(axis=1), 0.0, atol=1e-12)


def test_weighted_cross_entropy_weight_semantics():
    # doubling both weights must not change the weighted mean
    logits = np.random.default_rng(0).normal(size=(6, 2))
    labels = np.array([0, 1, 0, 1, 1, 0])
    l1, d1 = weighted_cross_entropy(logits, labels, np.array([0.3, 0.7]))
    l2, d2 = weighted_cross_entropy(logits, labels, np.array([0.6, 1.4]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(d1, d2, atol=1e-12)


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 2))
    labels = np.array([0, 1, 1, 0])
    w = np.array([0.3, 0.7])
    _, dlogits = weighted_cross_entropy(logits, labels, w)
    eps = 1e-7
    for i in range(4):
        for j in range(2):
            bumped = logits.copy()
            bumped[i, j] += eps
            lp, _ = weighted_cross_entropy(bumped, labels, w)
            bumped[i, j] -= 2 * eps
            lm, _ = weighted_cross_entropy(bumped, labels, w)
            assert dlogits[i, j] == pytest.approx((lp - lm) / (2 * eps), abs=1e-7)


def test_adam_single_step_formula():
    cfg = SMALL
    state = init_state(cfg, seed=0, dtype=np.float64)
    grads = {k: np.full_like(v, 0.5) for k, v in state.params.items()}
    before = {k: v.copy() for k, v in state.params.items()}
    adam_step(state, grads, lr=1e-3)
    # first step: m_hat = g, v_hat = g^2  ->  delta = lr * g / (|g| + eps)
    expected_delta = 1e-3 * 0.5 / (0.5 + 1e-8)
    for k in before:
        np.testing.assert_allclose(before[k] - state.params[k], expected_delta, rtol=1e-10)
    assert state.adam_step == 1


# --- full model -------------------------------------------------------------


def make_small_batch(seed=0, n=4, dtype=np.float64):
    meshes = [icosphere(1, 1.0 + 0.1 * i) for i in range(n)]
    return batch_from_meshes(meshes, SMALL, dtype)


def test_forward_shapes_and_finite():
    state = init_state(SMALL, seed=0, dtype=np.float64)
    feats, adjs, reals = make_small_batch()
    logits, cache = forward(state, feats, adjs, reals, training=True)
    assert logits.shape == (4, 2)
    assert np.all(np.isfinite(logits))


def test_forward_backward_param_coverage():
    state = init_state(SMALL, seed=0, dtype=np.float64)
    feats, adjs, reals = make_small_batch()
    logits, cache = forward(state, feats, adjs, reals, training=True)
    loss, dlogits = weighted_cross_entropy(logits, np.array([0, 1, 0, 1]), np.array([0.3, 0.7]))
    grads = backward(state, cache, dlogits)
    assert set(grads) == set(state.params)
    for k, g in grads.items():
        assert g.shape == state.params[k].shape
        assert np.all(np.isfinite(g))
    # something flows everywhere
    assert all(np.abs(g).max() > 0 for g in grads.values())


def test_predict_proba_rows_sum_to_one():
    state = init_state(SMALL, seed=1, dtype=np.float64)
    feats, adjs, reals = make_small_batch()
    proba = predict_proba(state, feats, adjs, reals)
    assert proba.shape == (4, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(proba >= 0)


def test_eval_mode_is_deterministic_per_sample():
    """Eval predictions do not depend on batch composition."""
    state = init_state(SMALL, seed=2, dtype=np.float64)
    feats, adjs, reals = make_small_batch()
    full = predict_proba(state, feats, adjs, reals)
    solo = predict_proba(state, feats[2:3], adjs[2:3], reals[2:3])
    np.testing.assert_allclose(full[2], solo[0], atol=1e-12)


def test_training_diverged_snapshot():
    err = TrainingDivergedError("loss became non-finite", {"epoch": 3, "loss": float("nan")})
    assert err.snapshot["epoch"] == 3
    assert "non-finite" in str(err)


# --- rigid motion behaviour --------------------------------------------------


def rigid_logits(state, mesh, config, transform=None):
    verts = mesh.vertices if transform is None else transform(mesh.vertices)
    moved = make_mesh(verts, mesh.faces)
    mat = assemble_features(moved, with_coords=config.input_channels == 10)
    f, a, r = pad_columns(
        mat.values.astype(np.float64), build_edge_adjacency(moved), config.input_edges
    )
    logits, _ = forward(state, f[None], a[None], [r], training=False)
    return logits[0]


def bumpy_sphere():
    """Irregular closed mesh; distinct feature norms keep pooling stable."""
    mesh = icosphere(1, 1.0)
    verts = mesh.vertices * (1.0 + 0.2 * np.sin(3.0 * mesh.vertices[:, [0]]))
    return make_mesh(verts, mesh.faces)


def test_shape_only_model_rotation_invariant():
    state = init_state(SMALL, seed=5, dtype=np.float64)
    mesh = bumpy_sphere()
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # 90 deg about z
    base = rigid_logits(state, mesh, SMALL)
    moved = rigid_logits(state, mesh, SMALL, lambda v: v @ rot.T + [4.0, -2.0, 1.0])
    np.testing.assert_allclose(moved, base, atol=1e-5)


def test_coordinate_model_rotation_sensitive():
    cfg = ModelConfig(
        input_channels=10,
        input_edges=150,
        conv_channels=(8, 16),
        pool_targets=(100, 60),
        fc_hidden=20,
    )
    state = init_state(cfg, seed=5, dtype=np.float64)
    bumpy = bumpy_sphere()
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    base = rigid_logits(state, bumpy, cfg)
    moved = rigid_logits(state, bumpy, cfg, lambda v: v @ rot.T)
    assert np.abs(moved - base).max() > 1e-3


# --- checkpointing ----------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    state = init_state(SMALL, seed=7)
    state.adam_step = 42
    state.buffers["bn0_running_mean"] += 0.25
    save_checkpoint(state, tmp_path / "ck.json", extra={"note": 1})
    back, extra = load_checkpoint(tmp_path / "ck.json")
    assert extra["note"] == 1
    assert back.config == SMALL
    assert back.adam_step == 42
    for k in state.params:
        np.testing.assert_array_equal(back.params[k], state.params[k])
        assert back.params[k].dtype == state.params[k].dtype
    for k in state.buffers:
        np.testing.assert_array_equal(back.buffers[k], state.buffers[k])
    for k in state.adam_m:
        np.testing.assert_array_equal(back.adam_m[k], state.adam_m[k])


def test_checkpoint_preserves_predictions(tmp_path):
    state = init_state(SMALL, seed=8, dtype=np.float64)
    feats, adjs, reals = make_small_batch()
    save_checkpoint(state, tmp_path / "ck.json")
    back, _ = load_checkpoint(tmp_path / "ck.json")
    np.testing.assert_array_equal(
        predict_proba(back, feats, adjs, reals), predict_proba(state, feats, adjs, reals)
    )


def test_checkpoint_version_guard(tmp_path):
    import json

    state = init_state(SMALL, seed=0)
    save_checkpoint(state, tmp_path / "ck.json")
    doc = json.loads((tmp_path / "ck.json").read_text())
    assert doc["format_version"] == CHECKPOINT_VERSION
    doc["format_version"] = CHECKPOINT_VERSION + 1
    (tmp_path / "ck.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck.json")
