import numpy as np

from meshgrow.gradcheck import E2E_TOL, LAYER_TOL, fd_max_error, layer_checks


def test_harness_on_analytic_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))

    def f():
        return float((x**2).sum())

    err = fd_max_error(f, x, 2.0 * x)
    assert err < 1e-8


def test_harness_detects_wrong_gradient():
    x = np.ones((3, 3))

    def f():
        return float((x**2).sum())

    err = fd_max_error(f, x, 3.0 * x)  # deliberately off by 1.5x
    assert err > 0.3


def test_layer_gradients_at_alternate_seed():
    errs = layer_checks(seed=1, edges=60)
    assert set(errs) >= {
        "edge_conv/kernel",
        "edge_conv/bias",
        "batch_norm/gamma",
        "batch_norm/beta",
        "mesh_pool/input",
        "cross_entropy/logits",
    }
    for name, err in errs.items():
        assert err <= LAYER_TOL, f"{name}: {err:.3e}"


def test_tolerances_are_sane():
    assert LAYER_TOL <= 1e-4
    assert E2E_TOL <= 1e-3
