import json

import numpy as np
import pytest

from conftest import fd_gradient, fd_hessian
from losscape.autodiff import (Batch, FlatParams, GraphBuilder, ParamLayout, dense_hessian_oracle,
                               forward_loss, gradient, hvp, init_params, value_and_gradient)
from losscape.errors import LayoutError, NumericError, OracleCapError
from losscape.modelzoo import build_lenet_mini, build_mlp, build_quadratic


def _check_grad(graph, theta, batch, rtol=1e-6):
    f = lambda t: forward_loss(graph, t, batch)
    g = gradient(graph, theta, batch).values
    ref = fd_gradient(f, theta)
    assert np.linalg.norm(g - ref) <= rtol * max(np.linalg.norm(ref), 1e-8)


def _check_hessian(graph, theta, batch, rtol=1e-5):
    H = dense_hessian_oracle(graph, theta, batch)
    ref = fd_hessian(lambda t: gradient(graph, t, batch).values, theta)
    assert np.linalg.norm(H - ref) <= rtol * np.linalg.norm(ref)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_mlp_gradient_matches_finite_differences(act, blobs):
    g = build_mlp([6, 5, 3], activation=act)
    theta = init_params(g, 1).values
    _check_grad(g, theta, Batch(blobs.inputs[:12], blobs.labels[:12]))


def test_mlp_hessian_matches_finite_differences(tiny_mlp, mlp_params, tiny_batch):
    assert tiny_mlp.num_params <= 200
    _check_hessian(tiny_mlp, mlp_params.values, tiny_batch)


def test_mse_head_hessian():
    g = build_mlp([3, 4, 2], activation="tanh", loss="mse")
    rng = np.random.default_rng(0)
    batch = Batch(rng.standard_normal((7, 3)), rng.standard_normal((7, 2)))
    theta = init_params(g, 0).values
    _check_grad(g, theta, batch)
    _check_hessian(g, theta, batch)


@pytest.mark.parametrize("kw", [dict(activation="tanh", batchnorm=True), dict(activation="relu")])
def test_lenet_derivatives(kw):
    g = build_lenet_mini(9, (2, 3), 4, hidden=5, **kw)
    rng = np.random.default_rng(2)
    batch = Batch(rng.standard_normal((5, 1, 9, 9)), rng.integers(0, 4, 5))
    theta = init_params(g, 3).values
    _check_grad(g, theta, batch)
    _check_hessian(g, theta, batch, rtol=1e-4)


def test_quadratic_hvp_is_exact():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((9, 9))
    a = a + a.T
    g = build_quadratic(a)
    batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    theta = rng.standard_normal(9)
    H = dense_hessian_oracle(g, theta, batch)
    assert np.linalg.norm(H - a) <= 1e-12 * np.linalg.norm(a)
    v = rng.standard_normal(9)
    np.testing.assert_allclose(hvp(g, theta, batch, v).values, a @ v, rtol=1e-13, atol=1e-13)
    assert forward_loss(g, theta, batch) == pytest.approx(0.5 * theta @ a @ theta, rel=1e-13)


def test_hvp_is_linear_and_symmetric(tiny_mlp, mlp_params, tiny_batch):
    rng = np.random.default_rng(0)
    u, w = rng.standard_normal((2, tiny_mlp.num_params))
    hu = hvp(tiny_mlp, mlp_params, tiny_batch, u).values
    hw = hvp(tiny_mlp, mlp_params, tiny_batch, w).values
    both = hvp(tiny_mlp, mlp_params, tiny_batch, 2 * u - 3 * w).values
    np.testing.assert_allclose(both, 2 * hu - 3 * hw, rtol=1e-10, atol=1e-12)
    assert w @ hu == pytest.approx(u @ hw, rel=1e-10)


def test_hvp_zero_vector(tiny_mlp, mlp_params, tiny_batch):
    out = hvp(tiny_mlp, mlp_params, tiny_batch, np.zeros(tiny_mlp.num_params))
    assert np.all(out.values == 0.0)


def test_relu_has_zero_second_derivative():
    b = GraphBuilder()
    theta = b.param("theta", (1, 5), "dense", init="normal")
    out = b.op("sum", b.op("relu", theta))
    g = b.build(out, {"kind": "relu-sum"})
    batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    t = np.array([1.0, -2.0, 0.5, -0.1, 3.0])
    assert forward_loss(g, t, batch) == pytest.approx(4.5)
    np.testing.assert_array_equal(gradient(g, t, batch).values, [1, 0, 1, 0, 1])
    np.testing.assert_array_equal(dense_hessian_oracle(g, t, batch), 0.0)


def test_oracle_cap(tiny_mlp, mlp_params, tiny_batch):
    with pytest.raises(OracleCapError):
        dense_hessian_oracle(tiny_mlp, mlp_params, tiny_batch, cap=10)


def test_layout_mismatch_raises(tiny_mlp, tiny_batch):
    with pytest.raises(LayoutError):
        forward_loss(tiny_mlp, np.zeros(tiny_mlp.num_params + 1), tiny_batch)
    with pytest.raises(LayoutError):
        hvp(tiny_mlp, init_params(tiny_mlp, 0), tiny_batch, np.zeros(3))


def test_wrong_input_width_is_a_layout_error(tiny_mlp):
    with pytest.raises(LayoutError):
        forward_loss(tiny_mlp, init_params(tiny_mlp, 0), Batch(np.zeros((2, 5)), np.zeros(2, dtype=int)))


def test_non_finite_values_raise(tiny_mlp, tiny_batch):
    theta = init_params(tiny_mlp, 0).values.copy()
    theta[0] = np.inf
    with pytest.raises(NumericError):
        value_and_gradient(tiny_mlp, theta, tiny_batch)
    with pytest.raises(NumericError):
        hvp(tiny_mlp, init_params(tiny_mlp, 0), tiny_batch, np.full(tiny_mlp.num_params, np.nan))


def test_layout_groups_and_json(lenet):
    lay = lenet.layout
    assert lay.total_count == lenet.num_params == 954
    assert sum(g.count for g in lay.groups) == lay.total_count
    kinds = {g.kind for g in lay.groups}
    assert {"conv_filter", "fc_row", "bias"} <= kinds
    back = ParamLayout.from_json(json.loads(json.dumps(lay.to_json())))
    assert back == lay


def test_layout_rejects_gaps():
    from losscape.autodiff import ParamGroup
    with pytest.raises(LayoutError):
        ParamLayout([ParamGroup("a", 0, 2, "bias"), ParamGroup("b", 3, 2, "bias")])


def test_init_is_seeded(lenet):
    a, b, c = init_params(lenet, 0), init_params(lenet, 0), init_params(lenet, 1)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_flat_params_layout_check(lenet, tiny_mlp):
    p = init_params(lenet, 0)
    with pytest.raises(LayoutError):
        p.check_layout(init_params(tiny_mlp, 0), "other")
    with pytest.raises(LayoutError):
        FlatParams(np.zeros(3), lenet.layout)


def test_builder_rejects_unknown_op():
    b = GraphBuilder()
    x = b.input("x")
    with pytest.raises((ValueError, KeyError)):
        b.op("nope", x)
