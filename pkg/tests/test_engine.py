"""Engine tests: forward/backward correctness against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zcnas import engine
from zcnas.engine import (
    Conv2d,
    Flatten,
    GeLU,
    Linear,
    NetworkInstance,
    Pool,
    ReLU,
    backward,
    chain,
    forward,
    gradient_moments,
    numerical_gradients,
    per_sample_gradients,
)
from zcnas.errors import StateError, StructuralError


def seed_params(net, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for (depth, name), arr in net.param_items():
        net.set_param(depth, name, rng.standard_normal(arr.shape) * scale)
    return net


def small_conv_net(activation=ReLU, bias=True):
    return chain(
        Conv2d(2, 3, 3, bias=bias), activation(),
        Conv2d(3, 3, 1, bias=bias), activation(),
        Pool("global"), Flatten(), Linear(3, 4, bias=bias),
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_identity_linear_mse_zero_loss():
    net = chain(Linear(3, 3, bias=False))
    net.set_param(1, "weight", np.eye(3))
    x = np.random.default_rng(0).standard_normal((5, 3))
    res = forward(net, x, labels=x, loss_kind="mse")
    assert res.loss == pytest.approx(0.0, abs=1e-15)


def test_zero_weight_mse_matches_half_mean_square():
    net = chain(Linear(4, 2, bias=False))
    y = np.random.default_rng(1).standard_normal((6, 2))
    x = np.random.default_rng(2).standard_normal((6, 4))
    res = forward(net, x, labels=y, loss_kind="mse")
    assert res.loss == pytest.approx((y ** 2).sum() / (2 * 6), rel=1e-12)


def test_two_layer_relu_forward_matches_hand_rolled():
    net = seed_params(chain(Linear(3, 4), ReLU(), Linear(4, 2)), seed=7)
    x = np.random.default_rng(3).standard_normal((4, 3))
    labels = np.array([0, 1, 0, 1])
    res = forward(net, x, labels, "cross_entropy")

    # independent scalar recomputation
    w1, b1 = net.get_param(1, "weight"), net.get_param(1, "bias")
    w2, b2 = net.get_param(3, "weight"), net.get_param(3, "bias")
    h = np.maximum(x @ w1.T + b1, 0.0)
    z = h @ w2.T + b2
    total = 0.0
    for i in range(4):
        logits = z[i]
        total += -(logits[labels[i]] - np.log(np.exp(logits).sum()))
    assert res.loss == pytest.approx(total / 4, rel=1e-12)
    np.testing.assert_allclose(res.outputs, z, rtol=1e-12)


def test_activation_cache_holds_every_relu_output():
    net = seed_params(small_conv_net(), seed=11)
    x = np.random.default_rng(4).standard_normal((3, 2, 6, 6))
    res = forward(net, x, np.array([0, 1, 2]), "cross_entropy")
    act_depths = [l.depth_index for l in net.layers if l.is_activation]
    assert sorted(res.activations.by_depth) == act_depths
    for d in act_depths:
        assert np.all(res.activations.by_depth[d] >= 0.0)
    assert res.activations.total_depth == net.depth


def test_shape_mismatch_names_both_layers():
    net = chain(Linear(3, 4), Linear(5, 2))
    with pytest.raises(StructuralError, match="Linear"):
        forward(net, np.zeros((2, 3)), np.zeros((2, 2)), "mse")


def test_sum_join_shape_mismatch_reports_structural_error():
    layers = [Linear(3, 4), Linear(3, 5), Linear(4, 2)]
    with pytest.raises(StructuralError, match="sum-join"):
        NetworkInstance(layers, inputs=[(-1,), (-1,), (0, 1)]).infer_shapes((2, 3))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_single_weight_chain_rule():
    # f(w) = w*x with x=2, w=3, MSE against label 0: loss = 0.5*(wx)^2,
    # d loss/dw = (wx)*x = 12
    net = chain(Linear(1, 1, bias=False))
    net.set_param(1, "weight", np.array([[3.0]]))
    res = forward(net, np.array([[2.0]]), np.array([[0.0]]), "mse")
    rec = backward(net, res)
    assert rec.grads[(1, "weight")][0, 0] == pytest.approx(12.0, rel=1e-14)


def test_gelu_net_gradients_match_finite_differences():
    net = seed_params(chain(Linear(3, 5), GeLU(), Linear(5, 2)), seed=5)
    x = np.random.default_rng(6).standard_normal((4, 3))
    labels = np.array([1, 0, 1, 0])
    res = forward(net, x, labels, "cross_entropy")
    rec = backward(net, res)
    num = numerical_gradients(net, x, labels, "cross_entropy")
    for key, entries in num.items():
        analytic = rec.grads[key].ravel()
        for j, d in entries.items():
            denom = max(abs(d), abs(analytic[j]), 1e-8)
            assert abs(analytic[j] - d) / denom < 1e-4


@pytest.mark.parametrize("layer_set", ["conv_relu", "conv_gelu", "pool_avg"])
def test_every_layer_kind_passes_gradcheck(layer_set):
    if layer_set == "conv_relu":
        net = small_conv_net(ReLU)
    elif layer_set == "conv_gelu":
        net = small_conv_net(GeLU)
    else:
        net = chain(Conv2d(2, 2, 3), ReLU(), Pool("avg3"), Pool("global"),
                    Flatten(), Linear(2, 3))
    seed_params(net, seed=13)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 2, 5, 5))
    labels = np.array([0, 2, 1])
    rec = backward(net, forward(net, x, labels, "cross_entropy"))
    num = numerical_gradients(net, x, labels, "cross_entropy",
                              max_entries_per_tensor=6, rng=rng)
    for key, entries in num.items():
        analytic = rec.grads[key].ravel()
        for j, d in entries.items():
            denom = max(abs(d), abs(analytic[j]), 1e-8)
            assert abs(analytic[j] - d) / denom < 1e-4


def test_graph_residual_wiring_gradcheck():
    # conv branch + identity shortcut summed into an activation
    layers = [Conv2d(2, 2, 3), ReLU(), Pool("global"), Flatten(), Linear(2, 2)]
    inputs = [(-1,), (0, -1), (1,), (2,), (3,)]
    net = seed_params(NetworkInstance(layers, inputs), seed=17)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 2, 4, 4))
    labels = np.array([0, 1])
    rec = backward(net, forward(net, x, labels, "cross_entropy"))
    num = numerical_gradients(net, x, labels, "cross_entropy",
                              max_entries_per_tensor=8, rng=rng)
    for key, entries in num.items():
        analytic = rec.grads[key].ravel()
        for j, d in entries.items():
            denom = max(abs(d), abs(analytic[j]), 1e-8)
            assert abs(analytic[j] - d) / denom < 1e-4


def test_zero_input_biasfree_net_has_zero_gradients():
    net = seed_params(chain(Linear(3, 4, bias=False), ReLU(),
                            Linear(4, 2, bias=False)), seed=3)
    x = np.zeros((4, 3))
    res = forward(net, x, np.zeros((4, 2)), "mse")
    rec = backward(net, res)
    for g in rec.grads.values():
        assert np.all(g == 0.0)


def test_backward_with_foreign_result_raises_state_error():
    net_a = seed_params(chain(Linear(3, 2)), seed=1)
    net_b = seed_params(chain(Linear(3, 3), ReLU(), Linear(3, 2)), seed=2)
    res = forward(net_a, np.ones((2, 3)), np.array([0, 1]), "cross_entropy")
    with pytest.raises(StateError):
        backward(net_b, res)


def test_backward_linearity_in_loss_scale():
    net = seed_params(chain(Linear(4, 3), ReLU(), Linear(3, 2)), seed=21)
    x = np.random.default_rng(10).standard_normal((5, 4))
    labels = np.array([0, 1, 1, 0, 1])
    base = backward(net, forward(net, x, labels, "cross_entropy"))
    for alpha in (2.0, 0.25, 8.0):  # powers of two scale exactly in float64
        scaled = backward(net, forward(net, x, labels, "cross_entropy",
                                       loss_scale=alpha))
        for key in base.grads:
            np.testing.assert_array_equal(scaled.grads[key], alpha * base.grads[key])
    scaled = backward(net, forward(net, x, labels, "cross_entropy", loss_scale=1.7))
    for key in base.grads:
        np.testing.assert_allclose(scaled.grads[key], 1.7 * base.grads[key],
                                   rtol=1e-12, atol=1e-300)


def test_backward_bit_identical_across_runs():
    def run():
        net = seed_params(small_conv_net(), seed=23)
        x = np.random.default_rng(11).standard_normal((4, 2, 6, 6))
        labels = np.array([0, 1, 2, 3])
        rec = backward(net, forward(net, x, labels, "cross_entropy"))
        return rec.flat()

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# per-sample gradients
# ---------------------------------------------------------------------------


def test_duplicated_sample_gives_identical_records():
    net = seed_params(chain(Linear(3, 4), ReLU(), Linear(4, 2)), seed=31)
    row = np.random.default_rng(12).standard_normal(3)
    x = np.stack([row, row])
    labels = np.array([1, 1])
    recs = per_sample_gradients(net, x, labels, "cross_entropy")
    for key in recs[0].grads:
        np.testing.assert_array_equal(recs[0].grads[key], recs[1].grads[key])


def test_mean_of_per_sample_records_equals_batch_gradient():
    net = seed_params(small_conv_net(), seed=37)
    x = np.random.default_rng(13).standard_normal((4, 2, 6, 6))
    labels = np.array([0, 1, 2, 3])
    recs = per_sample_gradients(net, x, labels, "cross_entropy")
    batch = backward(net, forward(net, x, labels, "cross_entropy"))
    for key in batch.grads:
        mean = sum(r.grads[key] for r in recs) / 4
        np.testing.assert_allclose(mean, batch.grads[key], atol=1e-10)


def test_batched_method_matches_independent_passes():
    net = seed_params(small_conv_net(GeLU), seed=41)
    x = np.random.default_rng(14).standard_normal((5, 2, 6, 6))
    labels = np.array([0, 1, 2, 3, 0])
    fast = per_sample_gradients(net, x, labels, "cross_entropy", method="batched")
    slow = per_sample_gradients(net, x, labels, "cross_entropy", method="loop")
    for f, s in zip(fast, slow):
        for key in f.grads:
            np.testing.assert_allclose(f.grads[key], s.grads[key],
                                       rtol=1e-12, atol=1e-12)


def test_linear_regressor_per_sample_gradient_closed_form():
    # single linear map a^T x under per-sample squared error:
    # grad_i = x_i x_i^T a - y_i x_i
    d = 6
    rng = np.random.default_rng(15)
    a = rng.standard_normal(d)
    net = chain(Linear(d, 1, bias=False))
    net.set_param(1, "weight", a[None, :])
    x = rng.standard_normal((5, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.uniform(-2, 2, size=(5, 1))
    recs = per_sample_gradients(net, x, y, "mse")
    for i, rec in enumerate(recs):
        expected = np.outer(x[i], x[i]) @ a - y[i, 0] * x[i]
        np.testing.assert_allclose(rec.grads[(1, "weight")][0], expected,
                                   rtol=1e-12, atol=1e-12)


def test_per_sample_requires_two_samples():
    net = seed_params(chain(Linear(3, 2)), seed=43)
    with pytest.raises(ValueError):
        per_sample_gradients(net, np.ones((1, 3)), np.array([0]), "cross_entropy")


def test_gradient_moments_match_materialized_records():
    net = seed_params(chain(Linear(3, 4), ReLU(), Linear(4, 2)), seed=47)
    x = np.random.default_rng(16).standard_normal((6, 3))
    labels = np.array([0, 1, 0, 1, 0, 1])
    recs = per_sample_gradients(net, x, labels, "cross_entropy")
    moments = gradient_moments(net, x, labels, "cross_entropy")
    for key, m in moments.items():
        stacked = np.stack([r.grads[key] for r in recs])
        np.testing.assert_allclose(m["sum"], stacked.sum(axis=0), rtol=1e-12)
        np.testing.assert_allclose(m["sum_abs"], np.abs(stacked).sum(axis=0), rtol=1e-12)
        np.testing.assert_allclose(m["sum_sq"], (stacked ** 2).sum(axis=0), rtol=1e-12)
        assert m["n"] == 6


@given(st.integers(min_value=2, max_value=8), st.integers(min_value=1, max_value=5))
@settings(max_examples=10)
def test_per_sample_mean_consistency_property(s, out_dim):
    net = seed_params(chain(Linear(3, out_dim, bias=True)), seed=out_dim)
    rng = np.random.default_rng(s * 100 + out_dim)
    x = rng.standard_normal((s, 3))
    y = rng.standard_normal((s, out_dim))
    recs = per_sample_gradients(net, x, y, "mse")
    batch = backward(net, forward(net, x, y, "mse"))
    for key in batch.grads:
        mean = sum(r.grads[key] for r in recs) / s
        np.testing.assert_allclose(mean, batch.grads[key], atol=1e-10)


def test_input_gradient_rows_match_loop():
    net = seed_params(small_conv_net(), seed=53)
    x = np.random.default_rng(17).standard_normal((3, 2, 6, 6))
    rows = engine.input_gradient_rows(net, x)
    for i in range(3):
        single = engine.input_gradient_rows(net, x[i:i + 1])
        np.testing.assert_allclose(rows[i], single[0], rtol=1e-10, atol=1e-12)
