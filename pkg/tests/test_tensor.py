"""Tensor ops: forward values against hand oracles, gradients against
central finite differences (float64, h=1e-3, relative error < 1e-4)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adhdeepnet.tensor import (GraphError, ShapeError, Tensor, avg_pool,
                               batch_norm, concat, conv2d, depthwise_conv2d,
                               dropout, elu, global_avg_pool, linear,
                               load_tensors, log_softmax, matmul, relu,
                               save_tensors, separable_conv2d, sigmoid,
                               softmax)

from conftest import check_gradients, probe_weights


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_allclose(matmul(a, b).data, [[5, 6], [7, 8]])


def test_matmul_hand_dot():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[11.0]])


def test_matmul_gradient_hand():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]])
    matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    w = probe_weights((3, 2))
    check_gradients(
        lambda ts: (matmul(ts[0], ts[1]) * Tensor(w, dtype=np.float64)).sum(),
        [a, b])


# -- elementwise / linear --------------------------------------------------------


def test_add_broadcast_gradcheck():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))
    w = probe_weights((3, 4), seed=1)
    check_gradients(
        lambda ts: ((ts[0] + ts[1]) * Tensor(w, dtype=np.float64)).sum(),
        [a, b])


def test_linear_matches_manual():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 3)).astype(np.float32)
    wt = rng.standard_normal((2, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = linear(Tensor(x), Tensor(wt), Tensor(b))
    np.testing.assert_allclose(out.data, x @ wt.T + b, rtol=1e-6)


def test_linear_gradcheck():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    wt = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    w = probe_weights((4, 2), seed=2)
    check_gradients(
        lambda ts: (linear(ts[0], ts[1], ts[2])
                    * Tensor(w, dtype=np.float64)).sum(),
        [x, wt, b])


def test_concat_gradcheck():
    rng = np.random.default_rng(4)
    parts = [rng.standard_normal((2, c, 3, 3)) for c in (1, 2, 3)]
    w = probe_weights((2, 6, 3, 3), seed=3)
    check_gradients(
        lambda ts: (concat(ts, axis=1) * Tensor(w, dtype=np.float64)).sum(),
        parts)


# -- conv2d ------------------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
    k = Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_allclose(
        conv2d(x, k, padding="valid").data.ravel(), [1, 2, 3, 4])


def test_conv2d_sliding_window():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
    k = Tensor(np.ones((1, 1, 1, 2)))
    np.testing.assert_allclose(
        conv2d(x, k, padding="valid").data.ravel(), [3, 5, 7])


def test_conv2d_zero_kernel_annihilates():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3, 4, 8)).astype(np.float32))
    k = Tensor(np.zeros((5, 3, 2, 3), dtype=np.float32))
    assert not conv2d(x, k, padding="same").data.any()


def test_conv2d_same_preserves_shape():
    x = Tensor(np.zeros((2, 3, 5, 9), dtype=np.float32))
    k = Tensor(np.zeros((4, 3, 3, 4), dtype=np.float32))
    assert conv2d(x, k, padding="same").shape == (2, 4, 5, 9)


def test_conv2d_same_pads_extra_on_right():
    # even kernel width 2: one pad column, placed after the signal
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
    k = Tensor(np.ones((1, 1, 1, 2)))
    np.testing.assert_allclose(
        conv2d(x, k, padding="same").data.ravel(), [3, 5, 3])


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
               padding="valid")


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


def test_conv2d_direct_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 6)).astype(np.float32)
    k = rng.standard_normal((4, 3, 2, 3)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(k), padding="valid").data
    ho, wo = 4 - 2 + 1, 6 - 3 + 1
    ref = np.zeros((2, 4, ho, wo), dtype=np.float64)
    for n in range(2):
        for f in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, f, i, j] = np.sum(
                        x[n, :, i:i + 2, j:j + 3].astype(np.float64)
                        * k[f].astype(np.float64))
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv2d_gradcheck(padding):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 4, 5))
    k = rng.standard_normal((3, 2, 2, 3))
    shape = (2, 3, 4, 5) if padding == "same" else (2, 3, 3, 3)
    w = probe_weights(shape, seed=4)
    check_gradients(
        lambda ts: (conv2d(ts[0], ts[1], padding=padding)
                    * Tensor(w, dtype=np.float64)).sum(),
        [x, k])


def test_conv2d_pointwise_gradcheck():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 2, 4))
    k = rng.standard_normal((5, 3, 1, 1))
    w = probe_weights((2, 5, 2, 4), seed=5)
    check_gradients(
        lambda ts: (conv2d(ts[0], ts[1]) * Tensor(w, dtype=np.float64)).sum(),
        [x, k])


# -- depthwise / separable -----------------------------------------------------------


def test_depthwise_identity():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    k = np.ones((2, 1, 1, 1), dtype=np.float32)
    out = depthwise_conv2d(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(out, x)


def test_depthwise_channel_locality():
    # output channels 0,1 come from input channel 0 only (channel-major order)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    k = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
    full = depthwise_conv2d(Tensor(x), Tensor(k)).data
    x2 = x.copy()
    x2[:, 1] = 0.0
    masked = depthwise_conv2d(Tensor(x2), Tensor(k)).data
    np.testing.assert_allclose(full[:, :2], masked[:, :2])
    assert not masked[:, 2:].any()


def test_depthwise_equals_block_diagonal_conv():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    k = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
    out = depthwise_conv2d(Tensor(x), Tensor(k)).data
    # same arithmetic as a full conv whose kernel is zero off the diagonal
    kfull = np.zeros((4, 2, 2, 2), dtype=np.float32)
    for c in range(2):
        for d in range(2):
            kfull[c * 2 + d, c] = k[c, d]
    ref = conv2d(Tensor(x), Tensor(kfull)).data
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))),
                         Tensor(np.zeros((2, 1, 2, 2))))


def test_depthwise_gradcheck():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 2, 4, 4))
    k = rng.standard_normal((2, 2, 3, 2))
    w = probe_weights((2, 4, 2, 3), seed=6)
    check_gradients(
        lambda ts: (depthwise_conv2d(ts[0], ts[1])
                    * Tensor(w, dtype=np.float64)).sum(),
        [x, k])


def test_separable_is_composition():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((1, 4, 1, 16)).astype(np.float32))
    dk = Tensor(rng.standard_normal((4, 1, 1, 5)).astype(np.float32))
    pk = Tensor(rng.standard_normal((6, 4, 1, 1)).astype(np.float32))
    fused = separable_conv2d(x, dk, pk, padding="same").data
    two_step = conv2d(depthwise_conv2d(x, dk, padding="same"), pk).data
    assert np.array_equal(fused, two_step)


def test_separable_pointwise_identity_mixing():
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((1, 3, 2, 8)).astype(np.float32))
    dk = Tensor(rng.standard_normal((3, 1, 1, 3)).astype(np.float32))
    pk = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
    np.testing.assert_allclose(
        separable_conv2d(x, dk, pk, padding="valid").data,
        depthwise_conv2d(x, dk, padding="valid").data)


def test_separable_chain_mismatch():
    with pytest.raises(ShapeError):
        separable_conv2d(Tensor(np.zeros((1, 2, 1, 8))),
                         Tensor(np.zeros((2, 2, 1, 3))),
                         Tensor(np.zeros((5, 3, 1, 1))))


def test_separable_gradcheck():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((1, 2, 1, 8))
    dk = rng.standard_normal((2, 2, 1, 3))
    pk = rng.standard_normal((3, 4, 1, 1))
    w = probe_weights((1, 3, 1, 8), seed=7)
    check_gradients(
        lambda ts: (separable_conv2d(ts[0], ts[1], ts[2], padding="same")
                    * Tensor(w, dtype=np.float64)).sum(),
        [x, dk, pk])


# -- batch norm ---------------------------------------------------------------------


def test_batch_norm_normalizes():
    rng = np.random.default_rng(16)
    x = Tensor(rng.standard_normal((8, 3, 2, 5)).astype(np.float32) * 4 + 2)
    gamma = Tensor(np.ones(3, dtype=np.float32))
    beta = Tensor(np.zeros(3, dtype=np.float32))
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = batch_norm(x, gamma, beta, rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batch_norm_constant_channel():
    x = Tensor(np.full((4, 2, 1, 3), 7.0, dtype=np.float32))
    gamma = Tensor(np.ones(2, np.float32))
    beta = Tensor(np.zeros(2, np.float32))
    out = batch_norm(x, gamma, beta, np.zeros(2, np.float32),
                     np.ones(2, np.float32), training=True).data
    np.testing.assert_allclose(out, 0, atol=1e-6)


def test_batch_norm_running_stats_ema():
    x = Tensor(np.full((2, 1, 1, 2), 4.0, dtype=np.float32))
    rm = np.full(1, 1.0, np.float32)
    rv = np.full(1, 1.0, np.float32)
    batch_norm(x, Tensor(np.ones(1, np.float32)),
               Tensor(np.zeros(1, np.float32)), rm, rv, training=True)
    # 0.9*init + 0.1*batch: mean 0.9*1 + 0.1*4 = 1.3, var 0.9*1 + 0.1*0 = 0.9
    np.testing.assert_allclose(rm, [1.3], rtol=1e-6)
    np.testing.assert_allclose(rv, [0.9], rtol=1e-6)


def test_batch_norm_inference_uses_running_stats():
    x = Tensor(np.array([[[[2.0]]]], dtype=np.float32))
    rm = np.array([1.0], np.float32)
    rv = np.array([4.0], np.float32)
    out = batch_norm(x, Tensor(np.ones(1, np.float32)),
                     Tensor(np.zeros(1, np.float32)), rm, rv, training=False)
    np.testing.assert_allclose(out.data, (2 - 1) / np.sqrt(4 + 1e-5),
                               rtol=1e-5)
    np.testing.assert_allclose(rm, [1.0])  # inference leaves stats alone


def test_batch_norm_zero_batch_errors():
    with pytest.raises(ValueError):
        batch_norm(Tensor(np.zeros((0, 2, 1, 4))),
                   Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   np.zeros(2), np.ones(2), training=True)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(training):
    rng = np.random.default_rng(17)
    x = rng.standard_normal((3, 2, 2, 4))
    gamma = rng.standard_normal(2) + 1.0
    beta = rng.standard_normal(2)
    w = probe_weights((3, 2, 2, 4), seed=8)

    def forward(ts):
        rm = np.array([0.2, -0.1], np.float64)
        rv = np.array([1.5, 0.7], np.float64)
        out = batch_norm(ts[0], ts[1], ts[2], rm, rv, training=training)
        return (out * Tensor(w, dtype=np.float64)).sum()

    check_gradients(forward, [x, gamma, beta])


# -- activations -----------------------------------------------------------------------


def test_elu_values():
    # float64 input: e^-30 is below float32 resolution of the -1 asymptote
    out = elu(Tensor(np.array([0.0, -30.0, 2.0], dtype=np.float64))).data
    assert out[0] == 0.0
    assert -1.0 < out[1] < -0.999
    assert out[2] == 2.0


def test_sigmoid_at_zero():
    assert sigmoid(Tensor(np.array(0.0))).data == 0.5


def test_softmax_stable_at_large_inputs():
    out = softmax(Tensor(np.array([[1000.0, 1000.0]]))).data
    np.testing.assert_allclose(out, [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=2,
                max_size=6))
def test_softmax_rows_sum_to_one(row):
    # extreme spreads underflow to exactly 0/1 in any float width, so the
    # bound check is closed; the sum tolerance is the real stability claim
    out = softmax(Tensor(np.array([row], dtype=np.float32))).data
    assert np.all(np.isfinite(out))
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-8, max_value=8), min_size=2, max_size=6))
def test_softmax_strictly_interior_at_moderate_spread(row):
    out = softmax(Tensor(np.array([row], dtype=np.float32))).data
    assert np.all(out > 0) and np.all(out < 1)


@pytest.mark.parametrize("op", [relu, elu, sigmoid, softmax, log_softmax])
def test_activation_gradcheck(op):
    rng = np.random.default_rng(18)
    x = rng.standard_normal((3, 5)) * 2
    x[0, 0] = 1.5  # keep clear of the relu kink where FD is undefined
    w = probe_weights((3, 5), seed=9)
    check_gradients(
        lambda ts: (op(ts[0]) * Tensor(w, dtype=np.float64)).sum(), [x])


# -- pooling -----------------------------------------------------------------------------


def test_avg_pool_hand_values():
    x = Tensor(np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 1, 1, 4))
    np.testing.assert_allclose(avg_pool(x).data.ravel(), [2.0, 6.0])


def test_avg_pool_odd_width_truncates_with_warning():
    x = Tensor(np.array([1.0, 3.0, 5.0, 7.0, 9.0]).reshape(1, 1, 1, 5))
    with pytest.warns(RuntimeWarning):
        out = avg_pool(x)
    np.testing.assert_allclose(out.data.ravel(), [2.0, 6.0])


def test_avg_pool_same_window3_keeps_width():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(1, 1, 1, 6))
    out = avg_pool(x, window=(1, 3), stride=(1, 1), padding="same")
    assert out.shape == (1, 1, 1, 6)
    # interior column: plain mean of the three neighbours
    np.testing.assert_allclose(out.data[0, 0, 0, 2], (1 + 2 + 3) / 3)


def test_global_avg_pool_constant():
    x = Tensor(np.full((2, 3, 4, 5), 2.5, dtype=np.float32))
    out = global_avg_pool(x)
    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(out.data, 2.5)


def test_global_avg_pool_matches_mean():
    rng = np.random.default_rng(19)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    out = global_avg_pool(Tensor(x)).data
    np.testing.assert_allclose(out.reshape(2, 3), x.mean(axis=(2, 3)),
                               atol=1e-6)


def test_pool_gradcheck():
    rng = np.random.default_rng(20)
    x = rng.standard_normal((2, 2, 2, 6))
    w1 = probe_weights((2, 2, 2, 3), seed=10)
    check_gradients(
        lambda ts: (avg_pool(ts[0]) * Tensor(w1, dtype=np.float64)).sum(), [x])
    w2 = probe_weights((2, 2, 1, 1), seed=11)
    check_gradients(
        lambda ts: (global_avg_pool(ts[0])
                    * Tensor(w2, dtype=np.float64)).sum(), [x])
    w3 = probe_weights((2, 2, 2, 6), seed=12)
    check_gradients(
        lambda ts: (avg_pool(ts[0], window=(1, 3), stride=(1, 1),
                             padding="same")
                    * Tensor(w3, dtype=np.float64)).sum(), [x])


# -- dropout ---------------------------------------------------------------------------------


def test_dropout_rate_zero_identity():
    x = Tensor(np.arange(6, dtype=np.float32))
    out = dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_inference_identity():
    x = Tensor(np.arange(6, dtype=np.float32))
    out = dropout(x, 0.9, training=False, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_zero_fraction():
    x = Tensor(np.ones(100_000, dtype=np.float32))
    out = dropout(x, 0.5, training=True, rng=np.random.default_rng(21))
    frac = float((out.data == 0).mean())
    assert abs(frac - 0.5) < 0.01
    survivors = out.data[out.data != 0]
    np.testing.assert_allclose(survivors, 2.0)  # inverted scaling


def test_dropout_rate_one_errors():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, training=True,
                rng=np.random.default_rng(0))


# -- backward mechanics ------------------------------------------------------------------------


def test_backward_weighted_sum():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    x = Tensor(np.array([4.0, 5.0, 6.0]))
    (w * x).sum().backward()
    np.testing.assert_allclose(w.grad, [4.0, 5.0, 6.0])


def test_backward_disconnected_stays_none():
    w = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(3), requires_grad=True)
    (w * Tensor(np.ones(3))).sum().backward()
    assert other.grad is None


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (w * w).backward()


def test_backward_twice_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_accumulates_shared_operand():
    w = Tensor(np.array([3.0]), requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_allclose(w.grad, [6.0])


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 4, 8)).astype(np.float32))
        k = Tensor(rng.standard_normal((4, 3, 2, 3)).astype(np.float32))
        return elu(conv2d(x, k, padding="same")).data
    a, b = run(), run()
    assert np.array_equal(a, b)


# -- reductions --------------------------------------------------------------------------------


def test_mean_gradcheck():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((4, 5))
    check_gradients(lambda ts: ts[0].mean(), [x])


def test_sum_uses_wide_accumulation():
    # 2^24 + 1 collapses in float32 accumulation; float64 keeps it
    x = Tensor(np.array([2.0 ** 24, 1.0, 1.0], dtype=np.float32))
    assert float(x.sum().data) >= 2.0 ** 24 + 2


# -- serialization ------------------------------------------------------------------------------


def test_weight_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(23)
    named = {
        "conv/kernel": rng.standard_normal((4, 3, 2, 2)).astype(np.float32),
        "dense/bias": rng.standard_normal(7).astype(np.float32),
        "bn/running_mean": rng.standard_normal(3).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "weights.adnw"
    save_tensors(path, named)
    loaded = load_tensors(path)
    assert list(loaded) == list(named)
    for name in named:
        assert loaded[name].shape == np.asarray(named[name]).shape
        assert np.array_equal(loaded[name], named[name])
        assert loaded[name].tobytes() == np.ascontiguousarray(
            named[name], dtype=np.float32).tobytes()


def test_weight_file_magic_rejected(tmp_path):
    path = tmp_path / "bad.adnw"
    path.write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(ValueError, match="magic"):
        load_tensors(path)


def test_weight_file_header_layout(tmp_path):
    path = tmp_path / "one.adnw"
    save_tensors(path, {"w": np.array([1.5, -2.0], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"ADNW"
    assert raw[4:8] == (1).to_bytes(4, "little")          # version
    assert raw[8:12] == (1).to_bytes(4, "little")         # name length
    assert raw[12:13] == b"w"
    assert raw[13:17] == (1).to_bytes(4, "little")        # rank
    assert raw[17:21] == (2).to_bytes(4, "little")        # dim 0
    assert raw[21:] == np.array([1.5, -2.0], "<f4").tobytes()
