import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keynet import numeric as nm


def _param(shape, rng, scale=1.0):
    return nm.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _check(loss_fn, params, tol=1e-6):
    result = nm.gradcheck(loss_fn, params)
    assert result.worst < tol, result.errors


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = nm.Tensor(np.eye(2))
    b = nm.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nm.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_by_hand():
    out = nm.matmul(nm.Tensor([[1.0, 2.0]]), nm.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = _param((3, 3), rng), _param((3, 3), rng)
    _check(lambda: nm.tsum(nm.matmul(a, b)), {"a": a, "b": b})


def test_matmul_rejects_shape_mismatch_and_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nm.matmul(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.zeros((2, 3))))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = _param((2, 3, 4), rng), _param((2, 4, 2), rng)
    _check(lambda: nm.tsum(nm.matmul(a, b) * nm.matmul(a, b)), {"a": a, "b": b})


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(nm.softmax_lastdim(nm.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(nm.softmax_lastdim(nm.Tensor([7.3])).data, [1.0])
    np.testing.assert_allclose(nm.softmax_lastdim(nm.Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-12)


def test_softmax_is_stable_for_large_inputs():
    out = nm.softmax_lastdim(nm.Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_positive_and_normalised(values):
    out = nm.softmax_lastdim(nm.Tensor(values)).data
    assert np.all(out > 0.0)
    assert abs(out.sum() - 1.0) < 1e-9


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = _param((3, 4), rng)
    w = rng.normal(size=(3, 4))
    _check(lambda: nm.tsum(nm.softmax_lastdim(x) * w), {"x": x})


def test_masked_softmax_zeroes_masked_and_empty_rows():
    x = nm.Tensor([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    keep = np.array([[True, False, True], [False, False, False]])
    out = nm.masked_softmax(x, keep).data
    assert out[0, 1] == 0.0
    assert abs(out[0].sum() - 1.0) < 1e-12
    np.testing.assert_array_equal(out[1], 0.0)


def test_masked_softmax_gradient():
    rng = np.random.default_rng(3)
    x = _param((2, 5), rng)
    keep = np.array([[True, True, False, True, False], [False, True, True, True, True]])
    w = rng.normal(size=(2, 5))
    _check(lambda: nm.tsum(nm.masked_softmax(x, keep) * w), {"x": x})


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_slice_is_zero():
    out = nm.layer_norm(nm.Tensor([5.0, 5.0, 5.0]), nm.Tensor(np.ones(3)), nm.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_already_normalised():
    out = nm.layer_norm(nm.Tensor([1.0, -1.0]), nm.Tensor(np.ones(2)), nm.Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-15)


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    x, g, b = _param((3, 5), rng), _param((5,), rng), _param((5,), rng)
    w = rng.normal(size=(3, 5))
    result = nm.gradcheck(lambda: nm.tsum(nm.layer_norm(x, g, b, 1e-5) * w), {"x": x, "g": g, "b": b})
    assert result.worst < 1e-5, result.errors


def test_layer_norm_rejects_bad_affine_shape():
    with pytest.raises(ValueError):
        nm.layer_norm(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.ones(2)), nm.Tensor(np.zeros(2)))


# ---------------------------------------------------------------- losses


def test_cross_entropy_uniform_logits():
    loss = nm.cross_entropy(nm.Tensor([[0.0, 0.0]]), [0])
    assert abs(float(loss.data) - math.log(2.0)) < 1e-15


def test_bce_zero_logit():
    loss = nm.bce_with_logits(nm.Tensor([0.0]), np.array([1.0]))
    assert abs(float(loss.data) - math.log(2.0)) < 1e-15


def test_confident_correct_prediction_drives_loss_to_zero():
    ce = [float(nm.cross_entropy(nm.Tensor([[s, 0.0]]), [0]).data) for s in (1, 5, 10, 20, 40)]
    bce = [float(nm.bce_with_logits(nm.Tensor([s]), np.array([1.0])).data) for s in (1, 5, 10, 20, 40)]
    for seq in (ce, bce):
        assert all(a > b for a, b in zip(seq, seq[1:]))
        assert seq[-1] < 1e-15


def test_losses_are_stable_for_extreme_logits():
    assert np.isfinite(float(nm.cross_entropy(nm.Tensor([[1e4, -1e4]]), [1]).data))
    assert np.isfinite(float(nm.bce_with_logits(nm.Tensor([-1e4]), np.array([1.0])).data))


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        nm.cross_entropy(nm.Tensor([[0.0, 0.0]]), [2])
    with pytest.raises(ValueError):
        nm.cross_entropy(nm.Tensor([[0.0, 0.0]]), [-1])


def test_bce_rejects_non_binary_targets():
    with pytest.raises(ValueError):
        nm.bce_with_logits(nm.Tensor([0.0]), np.array([0.5]))


def test_loss_gradients():
    rng = np.random.default_rng(5)
    z = _param((4, 3), rng)
    _check(lambda: nm.cross_entropy(z, [0, 2, 1, 2]), {"z": z})
    y = (rng.random((4, 3)) < 0.5).astype(float)
    w = (rng.random((4, 3)) < 0.7).astype(float)
    _check(lambda: nm.bce_with_logits(z, y, w), {"z": z})


# ---------------------------------------------------------------- backward


def test_backward_of_sum_is_ones():
    x = nm.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nm.backward(nm.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_square_sum_is_twice_x():
    x = nm.Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    nm.backward(nm.tsum(x * x))
    np.testing.assert_array_equal(x.grad, 2.0 * x.data)


def test_backward_accumulates_without_reset():
    x = nm.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nm.backward(nm.tsum(x))
    nm.backward(nm.tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    nm.backward(nm.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar_root():
    x = nm.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nm.backward(x * 2.0)


def test_no_grad_records_nothing():
    x = nm.Tensor(np.ones(3), requires_grad=True)
    with nm.no_grad():
        y = nm.tsum(x * 3.0)
    assert not y.requires_grad


def test_shared_subexpression_gradient():
    rng = np.random.default_rng(6)
    x = _param((3,), rng)
    _check(lambda: nm.tsum(nm.tanh(x) * nm.tanh(x) + x), {"x": x})


# ---------------------------------------------------------------- shape ops and activations


def test_elementwise_and_shape_op_gradients():
    rng = np.random.default_rng(7)
    x = _param((2, 3, 4), rng)
    y = _param((4,), rng)
    w = rng.normal(size=(3, 2, 4))
    _check(lambda: nm.tsum(nm.transpose(nm.gelu(x) - y, (1, 0, 2)) * w), {"x": x, "y": y})
    _check(lambda: nm.tsum(nm.mean(x.reshape(6, 4), axis=0) * y), {"x": x, "y": y})
    _check(lambda: nm.tsum(nm.broadcast_to(y, (3, 4)) * nm.take(x, (0,))), {"x": x, "y": y})


def test_take_concat_scatter_gradients():
    rng = np.random.default_rng(8)
    x = _param((4, 3), rng)
    z = _param((2, 3), rng)
    w = rng.normal(size=(6, 3))
    _check(lambda: nm.tsum(nm.concat([nm.take(x, np.array([3, 1, 1, 0])), z], axis=0) * w), {"x": x, "z": z})
    w2 = rng.normal(size=(5, 3))
    _check(lambda: nm.tsum(nm.scatter_rows(z, np.array([4, 1]), 5) * w2), {"z": z})


def test_embedding_padding_row_is_frozen_and_ids_checked():
    rng = np.random.default_rng(9)
    table = _param((5, 3), rng)
    table.data[0] = 0.0  # as initialised by the model
    ids = np.array([[0, 1, 4], [2, 0, 1]])
    out = nm.embedding(table, ids)
    np.testing.assert_array_equal(out.data[0, 0], 0.0)
    np.testing.assert_array_equal(out.data[0, 1], table.data[1])
    nm.backward(nm.tsum(out))
    np.testing.assert_array_equal(table.grad[0], 0.0)
    np.testing.assert_array_equal(table.grad[1], 2.0)
    with pytest.raises(ValueError):
        nm.embedding(table, np.array([5]))


def test_gelu_values():
    out = nm.gelu(nm.Tensor([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)


def test_dropout_identity_without_rng_and_deterministic_with_seed():
    x = nm.Tensor(np.ones((10, 10)))
    assert nm.dropout(x, 0.5, None) is x
    a = nm.dropout(x, 0.5, np.random.default_rng(3)).data
    b = nm.dropout(x, 0.5, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_forward_is_deterministic():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4))
    outs = [nm.layer_norm(nm.gelu(nm.Tensor(x)), nm.Tensor(np.ones(4)), nm.Tensor(np.zeros(4))).data for _ in range(2)]
    np.testing.assert_array_equal(outs[0], outs[1])


# ---------------------------------------------------------------- adam


def test_adam_first_step_moves_by_lr():
    p = nm.Tensor(np.array([0.0]), requires_grad=True)
    state = nm.AdamState.for_params([p])
    nm.adam_step([p], [np.array([1.0])], state, 1e-3)
    # m_hat = v_hat**0.5 = |g| = 1 so the step is lr / (1 + eps)
    assert abs(p.data[0] - (-1e-3 / (1.0 + 1e-8))) < 1e-18
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    p = nm.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    state = nm.AdamState.for_params([p])
    nm.adam_step([p], [np.zeros(2)], state, 1e-2)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_constant_gradient_moves_monotonically():
    p = nm.Tensor(np.array([0.0, 0.0]), requires_grad=True)
    state = nm.AdamState.for_params([p])
    trace = [p.data.copy()]
    for _ in range(2):
        nm.adam_step([p], [np.array([0.3, -2.0])], state, 1e-2)
        trace.append(p.data.copy())
    assert trace[0][0] > trace[1][0] > trace[2][0]
    assert trace[0][1] < trace[1][1] < trace[2][1]
    assert state.step == 2


def test_adam_uses_standard_constants():
    state = nm.AdamState.for_params([])
    assert (state.beta1, state.beta2, state.eps) == (0.9, 0.999, 1e-8)


def test_relative_error_of_identical_arrays_is_zero():
    a = np.array([1.0, 2.0])
    assert nm.relative_error(a, a) == 0.0
