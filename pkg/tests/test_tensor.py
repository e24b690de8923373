"""Numeric core: op-level oracles, gradient checks, and algebraic properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdn.optim import finite_diff
from mcdn.tensor import (Rng, Tensor, add_l2_penalty, block_max_rows, clamp,
                         concat_cols, concat_rows, conv1d_same, dropout, gelu,
                         gru_layer, gru_layer_batched, layer_norm, log, matmul,
                         max_over_time, mul, no_grad, pow_const, relu, reshape,
                         sigmoid, slice_cols, slice_rows, softmax_rows, sq_sum,
                         tanh, tmean, transpose, tsum)


def rel_err(a, b, floor=1e-6):
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((num / den).max())


def check_grad(build, param, tol=1e-5, eps=1e-4):
    """Backward gradient of build() wrt param vs central finite differences."""
    param.zero_grad()
    loss = build()
    loss.backward()
    analytic = param.grad.copy()

    def f(_theta):
        with no_grad():
            return float(build().data)

    fd = finite_diff(f, param.data, eps=eps)
    assert rel_err(analytic, fd) <= tol


# ---------------------------------------------------------------------------
# matmul / arithmetic
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_hand_evaluated_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_is_reported(self):
        with pytest.raises(ValueError, match="mismatch"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = Rng(0)
        a = Tensor(rng.normal((3, 4)))
        b = Tensor(rng.normal((4, 2)))
        check_grad(lambda: tsum(matmul(a, b)), a)
        check_grad(lambda: tsum(matmul(a, b)), b)


class TestArithmetic:
    def test_broadcast_add_gradient(self):
        rng = Rng(1)
        x = Tensor(rng.normal((3, 4)))
        b = Tensor(rng.normal((4,)))
        check_grad(lambda: tsum(x + b), b)

    def test_product_rule_scalars(self):
        x = Tensor(np.asarray(3.0))
        y = Tensor(np.asarray(5.0))
        out = mul(x, y)
        out.backward()
        assert float(x.grad) == 5.0
        assert float(y.grad) == 3.0

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            Tensor(np.ones((2, 2))).backward()

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor(np.asarray(2.0))
        tsum(mul(x, x)).backward()
        first = float(x.grad)
        tsum(mul(x, x)).backward()
        assert float(x.grad) == 2.0 * first

    def test_pow_log_mean_sum_gradients(self):
        rng = Rng(2)
        x = Tensor(np.abs(rng.normal((3, 3))) + 0.5)
        check_grad(lambda: tsum(pow_const(x, 3.0)), x)
        check_grad(lambda: tsum(log(x)), x)
        check_grad(lambda: tmean(mul(x, x)), x)
        check_grad(lambda: sq_sum(x), x)

    def test_l2_penalty_value_and_gradient(self):
        p = Tensor(np.asarray([1.0, 2.0]), trainable=True)
        base = Tensor(np.asarray(1.5))
        out = add_l2_penalty(base, [p], lam=0.1)
        assert float(out.data) == pytest.approx(1.5 + 0.1 * 5.0)
        out.backward()
        np.testing.assert_allclose(p.grad, [0.2, 0.4])


# ---------------------------------------------------------------------------
# softmax / layer norm
# ---------------------------------------------------------------------------

class TestSoftmaxRows:
    def test_constant_row_is_uniform(self):
        out = softmax_rows(Tensor([[7.0, 7.0, 7.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_closed_form_exponentials(self):
        out = softmax_rows(Tensor([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_masked_entry_exactly_zero(self):
        out = softmax_rows(Tensor([[5.0, 5.0]]), mask=np.array([[True, False]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_fully_masked_row_is_error(self):
        with pytest.raises(ValueError, match="masked"):
            softmax_rows(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    def test_rows_sum_to_one(self):
        rng = Rng(3)
        out = softmax_rows(Tensor(rng.normal((5, 7))))
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-6)

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=6),
           st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, row, c):
        base = softmax_rows(Tensor([row])).data
        shifted = softmax_rows(Tensor([[v + c for v in row]])).data
        np.testing.assert_allclose(base, shifted, atol=1e-9)

    def test_softmax_log_composition_gradient(self):
        rng = Rng(4)
        x = Tensor(rng.normal((3, 4)))
        check_grad(lambda: tsum(log(softmax_rows(x))), x)

    def test_masked_gradient(self):
        rng = Rng(5)
        x = Tensor(rng.normal((3, 4)))
        mask = np.array([[True, True, False, True]] * 3)
        check_grad(lambda: tsum(mul(softmax_rows(x, mask), softmax_rows(x, mask))), x)


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = layer_norm(Tensor([[4.0, 4.0, 4.0]]), g, b)
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-9)

    def test_shift_invariance_exact(self):
        rng = Rng(6)
        x = rng.normal((4, 5))
        g, b = Tensor(rng.normal((5,))), Tensor(rng.normal((5,)))
        a = layer_norm(Tensor(x), g, b).data
        c = layer_norm(Tensor(x + 11.5), g, b).data
        np.testing.assert_allclose(a, c, atol=1e-10)

    def test_two_point_row(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_nonpositive_eps_is_error(self):
        with pytest.raises(ValueError, match="eps"):
            layer_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_gradients(self):
        rng = Rng(7)
        x = Tensor(rng.normal((3, 4)))
        g = Tensor(rng.normal((4,)))
        b = Tensor(rng.normal((4,)))
        loss = lambda: tsum(mul(layer_norm(x, g, b), layer_norm(x, g, b)))
        check_grad(loss, x, tol=1e-4)
        check_grad(loss, g)
        check_grad(loss, b)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class TestActivations:
    def test_origin_values(self):
        assert gelu(Tensor([0.0])).data.item() == 0.0
        assert relu(Tensor([-1.0])).data.item() == 0.0
        assert sigmoid(Tensor([0.0])).data.item() == 0.5
        assert tanh(Tensor([0.0])).data.item() == 0.0

    def test_gelu_at_one(self):
        assert gelu(Tensor([1.0])).data.item() == pytest.approx(0.841345, abs=1e-6)

    def test_relu_definition(self):
        np.testing.assert_array_equal(relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])

    @given(st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_gelu_bounded_by_relu_envelope(self, x):
        y = gelu(Tensor([x])).data.item()
        assert min(0.0, x) - 1e-12 <= y <= max(0.0, x) + 1e-12

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_relu_idempotent(self, xs):
        once = relu(Tensor(xs)).data
        twice = relu(Tensor(once)).data
        np.testing.assert_array_equal(once, twice)

    def test_gradients(self):
        rng = Rng(8)
        x = Tensor(rng.normal((3, 3)) + 0.1)
        for fn in (gelu, relu, sigmoid, tanh):
            check_grad(lambda fn=fn: tsum(mul(fn(x), fn(x))), x)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

class TestConv1dSame:
    def test_zero_kernels_zero_bias(self):
        x = Tensor(np.ones((4, 2)))
        out = conv1d_same(x, Tensor(np.zeros((3, 2, 5))), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((4, 5)))

    def test_width_two_all_ones(self):
        x = Tensor([[1.0], [1.0], [1.0]])
        out = conv1d_same(x, Tensor(np.ones((2, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, [[2.0], [2.0], [1.0]])

    def test_interior_translation_equivariance(self):
        kernels = Tensor(Rng(9).normal((3, 1, 2)))
        bias = Tensor(np.zeros(2))
        pulse = np.zeros((8, 1))
        pulse[3, 0] = 1.0
        shifted = np.roll(pulse, 1, axis=0)
        a = conv1d_same(Tensor(pulse), kernels, bias).data
        b = conv1d_same(Tensor(shifted), kernels, bias).data
        np.testing.assert_allclose(a[2:6], b[3:7], atol=1e-12)

    @given(st.integers(1, 7), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_output_length_equals_input_length(self, t, w):
        out = conv1d_same(Tensor(np.ones((t, 2))), Tensor(np.ones((w, 2, 3))),
                          Tensor(np.zeros(3)))
        assert out.shape == (t, 3)

    def test_depth_mismatch_is_error(self):
        with pytest.raises(ValueError, match="depth"):
            conv1d_same(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 5, 1))),
                        Tensor(np.zeros(1)))

    def test_gradients(self):
        rng = Rng(10)
        x = Tensor(rng.normal((5, 2)))
        k = Tensor(rng.normal((3, 2, 4)))
        b = Tensor(rng.normal((4,)))
        loss = lambda: tsum(mul(conv1d_same(x, k, b), conv1d_same(x, k, b)))
        check_grad(loss, x)
        check_grad(loss, k)
        check_grad(loss, b)


class TestMaxOverTime:
    def test_single_row(self):
        out = max_over_time(Tensor([[3.0, -1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, -1.0]])

    def test_row_permutation_invariant(self):
        rng = Rng(11)
        x = rng.normal((6, 3))
        a = max_over_time(Tensor(x)).data
        b = max_over_time(Tensor(x[::-1].copy())).data
        np.testing.assert_array_equal(a, b)

    def test_columnwise_max(self):
        out = max_over_time(Tensor([[1.0, 5.0], [3.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 5.0]])

    def test_tie_routes_gradient_to_first_max(self):
        x = Tensor([[2.0], [2.0]])
        tsum(max_over_time(x)).backward()
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0]])

    def test_block_max_matches_per_range_max(self):
        rng = Rng(12)
        x = Tensor(rng.normal((9, 4)))
        ranges = [(0, 3), (3, 4), (4, 9)]
        blocked = block_max_rows(x, ranges).data
        for i, (s, e) in enumerate(ranges):
            np.testing.assert_array_equal(blocked[i],
                                          max_over_time(slice_rows(x, s, e)).data[0])

    def test_block_max_gradient(self):
        rng = Rng(13)
        x = Tensor(rng.normal((7, 3)))
        ranges = [(0, 4), (4, 7)]
        check_grad(lambda: tsum(mul(block_max_rows(x, ranges),
                                    block_max_rows(x, ranges))), x)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def _gru_weights(rng, d_in, d_h):
    return (Tensor(rng.normal((d_in, 3 * d_h), scale=0.5)),
            Tensor(rng.normal((d_h, 3 * d_h), scale=0.5)),
            Tensor(rng.normal((3 * d_h,), scale=0.5)))


class TestGru:
    def test_zero_weights_zero_states(self):
        x = Tensor(np.ones((4, 2)))
        w = Tensor(np.zeros((2, 9)))
        u = Tensor(np.zeros((3, 9)))
        b = Tensor(np.zeros(9))
        out = gru_layer(x, w, u, b)
        np.testing.assert_array_equal(out.data, np.zeros((4, 3)))

    def test_scalar_single_step(self):
        # all weights 1, biases 0, h0=0: h' = sigmoid(1) * tanh(1)
        x = Tensor([[1.0]])
        w = Tensor(np.ones((1, 3)))
        u = Tensor(np.ones((1, 3)))
        b = Tensor(np.zeros(3))
        out = gru_layer(x, w, u, b)
        expected = (1.0 / (1.0 + math.exp(-1.0))) * math.tanh(1.0)
        assert float(out.data[0, 0]) == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(0.5568, abs=1e-4)

    def test_backward_direction_equals_forward_on_reversed_input(self):
        rng = Rng(14)
        x = rng.normal((5, 2))
        w, u, b = _gru_weights(rng, 2, 3)
        rev = gru_layer(Tensor(x), w, u, b, reverse=True).data
        fwd = gru_layer(Tensor(x[::-1].copy()), w, u, b, reverse=False).data
        np.testing.assert_allclose(rev, fwd, atol=1e-12)

    def test_batched_matches_single_sequence(self):
        rng = Rng(15)
        w, u, b = _gru_weights(rng, 2, 3)
        lengths = [4, 2, 5]
        n = 5
        seqs = [rng.normal((t, 2)) for t in lengths]
        padded = np.zeros((len(lengths) * n, 2))
        for i, s in enumerate(seqs):
            padded[i * n:i * n + len(s)] = s
        for reverse in (False, True):
            batched = gru_layer_batched(Tensor(padded), w, u, b, lengths, n,
                                        reverse=reverse).data
            for i, s in enumerate(seqs):
                single = gru_layer(Tensor(s), w, u, b, reverse=reverse).data
                np.testing.assert_allclose(batched[i * n:i * n + len(s)], single,
                                           atol=1e-12)
                # masked updates freeze the final state through the padding
                np.testing.assert_allclose(batched[i * n + n - 1], single[-1],
                                           atol=1e-12)

    def test_gradients(self):
        rng = Rng(16)
        x = Tensor(rng.normal((8, 2)))  # two sequences of length 4 padded to 4
        w, u, b = _gru_weights(rng, 2, 3)
        loss = lambda: tsum(mul(gru_layer_batched(x, w, u, b, [4, 3], 4),
                                gru_layer_batched(x, w, u, b, [4, 3], 4)))
        check_grad(loss, x, tol=1e-4)
        check_grad(loss, w, tol=1e-4)
        check_grad(loss, u, tol=1e-4)
        check_grad(loss, b, tol=1e-4)

    def test_reverse_gradients(self):
        rng = Rng(17)
        x = Tensor(rng.normal((6, 2)))
        w, u, b = _gru_weights(rng, 2, 3)
        loss = lambda: tsum(mul(gru_layer_batched(x, w, u, b, [3, 2], 3, reverse=True),
                                gru_layer_batched(x, w, u, b, [3, 2], 3, reverse=True)))
        check_grad(loss, x, tol=1e-4)
        check_grad(loss, u, tol=1e-4)


# ---------------------------------------------------------------------------
# dropout / shaping / misc
# ---------------------------------------------------------------------------

class TestDropout:
    def test_identity_when_not_training(self):
        x = Tensor(np.ones((3, 3)))
        assert dropout(x, 0.5, Rng(0), training=False) is x

    def test_identity_when_rate_zero(self):
        x = Tensor(np.ones((3, 3)))
        assert dropout(x, 0.0, Rng(0), training=True) is x

    def test_bad_rate_is_error(self):
        with pytest.raises(ValueError, match="rate"):
            dropout(Tensor(np.ones(3)), 1.0, Rng(0), training=True)

    def test_inverted_scaling_preserves_expectation(self):
        x = np.full((100,), 2.0)
        rng = Rng(42)
        total = np.zeros_like(x)
        n = 2000
        for _ in range(n):
            total += dropout(Tensor(x), 0.5, rng, training=True).data
        mean = total / n
        # per-entry std of the Monte Carlo mean is |x| / sqrt(n)
        sigma = 2.0 / math.sqrt(n)
        assert np.abs(mean - x).max() <= 3.0 * sigma * math.sqrt(math.log(len(x)) + 1)

    def test_backward_matches_mask(self):
        x = Tensor(np.ones((4, 4)))
        out = dropout(x, 0.5, Rng(7), training=True)
        tsum(out).backward()
        np.testing.assert_array_equal(x.grad, out.data)  # grad = mask * 2 = output


class TestShaping:
    def test_concat_slice_round_trip(self):
        rng = Rng(18)
        a, b = Tensor(rng.normal((2, 3))), Tensor(rng.normal((4, 3)))
        joined = concat_rows([a, b])
        np.testing.assert_array_equal(slice_rows(joined, 2, 6).data, b.data)
        wide = concat_cols([a, Tensor(rng.normal((2, 2)))])
        np.testing.assert_array_equal(slice_cols(wide, 0, 3).data, a.data)

    def test_transpose_reshape_gradients(self):
        rng = Rng(19)
        x = Tensor(rng.normal((3, 4)))
        check_grad(lambda: tsum(mul(transpose(x), transpose(x))), x)
        check_grad(lambda: tsum(mul(reshape(x, (4, 3)), reshape(x, (4, 3)))), x)

    def test_clamp_gradient_zero_outside(self):
        x = Tensor([0.5, 2.0, -1.0])
        tsum(clamp(x, 0.0, 1.0)).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones((2, 2)))
        with no_grad():
            out = mul(x, x)
        assert out._parents == ()
        assert out._backward_fn is None


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = Rng(123), Rng(123)
        np.testing.assert_array_equal(a.normal((4, 4)), b.normal((4, 4)))
        np.testing.assert_array_equal(a.permutation(10), b.permutation(10))

    def test_counter_tracks_draws(self):
        rng = Rng(0)
        rng.uniform((2,))
        rng.integers(0, 5)
        assert rng.counter == 2
