"""Tape mechanics, op forward oracles, and gradient correctness."""

import numpy as np
import pytest

from cetx import ops
from cetx.tensor import Parameter, Tape, Tensor, backward, no_grad


class TestTensor:
    def test_dtype_coercion(self):
        assert Tensor(np.array([1, 2, 3])).data.dtype == np.float32
        assert Tensor(np.array([1.0], dtype=np.float64)).data.dtype == np.float64

    def test_scalar_shape(self):
        t = Tensor(2.5)
        assert t.shape == ()
        assert float(t.data) == 2.5

    def test_detach_shares_data_but_cuts_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = x * 2.0
            d = y.detach()
            assert d.data is y.data
            assert not d.requires_grad

    def test_arithmetic_forward(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([3.0, 5.0]))
        assert np.allclose((a + b).data, [4.0, 7.0])
        assert np.allclose((a * b).data, [3.0, 10.0])
        assert np.allclose((a - b).data, [-2.0, -3.0])
        assert np.allclose((-a).data, [-1.0, -2.0])
        assert np.allclose((a / 2.0).data, [0.5, 1.0])
        assert (a.sum()).shape == ()

    def test_add_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_backward_simple_chain(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True, dtype=np.float64)
        with Tape():
            y = ((x * x) * 3.0).sum()
            backward(y)
        assert np.allclose(x.grad, 6.0 * x.data)

    def test_backward_accumulates_across_uses(self):
        x = Tensor(np.array([1.5]), requires_grad=True, dtype=np.float64)
        with Tape():
            y = (x * 2.0 + x * 3.0).sum()
            backward(y)
        assert np.allclose(x.grad, [5.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape():
            y = x * 1.0
            with pytest.raises(ValueError):
                backward(y)

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape():
            with no_grad():
                y = x * 2.0
            assert not y.requires_grad

    def test_constant_inputs_record_nothing(self):
        x = Tensor(np.ones(2))
        with Tape() as tape:
            _ = x * 2.0
            assert len(tape.nodes) == 0

    def test_parameter_wraps_tensor(self):
        p = Parameter("w", np.zeros((2, 2)), weight_decay_eligible=True)
        assert p.name == "w"
        assert p.value.requires_grad
        assert p.weight_decay_eligible


class TestConv1d:
    def test_hand_example(self):
        # single channel, kernel 3, same padding: y[t] = sum_k w[k] x[t+k-1]
        x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        w = Tensor(np.array([[[1.0, 0.0, -1.0]]]))
        b = Tensor(np.array([0.5]))
        y = ops.conv1d(x, w, b)
        # padded x: [0,1,2,3,4,0]
        assert np.allclose(y.data, [[[0 - 2 + 0.5, 1 - 3 + 0.5, 2 - 4 + 0.5, 3 - 0 + 0.5]]])

    def test_even_kernel_padding_split(self):
        # kernel 4 pads 2 left, 1 right
        x = Tensor(np.arange(5.0).reshape(1, 1, 5))
        w = Tensor(np.ones((1, 1, 4)))
        b = Tensor(np.zeros(1))
        y = ops.conv1d(x, w, b)
        padded = np.array([0, 0, 0, 1, 2, 3, 4, 0])
        expected = [padded[i : i + 4].sum() for i in range(5)]
        assert np.allclose(y.data[0, 0], expected)

    def test_shape_and_counter(self):
        ops.counters.reset()
        x = Tensor(np.zeros((3, 2, 16)))
        w = Tensor(np.zeros((5, 2, 4)))
        b = Tensor(np.zeros(5))
        y = ops.conv1d(x, w, b)
        assert y.shape == (3, 5, 16)
        assert ops.counters.conv1d == 1

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.conv1d(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros(2)))

    def test_gradient(self, rng):
        x = Tensor(rng.normal(0, 1, (2, 3, 10)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.normal(0, 0.5, (4, 3, 5)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(0, 1, 4), requires_grad=True, dtype=np.float64)
        r = rng.uniform(0.5, 1.5, (2, 4, 10))

        def fn():
            y = ops.conv1d(x, w, b) * Tensor(r, dtype=np.float64)
            return (y * y).sum()

        res = ops.grad_check(fn, [("x", x), ("w", w), ("b", b)])
        assert res.ok, res.summary()


class TestMaxPool:
    def test_pooled_length_ceil_chain(self):
        # the stock pooling chain for 400-sample windows
        lengths = []
        length = 400
        for _ in range(5):
            length = ops.pooled_length(length, 4, 4)
            lengths.append(length)
        assert lengths == [100, 25, 7, 2, 1]

    def test_hand_example_with_padding(self):
        x = Tensor(np.array([[[1.0, 3.0, 2.0, 5.0, 4.0]]]))
        y = ops.max_pool1d(x, 2, 2)
        assert np.allclose(y.data, [[[3.0, 5.0, 4.0]]])

    def test_ties_route_gradient_to_first_position(self):
        x = Tensor(np.array([[[2.0, 2.0]]]), requires_grad=True, dtype=np.float64)
        with Tape():
            y = ops.max_pool1d(x, 2, 2).sum()
            backward(y)
        assert np.array_equal(x.grad, [[[1.0, 0.0]]])

    def test_overlapping_windows_accumulate(self):
        x = Tensor(np.array([[[1.0, 9.0, 2.0]]]), requires_grad=True, dtype=np.float64)
        with Tape():
            y = ops.max_pool1d(x, 2, 1).sum()
            backward(y)
        # windows [1,9] and [9,2] both pick index 1
        assert np.array_equal(x.grad, [[[0.0, 2.0, 0.0]]])

    def test_gradient(self, rng):
        data = rng.permutation(np.arange(2 * 2 * 13, dtype=np.float64)).reshape(2, 2, 13)
        x = Tensor(data, requires_grad=True, dtype=np.float64)
        r = rng.uniform(0.5, 1.5, (2, 2, 4))

        def fn():
            y = ops.max_pool1d(x, 4, 4) * Tensor(r, dtype=np.float64)
            return (y * y).sum()

        res = ops.grad_check(fn, [("x", x)])
        assert res.ok, res.summary()


class TestNormalize:
    def test_instance_norm_standardizes_per_channel(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, (4, 3, 50)))
        y = ops.instance_norm(x)
        assert np.allclose(y.data.mean(axis=-1), 0.0, atol=1e-5)
        assert np.allclose(y.data.std(axis=-1), 1.0, atol=1e-3)

    def test_layer_norm_standardizes_jointly(self, rng):
        x = Tensor(rng.normal(-1.0, 4.0, (4, 3, 50)))
        y = ops.layer_norm(x)
        flat = y.data.reshape(4, -1)
        assert np.allclose(flat.mean(axis=1), 0.0, atol=1e-5)
        assert np.allclose(flat.std(axis=1), 1.0, atol=1e-3)

    def test_affine_applies_per_channel(self):
        x = Tensor(np.random.default_rng(0).normal(0, 1, (2, 2, 8)))
        gain = Tensor(np.array([2.0, 3.0]))
        shift = Tensor(np.array([-1.0, 1.0]))
        base = ops.instance_norm(x).data
        y = ops.instance_norm(x, gain, shift).data
        assert np.allclose(y[:, 0], base[:, 0] * 2.0 - 1.0, atol=1e-6)
        assert np.allclose(y[:, 1], base[:, 1] * 3.0 + 1.0, atol=1e-6)

    def test_dispatcher_and_bad_mode(self):
        x = Tensor(np.ones((1, 2, 4)))
        assert np.allclose(ops.normalize(x, "instance").data, ops.instance_norm(x).data)
        assert np.allclose(ops.normalize(x, "layer").data, ops.layer_norm(x).data)
        with pytest.raises(ValueError):
            ops.normalize(x, "batch")

    def test_gain_without_shift_rejected(self):
        with pytest.raises(ValueError):
            ops.instance_norm(Tensor(np.ones((1, 2, 4))), gain=Tensor(np.ones(2)))

    @pytest.mark.parametrize("op", [ops.instance_norm, ops.layer_norm])
    def test_gradient(self, op, rng):
        x = Tensor(rng.normal(0, 1, (2, 3, 10)), requires_grad=True, dtype=np.float64)
        gain = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=np.float64)
        shift = Tensor(rng.normal(0, 1, 3), requires_grad=True, dtype=np.float64)
        r = rng.uniform(0.5, 1.5, (2, 3, 10))

        def fn():
            y = op(x, gain, shift) * Tensor(r, dtype=np.float64)
            return (y * y).sum()

        res = ops.grad_check(fn, [("x", x), ("gain", gain), ("shift", shift)])
        assert res.ok, res.summary()


class TestPrelu:
    def test_positive_passthrough_negative_scaled(self):
        x = Tensor(np.array([[1.0, -2.0], [-4.0, 3.0]]))
        slopes = Tensor(np.array([0.5, 0.25]))
        y = ops.prelu(x, slopes, axis=-1)
        assert np.allclose(y.data, [[1.0, -0.5], [-2.0, 3.0]])

    def test_channel_axis_on_3d(self):
        x = Tensor(np.full((1, 2, 3), -1.0))
        slopes = Tensor(np.array([0.1, 0.9]))
        y = ops.prelu(x, slopes, axis=-2)
        assert np.allclose(y.data[0, 0], -0.1)
        assert np.allclose(y.data[0, 1], -0.9)

    def test_gradient_includes_slopes(self, rng):
        x = Tensor(rng.normal(0, 1, (3, 4, 6)), requires_grad=True, dtype=np.float64)
        slopes = Tensor(rng.uniform(0.1, 0.4, 4), requires_grad=True, dtype=np.float64)
        r = rng.uniform(0.5, 1.5, (3, 4, 6))

        def fn():
            y = ops.prelu(x, slopes, axis=-2) * Tensor(r, dtype=np.float64)
            return (y * y).sum()

        res = ops.grad_check(fn, [("x", x), ("slopes", slopes)])
        assert res.ok, res.summary()


class TestDenseGapDropout:
    def test_dense_matches_matmul(self, rng):
        x = rng.normal(0, 1, (5, 7))
        w = rng.normal(0, 1, (3, 7))
        b = rng.normal(0, 1, 3)
        y = ops.dense(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(y.data, x @ w.T + b, atol=1e-6)

    def test_gap_means_over_time(self):
        x = Tensor(np.arange(12.0).reshape(1, 2, 6))
        y = ops.global_avg_pool(x)
        assert np.allclose(y.data, [[2.5, 8.5]])

    def test_dropout_inference_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        y = ops.dropout(x, 0.5, training=False)
        assert y.data is x.data

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        rng = np.random.Generator(np.random.PCG64(0))
        y = ops.dropout(x, 0.0, training=True, rng=rng)
        assert y.data is x.data

    def test_dropout_scales_survivors(self):
        x = Tensor(np.ones((2000,)))
        rng = np.random.Generator(np.random.PCG64(3))
        y = ops.dropout(x, 0.25, training=True, rng=rng)
        kept = y.data[y.data != 0]
        assert np.allclose(kept, 1.0 / 0.75)
        assert abs((y.data == 0).mean() - 0.25) < 0.05

    def test_dropout_training_needs_rng(self):
        with pytest.raises(ValueError):
            ops.dropout(Tensor(np.ones(3)), 0.5, training=True)

    def test_dense_gradient(self, rng):
        x = Tensor(rng.normal(0, 1, (4, 6)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.normal(0, 0.5, (3, 6)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(0, 1, 3), requires_grad=True, dtype=np.float64)
        r = rng.uniform(0.5, 1.5, (4, 3))

        def fn():
            y = ops.dense(x, w, b) * Tensor(r, dtype=np.float64)
            return (y * y).sum()

        res = ops.grad_check(fn, [("x", x), ("w", w), ("b", b)])
        assert res.ok, res.summary()


class TestSoftmaxCrossEntropy:
    def test_softmax_rows_sum_to_one(self, rng):
        z = rng.normal(0, 10, (6, 4))
        p = ops.softmax(z)
        assert np.allclose(p.sum(axis=1), 1.0)
        assert (p > 0).all()

    def test_softmax_is_shift_invariant_and_stable(self):
        z = np.array([[1000.0, 1001.0]])
        p = ops.softmax(z)
        assert np.isfinite(p).all()
        assert np.allclose(p, ops.softmax(z - 1000.0))

    def test_cross_entropy_hand_value(self):
        logits = Tensor(np.array([[0.0, 0.0]]), dtype=np.float64)
        target = np.array([[1.0, 0.0]])
        loss = ops.cross_entropy_with_logits(logits, target)
        assert float(loss.data) == pytest.approx(np.log(2.0), rel=1e-12)

    def test_weights_divide_by_full_batch(self):
        # two rows, one masked out: denominator stays 2
        logits = Tensor(np.zeros((2, 3)), dtype=np.float64)
        target = np.eye(3)[[0, 1]]
        w = np.array([1.0, 0.0])
        loss = ops.cross_entropy_with_logits(logits, target, weights=w)
        assert float(loss.data) == pytest.approx(np.log(3.0) / 2.0, rel=1e-12)

    def test_all_weights_zero_gives_zero(self):
        logits = Tensor(np.ones((2, 3)), dtype=np.float64)
        target = np.eye(3)[[0, 1]]
        loss = ops.cross_entropy_with_logits(logits, target, weights=np.zeros(2))
        assert float(loss.data) == 0.0

    def test_gradient_is_softmax_minus_target_over_n(self, rng):
        z = rng.normal(0, 2, (5, 4))
        logits = Tensor(z, requires_grad=True, dtype=np.float64)
        target = np.eye(4)[rng.integers(0, 4, 5)]
        with Tape():
            loss = ops.cross_entropy_with_logits(logits, target)
            backward(loss)
        expected = (ops.softmax(z) - target) / 5.0
        assert np.allclose(logits.grad, expected, atol=1e-12)

    def test_gradient_finite_difference(self, rng):
        logits = Tensor(rng.normal(0, 2, (5, 4)), requires_grad=True, dtype=np.float64)
        target = rng.dirichlet(np.ones(4), 5)
        weights = rng.uniform(0, 1, 5)

        def fn():
            return ops.cross_entropy_with_logits(logits, target, weights=weights)

        res = ops.grad_check(fn, [("logits", logits)])
        assert res.ok, res.summary()


class TestGradCheckHarness:
    def test_detects_corrupted_backward(self):
        # a deliberately wrong gradient must be flagged
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)

        def fn():
            from cetx.tensor import record

            out = Tensor(x.data * x.data)
            return record("bad_square", out, (x,), lambda g: (g * 3.0 * x.data,)).sum()

        res = ops.grad_check(fn, [("x", x)])
        assert not res.ok
        assert res.failures

    def test_rejects_float32(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            ops.grad_check(lambda: (x * x).sum(), [("x", x)])
