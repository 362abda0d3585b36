"""Layer semantics and reverse-mode gradients against finite differences."""

import numpy as np
import pytest

from nasopt import autodiff as ad

from conftest import fd_param_grads


class TestConv2d:
    def test_worked_shape_example(self):
        # 5x5 input, one 2x2 filter, s=1, p=0 -> 4x4 feature map
        x = ad.Value(np.arange(25.0).reshape(1, 1, 5, 5))
        out = ad.conv2d(x, ad.Value(np.ones((1, 1, 2, 2))),
                        ad.Value(np.zeros(1)))
        assert out.shape == (1, 1, 4, 4)

    def test_identity_filter(self, rng):
        x = rng.normal(size=(2, 1, 6, 6))
        out = ad.conv2d(ad.Value(x), ad.Value(np.ones((1, 1, 1, 1))),
                        ad.Value(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_sliding_window_values(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(ad.Value(x), ad.Value(w), ad.Value(b)).data
        for co in range(3):
            for i in range(3):
                for j in range(3):
                    want = np.sum(x[0, :, i:i + 3, j:j + 3] * w[co]) + b[co]
                    assert out[0, co, i, j] == pytest.approx(want, rel=1e-12)

    def test_channel_mismatch_names_both_shapes(self, rng):
        x = ad.Value(rng.normal(size=(1, 3, 5, 5)))
        w = ad.Value(rng.normal(size=(2, 4, 3, 3)))
        with pytest.raises(ad.ShapeError) as err:
            ad.conv2d(x, w, ad.Value(np.zeros(2)))
        assert "(1, 3, 5, 5)" in str(err.value)
        assert "(2, 4, 3, 3)" in str(err.value)

    def test_output_size_rule_randomized(self, rng):
        for _ in range(40):
            n = int(rng.integers(3, 20))
            k = int(rng.integers(1, min(n, 6) + 1))
            p = int(rng.integers(0, 3))
            s = int(rng.integers(1, 4))
            if n + 2 * p < k:
                continue
            want = (n - k + 2 * p) // s + 1
            x = ad.Value(rng.normal(size=(1, 1, n, n)))
            w = ad.Value(rng.normal(size=(1, 1, k, k)))
            out = ad.conv2d(x, w, ad.Value(np.zeros(1)), stride=s, padding=p)
            assert out.shape[2] == want, (n, k, p, s)

    def test_window_larger_than_input(self, rng):
        x = ad.Value(rng.normal(size=(1, 1, 3, 3)))
        w = ad.Value(rng.normal(size=(1, 1, 5, 5)))
        with pytest.raises(ad.ShapeError):
            ad.conv2d(x, w, ad.Value(np.zeros(1)))


class TestPool2d:
    def test_max_pool_window_maxima(self, rng):
        # the 5x5 -> 2x2-window -> 4x4 map of window maxima
        x = rng.normal(size=(1, 1, 5, 5))
        out = ad.pool2d(ad.Value(x), "max", 2, 1)
        assert out.shape == (1, 1, 4, 4)
        for i in range(4):
            for j in range(4):
                assert out.data[0, 0, i, j] == x[0, 0, i:i + 2, j:j + 2].max()

    def test_avg_pool_constant(self):
        x = ad.Value(np.full((1, 2, 6, 6), 3.75))
        out = ad.pool2d(x, "avg", 2, 1)
        np.testing.assert_allclose(out.data, 3.75, rtol=0, atol=1e-15)

    def test_avg_pool_equals_depthwise_conv(self, rng):
        x = rng.random((1, 4, 8, 8))
        p = 2
        pooled = ad.pool2d(ad.Value(x), "avg", p, 1).data
        w = np.zeros((4, 4, p, p))
        for c in range(4):
            w[c, c] = 1.0 / (p * p)
        conved = ad.conv2d(ad.Value(x), ad.Value(w),
                           ad.Value(np.zeros(4))).data
        assert np.abs(pooled - conved).max() < 1e-12

    def test_max_grad_routes_to_first_maximum(self):
        x = ad.Value(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]))
        out = ad.pool2d(x, "max", 2, 1)
        loss = ad.tensor_sum(out)
        ad.backward(loss)
        np.testing.assert_array_equal(
            x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))

    def test_window_too_large(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.pool2d(ad.Value(rng.normal(size=(1, 1, 2, 2))), "max", 3, 1)


class TestDense:
    def test_zero_weights_bias_rows(self, rng):
        x = ad.Value(rng.normal(size=(4, 3)))
        b = np.array([1.0, -2.0])
        out = ad.dense(x, ad.Value(np.zeros((3, 2))), ad.Value(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_identity_weights(self, rng):
        x = rng.normal(size=(5, 3))
        out = ad.dense(ad.Value(x), ad.Value(np.eye(3)),
                       ad.Value(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_manual_matrix_product(self, rng):
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        out = ad.dense(ad.Value(x), ad.Value(w), ad.Value(b)).data
        manual = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                manual[i, j] = sum(x[i, k] * w[k, j] for k in range(3)) + b[j]
        np.testing.assert_allclose(out, manual, rtol=0, atol=1e-15)

    def test_feature_mismatch(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.dense(ad.Value(rng.normal(size=(2, 3))),
                     ad.Value(rng.normal(size=(4, 2))),
                     ad.Value(np.zeros(2)))


class TestConcatAdd:
    def test_concat_single_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = ad.concat_channels([ad.Value(x)])
        np.testing.assert_array_equal(out.data, x)

    def test_concat_two_slices(self, rng):
        a = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=(1, 1, 3, 3))
        out = ad.concat_channels([ad.Value(a), ad.Value(b)]).data
        np.testing.assert_array_equal(out[:, :1], a)
        np.testing.assert_array_equal(out[:, 1:], b)

    def test_concat_gradient_splits(self, rng):
        a = ad.Value(rng.normal(size=(1, 2, 3, 3)))
        b = ad.Value(rng.normal(size=(1, 1, 3, 3)))
        loss = ad.tensor_sum(ad.concat_channels([a, b]))
        ad.backward(loss)
        np.testing.assert_array_equal(a.grad, np.ones(a.shape))
        np.testing.assert_array_equal(b.grad, np.ones(b.shape))

    def test_concat_spatial_mismatch(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.concat_channels([ad.Value(rng.normal(size=(1, 1, 3, 3))),
                                ad.Value(rng.normal(size=(1, 1, 4, 4)))])

    def test_add_mismatch(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.add(ad.Value(np.zeros((1, 2))), ad.Value(np.zeros((2, 1))))


class TestScaledTanh:
    def test_zero_maps_to_midpoint(self):
        out = ad.scaled_tanh(ad.Value(np.zeros((1, 3))), -100.0, 100.0)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_large_input_approaches_hi(self):
        out = ad.scaled_tanh(ad.Value(np.full((1, 2), 40.0)), -100.0, 100.0)
        np.testing.assert_allclose(out.data, 100.0, rtol=0, atol=1e-9)
        assert np.all(out.data < 100.0)

    def test_unit_value(self):
        out = ad.scaled_tanh(ad.Value(np.array([[1.0]])), 0.0, 1.0)
        want = (np.tanh(1.0) + 1.0) / 2.0
        assert out.data[0, 0] == pytest.approx(want, abs=1e-15)
        assert out.data[0, 0] == pytest.approx(0.8808, abs=5e-5)

    def test_requires_lo_below_hi(self):
        with pytest.raises(ValueError):
            ad.scaled_tanh(ad.Value(np.zeros((1, 2))), 1.0, 1.0)

    def test_outputs_strictly_inside(self, rng):
        z = rng.normal(size=(4, 6)) * 50
        out = ad.scaled_tanh(ad.Value(z), -5.0, 2.0)
        assert np.all(out.data > -5.0) and np.all(out.data < 2.0)


class TestBackward:
    def test_sum_conv_filter_gradient_is_window_sum(self, rng):
        x = rng.normal(size=(1, 1, 5, 5))
        store = ad.ParamStore()
        store.add("w", np.ones((1, 1, 2, 2)))
        store.add("b", np.zeros(1))

        def loss():
            return ad.tensor_sum(ad.conv2d(ad.Value(x), store.leaf("w"),
                                           store.leaf("b")))

        assert fd_param_grads(loss, store) < 1e-4
        ad.backward(loss())
        want = np.array([[[[x[0, 0, di:di + 4, dj:dj + 4].sum()
                            for dj in range(2)] for di in range(2)]]])
        np.testing.assert_allclose(store.grads["w"], want, rtol=1e-12)

    def test_unused_parameter_gets_no_gradient(self, rng):
        store = ad.ParamStore()
        store.add("used", rng.normal(size=(2, 2)))
        store.add("unused", rng.normal(size=(2, 2)))
        x = ad.Value(rng.normal(size=(1, 2)))
        loss = ad.tensor_sum(ad.dense(x, store.leaf("used"),
                                      ad.Value(np.zeros(2))))
        ad.backward(loss)
        assert store.grads["unused"] is None

    def test_chain_conv_pool_dense_matches_fd(self, rng):
        x = rng.normal(size=(2, 2, 7, 7))
        store = ad.ParamStore()
        store.add("cw", rng.normal(size=(3, 2, 3, 3)))
        store.add("cb", rng.normal(size=3))
        store.add("dw", rng.normal(size=(3 * 4 * 4, 5)))
        store.add("db", rng.normal(size=5))

        def loss():
            h = ad.conv2d(ad.Value(x), store.leaf("cw"), store.leaf("cb"))
            h = ad.pool2d(h, "max", 2, 1)
            h = ad.dense(ad.flatten(h), store.leaf("dw"), store.leaf("db"))
            return ad.tensor_mean(h)

        assert fd_param_grads(loss, store) < 1e-4

    def test_double_backward_raises(self, rng):
        x = ad.Value(rng.normal(size=(1, 2)))
        loss = ad.tensor_sum(x)
        ad.backward(loss)
        with pytest.raises(ad.GraphStateError):
            ad.backward(loss)

    def test_shared_parameter_accumulates(self, rng):
        # a weight used twice gets the sum of both contributions
        store = ad.ParamStore()
        store.add("w", rng.normal(size=(2, 2)))
        x = rng.normal(size=(1, 2))

        def loss():
            leaf = store.leaf("w")
            h1 = ad.dense(ad.Value(x), leaf, ad.Value(np.zeros(2)))
            h2 = ad.dense(h1, store.leaf("w"), ad.Value(np.zeros(2)))
            return ad.tensor_sum(h2)

        assert fd_param_grads(loss, store) < 1e-4


class TestAdam:
    def test_single_step_hand_values(self):
        # t=1, g=1 everywhere: bias correction makes the step -lr/(1+eps)
        store = ad.ParamStore()
        store.add("p", np.zeros(4))
        store.grads["p"] = np.ones(4)
        cfg = ad.AdamConfig(lr=0.5)
        ad.adam_step(store, cfg)
        want = -0.5 / (1.0 + cfg.eps)
        np.testing.assert_allclose(store.params["p"], want, rtol=1e-12)
        assert store.adam_t["p"] == 1
        assert store.grads["p"] is None

    def test_zero_gradient_is_fixed_point(self):
        store = ad.ParamStore()
        store.add("p", np.array([1.0, -2.0, 3.0]))
        before = store.params["p"].copy()
        for _ in range(3):
            store.grads["p"] = np.zeros(3)
            ad.adam_step(store, ad.AdamConfig())
        np.testing.assert_array_equal(store.params["p"], before)
        assert store.adam_t["p"] == 3

    def test_two_steps_match_hand_unrolled(self):
        store = ad.ParamStore()
        store.add("p", np.zeros(1))
        cfg = ad.AdamConfig(lr=0.2, beta1=0.9, beta2=0.999)
        g = 0.3
        w = m = v = 0.0
        for t in (1, 2):
            store.grads["p"] = np.full(1, g)
            ad.adam_step(store, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            w -= cfg.lr * (m / (1 - cfg.beta1 ** t)) / (
                np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
        assert abs(float(store.params["p"][0]) - w) < 1e-15

    def test_nan_gradient_aborts_naming_parameter(self):
        store = ad.ParamStore()
        store.add("good", np.zeros(2))
        store.add("bad_param", np.zeros(2))
        store.grads["good"] = np.ones(2)
        store.grads["bad_param"] = np.array([1.0, np.nan])
        with pytest.raises(ad.NumericError, match="bad_param"):
            ad.adam_step(store, ad.AdamConfig())
        # aborted step must not touch any parameter
        np.testing.assert_array_equal(store.params["good"], np.zeros(2))

    def test_frozen_parameters_skipped(self):
        store = ad.ParamStore()
        store.add("f", np.ones(2), frozen=True)
        store.grads["f"] = np.ones(2)
        ad.adam_step(store, ad.AdamConfig())
        np.testing.assert_array_equal(store.params["f"], np.ones(2))
        assert store.adam_t["f"] == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ad.AdamConfig(lr=-1.0)
        with pytest.raises(ValueError):
            ad.AdamConfig(beta1=1.0)


class TestDeterminism:
    def test_forward_deterministic(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        o1 = ad.conv2d(ad.Value(x), ad.Value(w), ad.Value(b)).data
        o2 = ad.conv2d(ad.Value(x), ad.Value(w), ad.Value(b)).data
        np.testing.assert_array_equal(o1, o2)
