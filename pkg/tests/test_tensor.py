import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdadapt.gradients import clip_global_norm, finite_diff_check, global_norm, numeric_grad
from crowdadapt.tensor import (
    Graph,
    Tensor,
    backward,
    conv2d,
    conv_output_size,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
    sse,
    tsum,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def const(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestConv2d:
    def test_all_ones(self):
        out = conv2d(const(np.ones((1, 1, 3, 3))), const(np.ones((1, 1, 3, 3))), const([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_pointwise_affine(self):
        out = conv2d(const([[[[1.0, 2.0, 3.0]]]]), const([[[[2.0]]]]), const([0.5]))
        np.testing.assert_array_equal(out.data.reshape(-1), [2.5, 4.5, 6.5])

    def test_dilated_same_padding(self):
        # oracle: H' = (H + 2p - d(k-1) - 1)/s + 1
        assert (8 + 2 * 2 - 2 * (3 - 1) - 1) // 1 + 1 == 8
        out = conv2d(const(np.ones((1, 1, 8, 8))), const(np.ones((1, 1, 3, 3))), None, padding=2, dilation=2)
        assert out.shape == (1, 1, 8, 8)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        s, p, d = 2, 1, 2
        out = conv2d(const(x), const(w), const(b), stride=s, padding=p, dilation=d).data
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        Ho, Wo = conv_output_size(7, 3, s, p, d), conv_output_size(6, 2, s, p, d)
        ref = np.zeros((2, 4, Ho, Wo))
        for n in range(2):
            for o in range(4):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = b[o]
                        for c in range(3):
                            for ki in range(3):
                                for kj in range(2):
                                    acc += xp[n, c, i * s + ki * d, j * s + kj * d] * w[o, c, ki, kj]
                        ref[n, o, i, j] = acc
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d(const(np.ones((1, 2, 4, 4))), const(np.ones((1, 3, 3, 3))), None)

    def test_too_small_names_axis(self):
        with pytest.raises(ValueError, match="height"):
            conv2d(const(np.ones((1, 1, 2, 8))), const(np.ones((1, 1, 3, 3))), None)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 3, 1)])
    def test_gradients(self, stride, padding, dilation):
        rng = np.random.default_rng(stride * 10 + padding + dilation)
        x = leaf(rng.standard_normal((2, 2, 7, 8)))
        w = leaf(rng.standard_normal((3, 2, 3, 3)))
        b = leaf(rng.standard_normal(3))
        r = rng.standard_normal(conv2d(x, w, b, stride, padding, dilation).shape)

        def fn():
            return tsum(conv2d(x, w, b, stride, padding, dilation) * const(r))

        rep = finite_diff_check(fn, [x, w, b])
        assert rep.max_rel_error < 1e-4


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(relu(const([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_dead_region(self):
        x = leaf([-3.0, -1.0, -0.5])
        out = relu(x)
        g = backward(tsum(out))
        np.testing.assert_array_equal(out.data, 0)
        np.testing.assert_array_equal(g[x], 0)

    def test_gradient_against_finite_difference(self):
        x = leaf([-1.0, 3.0])
        g = backward(tsum(relu(x)))[x]
        num = numeric_grad(lambda: tsum(relu(x)), x, 1e-5)
        np.testing.assert_allclose(g, [0.0, 1.0])
        np.testing.assert_allclose(num, g, atol=1e-9)

    def test_subgradient_at_zero(self):
        x = leaf([0.0])
        assert backward(tsum(relu(x)))[x][0] == 0.0


class TestMaxPool:
    def test_forward(self):
        out = maxpool2d(const([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_tie_goes_to_first(self):
        x = leaf([[[[5.0, 5.0], [0.0, 0.0]]]])
        g = backward(tsum(maxpool2d(x, 2, 2)))[x]
        np.testing.assert_array_equal(g.reshape(-1), [1.0, 0.0, 0.0, 0.0])

    def test_halves_spatial(self):
        assert maxpool2d(const(np.zeros((1, 2, 4, 4))), 2, 2).shape == (1, 2, 2, 2)

    def test_floor_semantics(self):
        assert maxpool2d(const(np.zeros((1, 1, 5, 7))), 2, 2).shape == (1, 1, 2, 3)

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            maxpool2d(const(np.zeros((1, 1, 2, 2))), 3, 1)

    def test_gradients_overlapping(self):
        rng = np.random.default_rng(1)
        x = leaf(rng.standard_normal((2, 2, 6, 5)))
        r = rng.standard_normal(maxpool2d(x, 3, 1).shape)
        rep = finite_diff_check(lambda: tsum(maxpool2d(x, 3, 1) * const(r)), [x])
        assert rep.max_rel_error < 1e-4


class TestGlobalAvgPool:
    def test_constant(self):
        np.testing.assert_allclose(global_avg_pool(const(np.full((1, 2, 3, 3), 1.5))).data, 1.5)

    def test_hand_mean(self):
        assert global_avg_pool(const([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 2.5

    def test_backward_uniform(self):
        x = leaf(np.random.default_rng(0).standard_normal((1, 1, 2, 3)))
        g = backward(tsum(global_avg_pool(x)))[x]
        np.testing.assert_allclose(g, 1 / 6)
        np.testing.assert_allclose(numeric_grad(lambda: tsum(global_avg_pool(x)), x, 1e-5), g, atol=1e-9)


class TestLinear:
    def test_identity(self):
        x = const([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(linear(x, const(np.eye(3)), const(np.zeros(3))).data, x.data)

    def test_hand_dot(self):
        assert linear(const([[2.0, 3.0]]), const([[1.0, 1.0]]), const([1.0])).data.item() == 6.0

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x, w, b = leaf(rng.standard_normal((4, 3))), leaf(rng.standard_normal((5, 3))), leaf(rng.standard_normal(5))
        r = const(rng.standard_normal((4, 5)))
        rep = finite_diff_check(lambda: tsum(linear(x, w, b) * r), [x, w, b])
        assert rep.max_rel_error < 1e-4

    def test_mismatch(self):
        with pytest.raises(ValueError, match="feature"):
            linear(const(np.ones((1, 2))), const(np.ones((3, 4))), None)


class TestBackward:
    def test_sum(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(backward(tsum(x))[x], np.ones((2, 3)))

    def test_constant_loss(self):
        x = leaf([1.0, 2.0])
        grads = backward(tsum(const([4.0])))
        assert grads.get(x, np.zeros(2)).tolist() == [0.0, 0.0]

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_composed_net(self):
        rng = np.random.default_rng(11)
        x = const(rng.standard_normal((1, 2, 6, 6)))
        w1, b1 = leaf(rng.standard_normal((3, 2, 3, 3))), leaf(rng.standard_normal(3))
        w2, b2 = leaf(rng.standard_normal((2, 3 * 16))), leaf(rng.standard_normal(2))

        def fn():
            h = relu(conv2d(x, w1, b1))
            from crowdadapt.tensor import reshape
            return sse(linear(reshape(h, (1, 48)), w2, b2), np.array([[0.3, -0.2]]))

        assert finite_diff_check(fn, [w1, b1, w2, b2], h=1e-5).max_rel_error < 1e-4

    def test_graph_order(self):
        x = leaf([1.0, 2.0])
        y = relu(x * 2.0)
        loss = tsum(y + x)
        g = Graph.trace(loss)
        for i, ins in enumerate(g.inputs):
            assert all(j < i for j in ins)
        assert g.nodes[g.outputs[0]] is loss
        assert len({id(n) for n in g.nodes}) == len(g.nodes)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = const(rng.standard_normal((1, 1, 5, 5)))
        w = leaf(rng.standard_normal((2, 1, 3, 3)))
        l1 = lambda: tsum(relu(conv2d(x, w, None)))
        l2 = lambda: sse(conv2d(x, w, None), np.zeros((1, 2, 3, 3)))
        a, b = 0.7, -1.3
        g1, g2 = backward(l1(), False)[w], backward(l2(), False)[w]
        gc = backward(l1() * a + l2() * b, False)[w]
        np.testing.assert_allclose(gc, a * g1 + b * g2, atol=1e-12)

    def test_accumulates_into_leaf_grad(self):
        x = leaf([1.0, 2.0])
        backward(tsum(x))
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_forward_deterministic(self):
        rng = np.random.default_rng(9)
        x, w = rng.standard_normal((1, 2, 9, 9)), rng.standard_normal((3, 2, 3, 3))
        a = conv2d(const(x), const(w), None, padding=1).data
        b = conv2d(const(x), const(w), None, padding=1).data
        assert a.tobytes() == b.tobytes()


def test_random_gradcheck_trials():
    """100 randomised trials over every differentiable op, f64, fixed seed."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        op = trial % 5
        if op == 0:
            x, w, b = leaf(rng.standard_normal((1, 2, 5, 5))), leaf(rng.standard_normal((2, 2, 3, 3))), leaf(rng.standard_normal(2))
            r = const(rng.standard_normal((1, 2, 5, 5)))
            fn, ps = (lambda: tsum(conv2d(x, w, b, 1, 2, 2) * r)), [x, w, b]
        elif op == 1:
            x = leaf(rng.standard_normal((1, 2, 4, 4)))
            r = const(rng.standard_normal((1, 2, 4, 4)))
            fn, ps = (lambda: tsum(relu(x) * r)), [x]
        elif op == 2:
            x = leaf(rng.standard_normal((1, 2, 4, 6)))
            r = const(rng.standard_normal((1, 2, 2, 3)))
            fn, ps = (lambda: tsum(maxpool2d(x, 2, 2) * r)), [x]
        elif op == 3:
            x = leaf(rng.standard_normal((2, 3, 3, 2)))
            r = const(rng.standard_normal((2, 3)))
            fn, ps = (lambda: tsum(global_avg_pool(x) * r)), [x]
        else:
            x, w, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((4, 3))), leaf(rng.standard_normal(4))
            fn, ps = (lambda: sse(linear(x, w, b), np.zeros((2, 4)))), [x, w, b]
        worst = max(worst, finite_diff_check(fn, ps).max_rel_error)
    assert worst < 1e-4


class TestFiniteDiffCheck:
    def test_linear_regression(self):
        rng = np.random.default_rng(0)
        X = const(rng.standard_normal((1, 1, 1, 1)))
        A = rng.standard_normal((8, 3))
        y = rng.standard_normal((8, 1))
        w = leaf(rng.standard_normal((1, 3)))
        b = leaf([0.1])
        rep = finite_diff_check(lambda: sse(linear(const(A), w, b), y), [w, b], h=1e-5)
        assert rep.max_rel_error < 1e-6

    def test_zero_function(self):
        w = leaf([1.0, 2.0])
        rep = finite_diff_check(lambda: tsum(w) * 0.0, [w])
        assert rep.params[0].analytic_norm == 0.0
        assert rep.params[0].numeric_norm == 0.0
        assert rep.max_rel_error == 0.0
        assert rep.passed

    def test_rejects_float32(self):
        w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            finite_diff_check(lambda: tsum(w), [w])


class TestClipGlobalNorm:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.3, 0.4])}
        out = clip_global_norm(g, 1.0)
        np.testing.assert_array_equal(out["a"], g["a"])

    def test_scales_to_max(self):
        out = clip_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
        np.testing.assert_allclose(out["a"], [0.6, 0.8], atol=1e-15)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            clip_global_norm({"a": np.ones(2)}, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5),
           st.floats(1e-3, 10.0))
    def test_norm_bound_and_direction(self, a, b, max_norm):
        g = {"a": np.array(a), "b": np.array(b)}
        out = clip_global_norm(g, max_norm)
        assert global_norm(out) <= max_norm + 1e-12
        flat_in = np.concatenate([g["a"], g["b"]])
        flat_out = np.concatenate([out["a"], out["b"]])
        if np.linalg.norm(flat_in) > 0:
            cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
            assert abs(cos - 1.0) <= 1e-12
