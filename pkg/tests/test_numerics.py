"""Primitive-op contracts: forward oracles and finite-difference gradients."""

import math

import numpy as np
import pytest

from anet import numerics as nm
from anet.numerics import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    """Quadruple-loop cross-correlation reference, single image."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 5, 5))
        w = np.eye(4).reshape(4, 4, 1, 1)
        out = nm.conv2d(t64(x, grad=False), t64(w, grad=False))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 6, 6))
        w = np.zeros((2, 3, 3, 3))
        out = nm.conv2d(t64(x, grad=False), t64(w, grad=False), padding=1)
        assert np.all(out.data == 0.0)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        expected = conv2d_naive(x, w, b, stride=1, padding=1)
        out = nm.conv2d(t64(x, grad=False), t64(w, grad=False), t64(b, grad=False), padding=1)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_strided_matches_naive(self, stride, padding):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 7, 7))
        w = rng.standard_normal((2, 3, 3, 3))
        expected = conv2d_naive(x, w, stride=stride, padding=padding)
        out = nm.conv2d(t64(x, grad=False), t64(w, grad=False), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        x = t64(np.zeros((3, 4, 4)), grad=False)
        w = t64(np.zeros((2, 5, 3, 3)), grad=False)
        with pytest.raises(nm.ShapeError, match=r"3, 4, 4.*2, 5, 3, 3"):
            nm.conv2d(x, w)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        inputs = {
            "x": t64(rng.standard_normal((2, 3, 5, 5))),
            "w": t64(rng.standard_normal((4, 3, 3, 3))),
            "b": t64(rng.standard_normal(4)),
        }
        rep = nm.grad_check(lambda x, w, b: nm.conv2d(x, w, b, stride=2, padding=1), inputs)
        assert rep.ok(1e-6), rep


class TestNormalize:
    def test_constant_input_batch_train_gives_shift(self):
        x = t64(np.full((2, 3, 4, 4), 7.0), grad=False)
        gamma = t64(np.ones(3), grad=False)
        beta = t64(np.array([0.5, -1.0, 2.0]), grad=False)
        out = nm.batch_norm(x, gamma, beta, nm.NormStats.init(3, np.float64), train=True)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data[None, :, None, None], x.shape), atol=1e-12)

    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 2, 6, 6))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = nm.batch_norm(t64(x, grad=False), t64(np.ones(2), grad=False),
                            t64(np.zeros(2), grad=False), nm.NormStats.init(2, np.float64), train=True)
        np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-5)

    def test_instance_moments(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 4, 8, 8))
        out = nm.instance_norm(t64(x, grad=False), t64(np.ones(4), grad=False),
                               t64(np.zeros(4), grad=False))
        mean = out.data.mean(axis=(2, 3))
        var = out.data.var(axis=(2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-6)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_ibn_split_halves(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 6, 5, 5))
        stats = nm.NormStats.init(3, np.float64)
        out = nm.ibn_split(t64(x, grad=False),
                           t64(np.ones(3), grad=False), t64(np.zeros(3), grad=False),
                           t64(np.ones(3), grad=False), t64(np.zeros(3), grad=False),
                           stats, train=True)
        first = nm.instance_norm(t64(x[:, :3], grad=False), t64(np.ones(3), grad=False),
                                 t64(np.zeros(3), grad=False))
        np.testing.assert_allclose(out.data[:, :3], first.data, atol=1e-12)
        # second half is zero-mean over (N,H,W) after batch norm
        np.testing.assert_allclose(out.data[:, 3:].mean(axis=(0, 2, 3)), 0.0, atol=1e-6)

    def test_ibn_split_rejects_odd_channels(self):
        x = t64(np.zeros((2, 5, 4, 4)), grad=False)
        with pytest.raises(nm.ShapeError):
            nm.ibn_split(x, None, None, None, None, nm.NormStats.init(2, np.float64), train=True)

    def test_running_stats_update_only_in_train(self):
        rng = np.random.default_rng(8)
        x = t64(rng.standard_normal((4, 2, 3, 3)) + 5.0, grad=False)
        gamma = t64(np.ones(2), grad=False)
        beta = t64(np.zeros(2), grad=False)
        stats = nm.NormStats.init(2, np.float64)
        nm.batch_norm(x, gamma, beta, stats, train=False)
        np.testing.assert_array_equal(stats.mean, 0.0)
        nm.batch_norm(x, gamma, beta, stats, train=True)
        assert np.all(stats.mean > 0.0)

    @pytest.mark.parametrize("mode", ["batch", "instance", "ibn-split"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(9)
        x = t64(rng.standard_normal((4, 4, 3, 3)))
        if mode == "ibn-split":
            params = {
                "gamma_in": t64(rng.standard_normal(2) + 1.0),
                "beta_in": t64(rng.standard_normal(2)),
                "gamma_bn": t64(rng.standard_normal(2) + 1.0),
                "beta_bn": t64(rng.standard_normal(2)),
            }
            stats = nm.NormStats.init(2, np.float64)
        else:
            params = {
                "gamma": t64(rng.standard_normal(4) + 1.0),
                "beta": t64(rng.standard_normal(4)),
            }
            stats = nm.NormStats.init(4, np.float64)
        rep = nm.grad_check(
            lambda x, **p: nm.normalize(x, mode, p, stats, train=True),
            {"x": x, **params})
        assert rep.ok(1e-6), rep


class TestPointwise:
    def test_softplus_at_zero(self):
        out = nm.softplus(t64(np.array([0.0]), grad=False))
        assert abs(out.data[0] - math.log(2.0)) < 1e-12

    def test_softplus_stable_at_extremes(self):
        out = nm.softplus(t64(np.array([-1000.0, 1000.0]), grad=False))
        assert out.data[0] == 0.0
        assert abs(out.data[1] - 1000.0) < 1e-9
        assert np.all(np.isfinite(out.data))

    def test_softplus_derivative_at_zero(self):
        x = t64(np.array([0.0]))
        rep = nm.grad_check(lambda x: nm.softplus(x), {"x": x}, h=1e-5)
        assert rep.max_rel_err < 1e-8

    def test_sigmoid_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(-36, 36, size=5000)
        out = nm.sigmoid(t64(x, grad=False))
        assert np.all(out.data > 0.0)
        assert np.all(out.data < 1.0)

    def test_sigmoid_finite_at_extremes(self):
        out = nm.sigmoid(t64(np.array([-1e4, 1e4]), grad=False))
        assert np.all(np.isfinite(out.data))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((40, 7)) * 30
        out = nm.softmax(t64(x, grad=False))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_gap_constant_map(self):
        x = np.full((2, 3, 5, 5), 4.25)
        out = nm.gap(t64(x, grad=False))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 4.25))

    def test_linear_matches_pooled_matmul_loop(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 6))
        w = rng.standard_normal((4, 6))
        b = rng.standard_normal(4)
        expected = np.empty((3, 4))
        for i in range(3):
            for o in range(4):
                expected[i, o] = sum(w[o, j] * x[i, j] for j in range(6)) + b[o]
        out = nm.linear(t64(x, grad=False), t64(w, grad=False), t64(b, grad=False))
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    @pytest.mark.parametrize("op", ["relu", "sigmoid", "softplus", "softmax", "gap", "l2norm"])
    def test_gradients(self, op):
        rng = np.random.default_rng(13)
        if op == "gap":
            x = t64(rng.standard_normal((2, 3, 4, 4)))
        else:
            x = t64(rng.standard_normal((4, 6)) + 0.1)  # keep clear of relu kink
        fn = getattr(nm, op)
        rep = nm.grad_check(lambda x: fn(x), {"x": x})
        assert rep.ok(1e-6), rep

    def test_linear_gradients(self):
        rng = np.random.default_rng(14)
        inputs = {
            "x": t64(rng.standard_normal((5, 3))),
            "w": t64(rng.standard_normal((4, 3))),
            "b": t64(rng.standard_normal(4)),
        }
        rep = nm.grad_check(lambda x, w, b: nm.linear(x, w, b), inputs)
        assert rep.ok(1e-6), rep

    def test_add_mul_concat_gradients(self):
        rng = np.random.default_rng(15)
        a = t64(rng.standard_normal((3, 4)))
        b = t64(rng.standard_normal((3, 4)))
        rep = nm.grad_check(lambda a, b: nm.mul(nm.add(a, b), b), {"a": a, "b": b})
        assert rep.ok(1e-6), rep
        rep = nm.grad_check(lambda a, b: nm.concat([a, b], axis=1), {"a": a, "b": b})
        assert rep.ok(1e-6), rep

    def test_broadcast_add_gradients(self):
        rng = np.random.default_rng(16)
        a = t64(rng.standard_normal((3, 4)))
        b = t64(rng.standard_normal((1, 4)))
        rep = nm.grad_check(lambda a, b: nm.mul(nm.add(a, b), 2.0), {"a": a, "b": b})
        assert rep.ok(1e-6), rep


class TestPairwiseSqDist:
    def test_matches_per_pair_loop(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((3, 5))
        out = nm.pairwise_sq_dist(t64(x, grad=False))
        for i in range(3):
            for j in range(3):
                expected = float(((x[i] - x[j]) ** 2).sum())
                assert abs(out.data[i, j] - expected) < 1e-6

    def test_symmetric_nonneg_small_diagonal(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((10, 8)) * 100
        out = nm.pairwise_sq_dist(t64(x, grad=False)).data
        np.testing.assert_allclose(out, out.T, atol=0)
        assert np.all(out >= 0.0)
        assert np.all(np.diagonal(out) <= 1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(19)
        x = t64(rng.standard_normal((4, 3)))
        rep = nm.grad_check(lambda x: nm.pairwise_sq_dist(x), {"x": x})
        assert rep.ok(1e-6), rep


class TestL2Norm:
    def test_unit_rows(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((6, 5))
        out = nm.l2norm(t64(x, grad=False))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)


class TestDeterminism:
    def test_ops_bitwise_deterministic(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((2, 4, 6, 6))
        w = rng.standard_normal((4, 4, 3, 3))
        a = nm.conv2d(t64(x, grad=False), t64(w, grad=False), padding=1).data
        b = nm.conv2d(t64(x, grad=False), t64(w, grad=False), padding=1).data
        np.testing.assert_array_equal(a, b)

    def test_no_nan_inf_from_primitives(self):
        rng = np.random.default_rng(22)
        x = t64(rng.standard_normal((4, 8)) * 50, grad=False)
        for fn in (nm.relu, nm.sigmoid, nm.softplus, nm.softmax, nm.l2norm):
            assert np.all(np.isfinite(fn(x).data))


class TestGradCheckHarness:
    def test_rejects_float32(self):
        x = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="float64"):
            nm.grad_check(lambda x: nm.relu(x), {"x": x})

    def test_reports_offending_index_on_broken_gradient(self):
        def broken(x):
            out = nm.relu(x)
            # sabotage: extra node whose backward corrupts one element
            def backward(g):
                bad = g.copy()
                bad[0, 1] += 1.0
                x._accumulate(bad * (x.data > 0.0))
            return nm.Tensor(out.data, parents=(x,), backward=backward)

        x = t64(np.ones((2, 3)))
        rep = nm.grad_check(broken, {"x": x})
        assert not rep.ok(1e-6)
        assert rep.worst_index == (0, 1)
