import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpsl.engine import (
    MLP,
    AdamState,
    LayerParams,
    Tensor,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    dropout,
    grad_check,
    init_layer,
    linear_backward,
    linear_forward,
    masked_set_max,
    masked_set_max_backward,
    relu,
    rng_stream,
    softmax_cross_entropy,
)


def bn_params(n, rng):
    p = init_layer(3, n, rng, bn=True)
    p.bn_gamma.value[:] = rng.uniform(0.5, 1.5, n)
    p.bn_beta.value[:] = rng.normal(size=n)
    return p


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 3))
        y, _ = linear_forward(x, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(y, x)

    def test_scalar_chain_rule(self):
        y, x = linear_forward(np.array([[3.0]]), np.array([[2.0]]), np.array([1.0]))
        assert y[0, 0] == 7.0
        _, dw, db = linear_backward(np.array([[1.0]]), x, np.array([[2.0]]))
        assert dw[0, 0] == 3.0 and db[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            linear_forward(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_stable_mode_is_row_permutation_exact(self, rng):
        x = rng.normal(size=(257, 31))
        w = rng.normal(size=(17, 31))
        perm = rng.permutation(257)
        a, _ = linear_forward(x, w, stable=True)
        b, _ = linear_forward(x[perm], w, stable=True)
        np.testing.assert_array_equal(a[perm], b)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 4))
        params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=3), "x": x}
        up = rng.normal(size=(5, 3))

        def f(p):
            y, _ = linear_forward(p["x"], p["w"], p["b"])
            dx, dw, db = linear_backward(up, p["x"], p["w"])
            return float((y * up).sum()), {"w": dw, "b": db, "x": dx}

        assert grad_check(f, params).max_rel_error < 1e-7


class TestBatchNorm:
    def test_constant_column_gives_beta(self, rng):
        p = bn_params(2, rng)
        x = np.column_stack([np.full(6, 3.7), rng.normal(size=6)])
        y, _ = batchnorm_forward(x, p, train=True)
        np.testing.assert_array_equal(y[:, 0], p.bn_beta.value[0])

    def test_standardizes(self):
        rng = np.random.default_rng(0)
        p = init_layer(1, 3, rng, bn=True)
        y, _ = batchnorm_forward(rng.normal(size=(1024, 3)), p, train=True)
        assert np.all(np.abs(y.mean(axis=0)) < 0.05)
        assert np.all(np.abs(y.var(axis=0) - 1) < 0.1)

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ValueError):
            batchnorm_forward(np.zeros((1, 3)), bn_params(3, rng), train=True)

    def test_running_stats(self, rng):
        p = bn_params(2, rng)
        x = rng.normal(size=(8, 2)) * 2 + 1
        batchnorm_forward(x, p, train=True)
        np.testing.assert_allclose(p.bn_running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(p.bn_running_var, 0.9 + 0.1 * x.var(axis=0))

    def test_eval_uses_running_stats(self, rng):
        p = bn_params(2, rng)
        p.bn_running_mean[:] = [1.0, -1.0]
        p.bn_running_var[:] = [4.0, 0.25]
        x = rng.normal(size=(3, 2))
        y, _ = batchnorm_forward(x, p, train=False)
        expect = p.bn_gamma.value * (x - [1, -1]) / np.sqrt(np.array([4.0, 0.25]) + 1e-5) + p.bn_beta.value
        np.testing.assert_allclose(y, expect, rtol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.booleans())
    def test_gradients(self, seed, train):
        rng = np.random.default_rng(seed)
        p = bn_params(3, rng)
        p.bn_running_var[:] = rng.uniform(0.5, 2, 3)
        x = rng.normal(size=(6, 3))
        up = rng.normal(size=(6, 3))
        params = {"x": x, "gamma": p.bn_gamma.value, "beta": p.bn_beta.value}

        def f(_):
            mean, var = p.bn_running_mean.copy(), p.bn_running_var.copy()
            y, cache = batchnorm_forward(params["x"], p, train)
            p.bn_running_mean[:], p.bn_running_var[:] = mean, var
            dx, dg, db = batchnorm_backward(up, cache, p.bn_gamma.value)
            return float((y * up).sum()), {"x": dx, "gamma": dg, "beta": db}

        assert grad_check(f, params).max_rel_error < 1e-5


class TestPointwise:
    def test_relu(self):
        y, pos = relu(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y, [0, 0, 2])
        np.testing.assert_array_equal(pos, [False, False, True])

    def test_dropout_identity(self, rng):
        x = rng.normal(size=(5, 5))
        assert dropout(x, 0.0, True, rng)[0] is x
        assert dropout(x, 0.7, False, rng)[0] is x

    def test_dropout_survivor_fraction(self):
        rate, n = 0.3, 100_000
        y, scale = dropout(np.ones(n), rate, True, np.random.default_rng(5))
        frac = np.mean(y > 0)
        assert abs(frac - (1 - rate)) < 3 * np.sqrt(rate * (1 - rate) / n)
        np.testing.assert_allclose(y[y > 0], 1 / (1 - rate))


class TestMaskedSetMax:
    def test_masked_nan_excluded(self):
        values = np.array([[[5.0], [7.0], [np.nan]]])
        out, arg = masked_set_max(values, np.array([[True, True, False]]))
        assert out[0, 0] == 7.0
        g = masked_set_max_backward(np.ones((1, 1)), arg, 3)
        np.testing.assert_array_equal(g[0, :, 0], [0, 1, 0])

    def test_ties_lowest_index(self):
        _, arg = masked_set_max(np.array([[[2.0], [2.0]]]), np.ones((1, 2), bool))
        assert arg[0, 0] == 0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            masked_set_max(np.zeros((1, 2, 1)), np.zeros((1, 2), bool))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(3, 4, 2))
        mask = rng.random((3, 4)) < 0.7
        mask[:, 0] = True
        up = rng.normal(size=(3, 2))

        def f(p):
            out, arg = masked_set_max(p["v"], mask)
            return float((out * up).sum()), {"v": masked_set_max_backward(up, arg, 4)}

        assert grad_check(f, {"v": v}).max_rel_error < 1e-8


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros(5), 2)
        assert loss == pytest.approx(np.log(5), rel=1e-14)

    def test_large_gap_is_stable(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
        assert 0 <= loss < 1e-12 and np.all(np.isfinite(grad))

    def test_monotone_in_gap(self):
        losses = [softmax_cross_entropy(np.array([g, 0.0, 0.0]), 0)[0] for g in range(0, 30, 3)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    @pytest.mark.parametrize("label", [-1, 3, 1.5])
    def test_invalid_label(self, label):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(3), label)

    @pytest.mark.parametrize("seed", range(50))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, 4)

        def f(p):
            return softmax_cross_entropy(p["z"], y)[0], {"z": softmax_cross_entropy(p["z"], y)[1]}

        assert grad_check(f, {"z": z}, step=1e-4, tolerance=1e-8).max_rel_error < 1e-8


class TestAdam:
    def test_first_step_is_lr_sign(self, rng):
        w = rng.normal(size=6)
        g = rng.normal(size=6)
        before = w.copy()
        adam_step({"w": w}, {"w": g}, AdamState())
        np.testing.assert_allclose(w - before, -0.001 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_keeps_params(self, rng):
        w = rng.normal(size=4)
        before = w.copy()
        s = AdamState()
        for _ in range(50):
            adam_step({"w": w}, {"w": np.zeros(4)}, s)
        np.testing.assert_array_equal(w, before)

    def test_quadratic_bowl(self):
        w = np.array([1.0, 1.0])
        s = AdamState(lr=0.001)
        for _ in range(5000):
            adam_step({"w": w}, {"w": 2 * w}, s)
        assert np.linalg.norm(w) < 1e-3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_gradient_scale_invariance(self, seed, c):
        g = np.random.default_rng(seed).normal(size=5)
        g[np.abs(g) < 1e-2] = 0.5
        a, b = np.zeros(5), np.zeros(5)
        adam_step({"w": a}, {"w": g}, AdamState())
        adam_step({"w": b}, {"w": c * g}, AdamState())
        np.testing.assert_array_equal(np.sign(a), np.sign(b))
        np.testing.assert_allclose(a, b, rtol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


class TestGradCheck:
    def test_corrupted_backward_is_caught(self, rng):
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(2, 3))

        def f(p):
            y, _ = linear_forward(x, p["w"])
            _, dw, _ = linear_backward(np.ones_like(y), x, p["w"])
            return float(y.sum()), {"w": dw * 1.1}

        assert grad_check(f, {"w": w}).max_rel_error > 1e-2

    def test_reports_coordinate(self, rng):
        def f(p):
            g = 2 * p["v"]
            g[1] += 1.0
            return float((p["v"] ** 2).sum()), {"v": g}

        r = grad_check(f, {"v": rng.normal(size=3)})
        assert r.worst_param == "v" and r.worst_index == (1,)


class TestMLP:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        mlp = MLP.build(3, [5, 4, 2], rng, final_linear=True, dropouts=[0.3, 0.0, 0.0])
        x = rng.normal(size=(7, 3))
        up = rng.normal(size=(7, 2))
        params = {f"{j}.{n}": t.value for j, p in enumerate(mlp.layers) for n, t in p.tensors()}
        tensors = {f"{j}.{n}": t for j, p in enumerate(mlp.layers) for n, t in p.tensors()}

        def f(_):
            for t in tensors.values():
                t.zero_grad()
            y, caches = mlp.forward(x, True, rng_stream(seed, 1))
            mlp.backward(up, caches)
            return float((y * up).sum()), {k: t.grad for k, t in tensors.items()}

        assert grad_check(f, params).max_rel_error < 1e-5

    def test_eval_is_deterministic(self, rng):
        mlp = MLP.build(3, [8, 8], rng)
        x = rng.normal(size=(10, 3))
        a, _ = mlp.forward(x, False)
        b, _ = mlp.forward(x, False)
        np.testing.assert_array_equal(a, b)


class TestRngStream:
    def test_replayable(self):
        assert rng_stream(3, 1, 2).random() == rng_stream(3, 1, 2).random()

    def test_streams_differ(self):
        assert rng_stream(3, 1, 2).random() != rng_stream(3, 2, 1).random()

    def test_tensor_grad_accumulates(self):
        t = Tensor(np.zeros(2))
        t.accumulate(np.ones(2))
        t.accumulate(np.ones(2))
        np.testing.assert_array_equal(t.grad, [2, 2])
        assert isinstance(LayerParams(t).has_bn, bool)
