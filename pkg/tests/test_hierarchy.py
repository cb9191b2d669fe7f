import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud
from hpsl.cloud import PointCloud
from hpsl.engine import MLP, LayerParams, Tensor, grad_check
from hpsl.hierarchy import (
    Combine,
    ConfigurationError,
    FeaturePropagationSpec,
    MultiResolutionSpec,
    Scale,
    SetAbstractionSpec,
    fp_level_backward,
    fp_level_forward,
    group_and_localize,
    interpolate_features,
    interpolation_weights,
    mrg_level_forward,
    msg_level_forward,
    pointnet_backward,
    pointnet_forward,
    sa_level_forward,
)
from hpsl.neighborhood import KNN, Ball
from oracles import idw


def identity_mlp(width):
    return MLP([LayerParams(Tensor(np.eye(width)))], [False], [0.0])


def randomize_bn(mlp, rng):
    for p in mlp.layers:
        if p.has_bn:
            p.bn_gamma.value[:] = rng.uniform(0.5, 1.5, p.bn_gamma.value.shape)
            p.bn_beta.value[:] = rng.normal(size=p.bn_beta.value.shape)
            p.bn_running_mean[:] = rng.normal(size=p.bn_running_mean.shape)
            p.bn_running_var[:] = rng.uniform(0.5, 2, p.bn_running_var.shape)
    return mlp


def mlp_check(mlps, run, tolerance, **kw):
    """Gradient check of every tensor in ``mlps``; ``run()`` returns (loss)
    after calling the backward pass that fills the tensor grads."""
    tensors = {f"{i}.{j}.{n}": t for i, m in enumerate(mlps) for j, p in enumerate(m.layers) for n, t in p.tensors()}

    def f(_):
        for t in tensors.values():
            t.zero_grad()
        loss = run()
        return loss, {k: t.grad for k, t in tensors.items()}

    return grad_check(f, {k: t.value for k, t in tensors.items()}, tolerance=tolerance, **kw)


class TestSpecs:
    def test_multi_scale_needs_distinct_radii(self):
        with pytest.raises(ConfigurationError):
            SetAbstractionSpec(8, (Scale(0.2, 4, (4,)), Scale(0.2, 8, (4,))), Combine.MULTI_SCALE)

    def test_single_scale_takes_one(self):
        with pytest.raises(ConfigurationError):
            SetAbstractionSpec(8, (Scale(0.2, 4, (4,)), Scale(0.4, 8, (4,))))

    @pytest.mark.parametrize("kw", [{"widths": ()}, {"widths": (4,), "interp_k": 0}, {"widths": (4,), "interp_power": 0.0}])
    def test_fp_validation(self, kw):
        with pytest.raises(ConfigurationError):
            FeaturePropagationSpec(**kw)


class TestGroupAndLocalize:
    def test_localized_member(self):
        cloud = PointCloud(np.array([[1.0, 1.0], [1.5, 1.0], [5.0, 5.0]]))
        g = group_and_localize(cloud, [0], Ball(1.0, 4))
        valid = g.regions[0][g.mask[0]]
        np.testing.assert_array_equal(valid, [[0, 0], [0.5, 0]])

    def test_isolated_centroid(self):
        cloud = PointCloud(np.array([[0.0, 0.0], [3.0, 0.0]]), np.array([[7.0], [8.0]]))
        g = group_and_localize(cloud, [0], Ball(0.5, 4))
        assert g.mask[0].tolist() == [True, False, False, False]
        np.testing.assert_array_equal(g.regions[0, 0], [0, 0, 7])

    def test_empty_ball_falls_back_to_centroid(self):
        cloud = PointCloud(np.array([[0.0, 0.0], [0.0, 0.0]]) + [[0, 0], [1, 0]])
        g = group_and_localize(cloud, [1], Ball(0.1, 2), K=3)
        assert g.mask.tolist() == [[True, False, False]]

    def test_pads_repeat_nearest_member(self):
        cloud = PointCloud(np.array([[0.0, 0.0], [0.3, 0.0], [0.1, 0.0], [5.0, 0.0]]))
        g = group_and_localize(cloud, [0], Ball(1.0, 6))
        assert g.mask[0].sum() == 3
        for row in g.regions[0][~g.mask[0]]:
            np.testing.assert_array_equal(row, g.regions[0, 0])

    def test_reconstruction(self, rng):
        cloud = random_cloud(rng, n=200, d=3, c=2)
        cidx = rng.choice(200, 30, replace=False)
        for spec in (Ball(0.4, 16), KNN(8)):
            g = group_and_localize(cloud, cidx, spec)
            for m in range(30):
                x = g.regions[m, g.mask[m], :3] + g.centroid_coords[m]
                assert np.all(np.abs(x[:, None, :] - cloud.metric_coords[None]).sum(axis=2).min(axis=1) < 1e-12)


class TestPointNet:
    def test_identity_is_elementwise_max(self):
        cloud = PointCloud(np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 0.0]]))
        g = group_and_localize(cloud, [0], Ball(5.0, 4))
        out, _ = pointnet_forward(g, identity_mlp(2))
        np.testing.assert_array_equal(out, [[3, 2]])

    def test_width_mismatch(self, rng):
        g = group_and_localize(random_cloud(rng, 10, 3, 2), [0, 1], KNN(4))
        with pytest.raises(ConfigurationError):
            pointnet_forward(g, MLP.build(3, [4], rng))

    def test_member_permutation_is_exact(self, rng):
        g = group_and_localize(random_cloud(rng, 60, 3, 2), rng.choice(60, 10, replace=False), Ball(0.8, 12))
        mlp = randomize_bn(MLP.build(5, [8, 16], rng), rng)
        a, _ = pointnet_forward(g, mlp)
        perm = rng.permutation(12)
        shuffled = type(g)(g.regions[:, perm], g.mask[:, perm], g.centroid_indices, g.centroid_coords)
        b, _ = pointnet_forward(shuffled, mlp)
        np.testing.assert_array_equal(a, b)

    def test_padding_never_read(self, rng):
        g = group_and_localize(random_cloud(rng, 40, 3, 1), np.arange(8), Ball(0.5, 16))
        assert not g.mask.all()
        mlp = randomize_bn(MLP.build(4, [8, 8], rng), rng)
        a, _ = pointnet_forward(g, mlp)
        poisoned = g.regions.copy()
        poisoned[~g.mask] = np.nan
        b, _ = pointnet_forward(type(g)(poisoned, g.mask, g.centroid_indices, g.centroid_coords), mlp)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("train", [False, True])
    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed, train):
        rng = np.random.default_rng(seed)
        g = group_and_localize(random_cloud(rng, 40, 3, 2), rng.choice(40, 6, replace=False), Ball(0.7, 8))
        mlp = randomize_bn(MLP.build(5, [6, 5], rng), rng)
        up = rng.normal(size=(6, 5))
        feats = {"f": g.regions[..., 3:].copy()}

        def run():
            regions = np.concatenate([g.regions[..., :3], feats["f"]], axis=2)
            out, cache = pointnet_forward(type(g)(regions, g.mask, g.centroid_indices, g.centroid_coords), mlp, train)
            feats["grad"] = pointnet_backward(up, cache)
            return float((out * up).sum())

        # batch statistics make some gradients exactly zero; their central
        # differences are pure roundoff (about 1e-11), hence the larger floor
        floor = 1e-4 if train else 1e-6
        assert mlp_check([mlp], run, 1e-6, floor=floor).max_rel_error < 1e-6
        run()
        dfeat = feats["grad"]

        def f(p):
            loss = run()
            return loss, {"f": feats["grad"]}

        assert grad_check(f, {"f": feats["f"]}, tolerance=1e-6).max_rel_error < 1e-6
        np.testing.assert_array_equal(dfeat[~g.mask], 0.0)


class TestSetAbstraction:
    def test_single_point(self, rng):
        cloud = PointCloud(np.array([[0.3, 0.4, 0.5]]), np.array([[2.0]]))
        mlp = randomize_bn(MLP.build(4, [5], rng), rng)
        out = sa_level_forward(cloud, SetAbstractionSpec(1, (Scale(0.2, 8, (5,)),)), [mlp])
        expect, _ = mlp.forward(np.array([[0, 0, 0, 2.0]]), False)
        np.testing.assert_array_equal(out.features, expect)
        np.testing.assert_array_equal(out.metric_coords, cloud.metric_coords)

    def test_classic_shape(self, rng):
        cloud = random_cloud(rng, 1024, 3)
        spec = SetAbstractionSpec(512, (Scale(0.2, 32, (64, 64, 128)),))
        out = sa_level_forward(cloud, spec, [MLP.build(3, [64, 64, 128], rng)])
        assert (out.n, out.d, out.c) == (512, 3, 128)

    def test_too_many_centroids(self, rng):
        with pytest.raises(ConfigurationError):
            sa_level_forward(random_cloud(rng, 4), SetAbstractionSpec(5, (Scale(0.2, 4, (3,)),)), [MLP.build(3, [3], rng)])

    def test_dyadic_translation_is_exact(self, rng):
        x = rng.integers(-512, 512, (120, 3)) / 1024.0
        cloud = PointCloud(x, rng.integers(-8, 8, (120, 2)) / 8.0)
        spec = SetAbstractionSpec(24, (Scale(0.3, 16, (8, 8)),))
        mlp = randomize_bn(MLP.build(5, [8, 8], rng), rng)
        a = sa_level_forward(cloud, spec, [mlp])
        t = np.array([3.0, -7.0, 12.0])
        b = sa_level_forward(PointCloud(x + t, cloud.features), spec, [mlp])
        np.testing.assert_array_equal(b.metric_coords, a.metric_coords + t)
        np.testing.assert_array_equal(b.features, a.features)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-100, 100), st.floats(-100, 100))
    def test_translation_equivariance(self, seed, tx, ty):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 60, 2, 1)
        spec = SetAbstractionSpec(12, (Scale(0.5, 8, (6,)),))
        mlp = randomize_bn(MLP.build(3, [6], rng), rng)
        a = sa_level_forward(cloud, spec, [mlp])
        b = sa_level_forward(PointCloud(cloud.metric_coords + [tx, ty], cloud.features), spec, [mlp])
        np.testing.assert_allclose(b.metric_coords - [tx, ty], a.metric_coords, atol=1e-12)
        np.testing.assert_allclose(b.features, a.features, atol=1e-9)


class TestMultiScale:
    def test_classic_width(self, rng):
        cloud = random_cloud(rng, 1024, 3)
        widths = [(32, 32, 64), (64, 64, 128), (64, 96, 128)]
        spec = SetAbstractionSpec(512, tuple(Scale(r, 16, w) for r, w in zip((0.1, 0.2, 0.4), widths)), Combine.MULTI_SCALE)
        out = msg_level_forward(cloud, spec, [MLP.build(3, list(w), rng) for w in widths])
        assert (out.n, out.c) == (512, 320)

    def test_equals_concatenated_single_scales(self, rng):
        cloud = random_cloud(rng, 150, 3, 2)
        scales = (Scale(0.2, 8, (6, 8)), Scale(0.5, 16, (6, 4)))
        mlps = [randomize_bn(MLP.build(5, list(s.widths), rng), rng) for s in scales]
        msg = msg_level_forward(cloud, SetAbstractionSpec(30, scales, Combine.MULTI_SCALE), mlps, start=7)
        parts = [sa_level_forward(cloud, SetAbstractionSpec(30, (s,)), [m], start=7).features for s, m in zip(scales, mlps)]
        np.testing.assert_array_equal(msg.features, np.hstack(parts))

    def test_identical_scales_give_equal_halves(self, rng):
        cloud = random_cloud(rng, 80, 3)
        mlp = randomize_bn(MLP.build(3, [5], rng), rng)
        spec = SetAbstractionSpec(10, (Scale(0.4, 64, (5,)), Scale(0.40000001, 64, (5,))), Combine.MULTI_SCALE)
        d = np.linalg.norm(cloud.metric_coords[:, None] - cloud.metric_coords[None], axis=2)
        assert not np.any((d > 0.4) & (d <= 0.40000001))
        out = msg_level_forward(cloud, spec, [mlp, mlp])
        np.testing.assert_array_equal(out.features[:, :5], out.features[:, 5:])

    def test_declaration_order_permutes_blocks(self, rng):
        cloud = random_cloud(rng, 90, 3)
        s1, s2 = Scale(0.3, 8, (4,)), Scale(0.6, 16, (6,))
        m1, m2 = randomize_bn(MLP.build(3, [4], rng), rng), randomize_bn(MLP.build(3, [6], rng), rng)
        a = msg_level_forward(cloud, SetAbstractionSpec(12, (s1, s2), Combine.MULTI_SCALE), [m1, m2]).features
        b = msg_level_forward(cloud, SetAbstractionSpec(12, (s2, s1), Combine.MULTI_SCALE), [m2, m1]).features
        np.testing.assert_array_equal(a, np.hstack([b[:, 6:], b[:, :6]]))

    def test_rejects_single_scale_spec(self, rng):
        with pytest.raises(ConfigurationError):
            msg_level_forward(random_cloud(rng), SetAbstractionSpec(4, (Scale(0.3, 4, (3,)),)), [MLP.build(3, [3], rng)])


class TestMultiResolution:
    def spec(self):
        return MultiResolutionSpec(4, Scale(0.5, 8, (6,)), Scale(0.5, 16, (5,)))

    def test_singletons(self, rng):
        lower = PointCloud(np.array([[0.0, 0.0]]), np.array([[1.0, 2.0]]))
        raw = PointCloud(np.array([[0.1, 0.0]]), np.array([[3.0]]))
        ma, mb = randomize_bn(MLP.build(4, [3], rng), rng), randomize_bn(MLP.build(3, [2], rng), rng)
        out = mrg_level_forward(lower, raw, MultiResolutionSpec(1, Scale(0.5, 4, (3,)), Scale(0.5, 4, (2,))), (ma, mb))
        ha, _ = ma.forward(np.array([[0, 0, 1.0, 2.0]]), False)
        hb, _ = mb.forward(np.array([[0.1, 0, 3.0]]), False)
        np.testing.assert_array_equal(out.features, np.hstack([ha, hb]))

    def test_zeroed_branch_b(self, rng):
        raw = random_cloud(rng, 100, 3, 1)
        lower = random_cloud(rng, 20, 3, 4)
        ma, mb = randomize_bn(MLP.build(7, [6], rng), rng), randomize_bn(MLP.build(4, [5], rng), rng)
        before = mrg_level_forward(lower, raw, self.spec(), (ma, mb))
        for p in mb.layers:
            for _, t in p.tensors():
                t.value[:] = 0
        after = mrg_level_forward(lower, raw, self.spec(), (ma, mb))
        np.testing.assert_array_equal(after.features[:, 6:], 0.0)
        np.testing.assert_array_equal(after.features[:, :6], before.features[:, :6])
        assert after.c == 11


class TestInterpolation:
    def test_hand_example(self):
        out = interpolate_features([[0.0]], [[1.0], [-2.0]], [0.0, 3.0], k=2, power=2)
        assert out[0, 0] == pytest.approx(0.6, abs=1e-15)

    def test_exact_hit(self, rng):
        src = rng.normal(size=(10, 3))
        feats = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(interpolate_features(src[[3, 7]], src, feats), feats[[3, 7]])

    @pytest.mark.parametrize("p", [0.5, 1.0, 2.0, 3.7])
    def test_equidistant_mean(self, p):
        out = interpolate_features([[0.0, 0.0]], [[1.0, 0.0], [0.0, -1.0]], [[2.0], [5.0]], k=2, power=p)
        assert out[0, 0] == 3.5

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            interpolate_features([[0.0]], [[1.0]], [1.0], k=2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.floats(0.5, 4))
    def test_matches_loop_oracle(self, seed, k, p):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(12, 3))
        feats = rng.normal(size=(12, 2))
        tgt = rng.normal(size=(5, 3))
        out = interpolate_features(tgt, src, feats, k, p)
        for t, row in zip(tgt, out):
            np.testing.assert_allclose(row, idw(t, src, feats, k, p), rtol=1e-10, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
    def test_weights_sum_to_one_and_constants_exact(self, seed, value):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(20, 3))
        tgt = np.vstack([rng.normal(size=(30, 3)), src[:3]])
        _, coef = interpolation_weights(tgt, src)
        np.testing.assert_allclose(coef.sum(axis=1), 1.0, atol=1e-12)
        out = interpolate_features(tgt, src, np.full((20, 2), value))
        np.testing.assert_array_equal(out, value)


class TestFeaturePropagation:
    def test_identity_on_coincident_coords(self, rng):
        coarse = random_cloud(rng, 15, 3, 4)
        out, _ = fp_level_forward(coarse, coarse.metric_coords, None, FeaturePropagationSpec((4,)), identity_mlp(4))
        np.testing.assert_array_equal(out, coarse.features)

    def test_skip_columns_follow(self, rng):
        coarse = random_cloud(rng, 10, 3, 2)
        fine = rng.uniform(-1, 1, (25, 3))
        skip = rng.normal(size=(25, 3))
        out, _ = fp_level_forward(coarse, fine, skip, FeaturePropagationSpec((5,)), identity_mlp(5))
        np.testing.assert_array_equal(out[:, :2], interpolate_features(fine, coarse.metric_coords, coarse.features))
        np.testing.assert_array_equal(out[:, 2:], skip)

    def test_width_mismatch(self, rng):
        coarse = random_cloud(rng, 10, 3, 2)
        with pytest.raises(ConfigurationError):
            fp_level_forward(coarse, coarse.metric_coords, None, FeaturePropagationSpec((4,)), MLP.build(3, [4], rng))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        coarse_x = rng.uniform(-1, 1, (8, 3))
        state = {"c": rng.normal(size=(8, 3)), "s": rng.normal(size=(20, 2))}
        fine = rng.uniform(-1, 1, (20, 3))
        mlp = randomize_bn(MLP.build(5, [6, 4], rng), rng)
        up = rng.normal(size=(20, 4))

        def run():
            out, cache = fp_level_forward(PointCloud(coarse_x, state["c"]), fine, state["s"], FeaturePropagationSpec((6, 4)), mlp)
            state["dc"], state["ds"] = fp_level_backward(up, mlp, cache)
            return float((out * up).sum())

        assert mlp_check([mlp], run, 1e-6).max_rel_error < 1e-6

        def f(_):
            loss = run()
            return loss, {"c": state["dc"], "s": state["ds"]}

        assert grad_check(f, {"c": state["c"], "s": state["s"]}, tolerance=1e-6).max_rel_error < 1e-6
