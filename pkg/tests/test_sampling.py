import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpsl.cloud import PointCloud
from hpsl.sampling import covering_radius, farthest_point_sample, fps_covering_radius
from oracles import fps_rescan


class TestFarthestPointSample:
    def test_endpoint_is_farthest(self):
        r = farthest_point_sample(np.array([[0, 0], [1, 0], [0.5, 0]]), 2, 0)
        np.testing.assert_array_equal(r.indices, [0, 1])

    def test_exhaustion_is_permutation(self, rng):
        x = rng.normal(size=(17, 3))
        r = farthest_point_sample(PointCloud(x), 17, 5)
        assert r.indices[0] == 5
        assert sorted(r.indices.tolist()) == list(range(17))
        np.testing.assert_array_equal(r.min_dists, 0.0)

    def test_matches_rescan_oracle(self, rng):
        x = rng.normal(size=(64, 3))
        r = farthest_point_sample(x, 16, 0)
        assert r.indices.tolist() == fps_rescan(x, 16, 0)

    def test_ties_go_to_lowest_index(self):
        x = np.array([[0.0], [1.0], [-1.0]])
        assert farthest_point_sample(x, 2, 0).indices.tolist() == [0, 1]

    def test_duplicates_never_reselected(self):
        x = np.zeros((5, 2))
        r = farthest_point_sample(x, 5, 2)
        assert sorted(r.indices.tolist()) == list(range(5))

    def test_min_dists(self, rng):
        x = rng.normal(size=(30, 2))
        r = farthest_point_sample(x, 6, 3)
        d = np.linalg.norm(x[:, None] - x[r.indices][None], axis=2).min(axis=1)
        np.testing.assert_allclose(r.min_dists, d, rtol=1e-12, atol=1e-15)
        assert np.all(r.min_dists[r.indices] == 0)

    @pytest.mark.parametrize("m,start", [(0, 0), (5, 0), (2, 4), (2, -1)])
    def test_argument_errors(self, m, start):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((4, 2)), m, start)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 10_000))
    def test_prefix_property_and_monotone_coverage(self, n, seed):
        x = np.random.default_rng(seed).normal(size=(n, 3))
        start = seed % n
        full = farthest_point_sample(x, n, start)
        radii = []
        for m in range(1, n + 1):
            r = farthest_point_sample(x, m, start)
            assert r.indices.tolist() == full.indices[:m].tolist()
            radii.append(fps_covering_radius(r))
        assert all(b <= a for a, b in zip(radii, radii[1:]))


class TestCoverage:
    def test_full_selection_covers(self, rng):
        r = farthest_point_sample(rng.normal(size=(10, 3)), 10)
        assert fps_covering_radius(r) == 0.0

    def test_unit_segment(self):
        r = farthest_point_sample(np.array([[0.0], [0.5], [1.0]]), 2, 0)
        assert fps_covering_radius(r) == 0.5

    def test_two_approximation_against_random_subsets(self, rng):
        for _ in range(10):
            x = rng.uniform(size=(60, 2))
            fps = fps_covering_radius(farthest_point_sample(x, 8))
            best_random = min(covering_radius(x, rng.choice(60, 8, replace=False)) for _ in range(200))
            assert fps <= 2 * best_random

    def test_mean_coverage_beats_random(self):
        rng = np.random.default_rng(7)
        fps, rand = [], []
        for _ in range(100):
            x = rng.uniform(size=(100, 3))
            fps.append(fps_covering_radius(farthest_point_sample(x, 10)))
            rand.append(covering_radius(x, rng.choice(100, 10, replace=False)))
        assert np.mean(fps) < np.mean(rand)
