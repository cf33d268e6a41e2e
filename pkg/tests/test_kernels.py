import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialbench.kernels import (BasisGrid, ExponentialCov, bisquare,
                                  bisquare_design, pairwise_distances,
                                  tps_radial, wendland, wendland_design)


class TestPairwiseDistances:
    def test_three_four_five(self):
        d = pairwise_distances([0.0], [0.0], [3.0], [4.0])
        assert d.shape == (1, 1)
        assert d[0, 0] == pytest.approx(5.0, abs=1e-15)

    def test_symmetry_and_zero_diagonal(self):
        rng = np.random.default_rng(0)
        lons, lats = rng.uniform(0, 10, 8), rng.uniform(0, 10, 8)
        d = pairwise_distances(lons, lats, lons, lats)
        np.testing.assert_allclose(d, d.T, atol=0)
        np.testing.assert_array_equal(np.diag(d), np.zeros(8))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-5, 5, (6, 2))
        b = rng.uniform(-5, 5, (4, 2))
        d = pairwise_distances(a[:, 0], a[:, 1], b[:, 0], b[:, 1])
        for i in range(6):
            for j in range(4):
                assert d[i, j] == pytest.approx(math.dist(a[i], b[j]), abs=1e-12)


class TestExponentialCov:
    def test_values(self):
        c = ExponentialCov(2.5, 3.0)
        assert c(0.0) == pytest.approx(2.5, abs=0)
        assert c(3.0) == pytest.approx(2.5 / math.e, rel=1e-15)
        assert c(6.0) == pytest.approx(2.5 / math.e ** 2, rel=1e-14)

    def test_monotone_decreasing(self):
        c = ExponentialCov(1.0, 2.0)
        h = np.linspace(0, 10, 50)
        v = c(h)
        assert np.all(np.diff(v) < 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            ExponentialCov(-1.0, 1.0)
        with pytest.raises(ValueError):
            ExponentialCov(1.0, 0.0)


class TestTpsRadial:
    def test_zero_at_origin_and_one(self):
        assert tps_radial(0.0) == 0.0
        assert tps_radial(1.0) == 0.0  # log(1) = 0

    def test_hand_value(self):
        # d^2 log d at d = 2: 4 * log 2
        assert tps_radial(2.0) == pytest.approx(4.0 * math.log(2.0), rel=1e-15)

    def test_no_warning_on_zero_array(self):
        out = tps_radial(np.array([0.0, 0.5, 3.0]))
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.25 * math.log(0.5), rel=1e-15)


class TestBisquare:
    def test_endpoints(self):
        assert bisquare(0.0, 2.0) == 1.0
        assert bisquare(2.0, 2.0) == 0.0
        assert bisquare(5.0, 2.0) == 0.0

    def test_hand_value(self):
        # (1 - (1/2)^2)^2 = 0.5625 at half width
        assert bisquare(1.0, 2.0) == pytest.approx(0.5625, abs=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            bisquare(1.0, 0.0)


class TestWendland:
    def test_endpoints(self):
        assert wendland(0.0) == pytest.approx(1.0, abs=0)
        assert wendland(1.0) == 0.0
        assert wendland(1.5) == 0.0

    def test_exact_rational_value(self):
        # (1/2)^6 * (35/4 + 9 + 3)/3 = 83/768
        assert wendland(0.5) == pytest.approx(83.0 / 768.0, rel=1e-15)

    @pytest.mark.parametrize("t", [0.1, 0.3, 0.7, 0.9, 0.999])
    def test_against_mpmath(self, t):
        with mpmath.workdps(50):
            mt = mpmath.mpf(t)
            ref = (1 - mt) ** 6 * (35 * mt ** 2 + 18 * mt + 3) / 3
        assert wendland(t) == pytest.approx(float(ref), rel=1e-14)

    def test_monotone_decreasing_on_support(self):
        t = np.linspace(0, 1, 200)
        v = wendland(t)
        assert np.all(np.diff(v) <= 0)
        assert np.all(v >= 0)


class TestBasisGrid:
    def test_cover_counts_and_spacing(self):
        g = BasisGrid.cover((0.0, 10.0, 0.0, 6.0), nx=6, ny=4)
        assert g.r == 24
        assert g.spacing == pytest.approx(2.0)
        assert g.lons.min() == 0.0 and g.lons.max() == 10.0
        assert g.lats.min() == 0.0 and g.lats.max() == 6.0

    def test_margin(self):
        g = BasisGrid.cover((0.0, 10.0, 0.0, 10.0), nx=5, ny=5, margin=1.0)
        assert g.lons.min() == -1.0 and g.lons.max() == 11.0

    def test_too_few_nodes(self):
        with pytest.raises(ValueError):
            BasisGrid.cover((0, 1, 0, 1), nx=1, ny=3)


class TestBisquareDesign:
    def test_matches_manual_evaluation(self):
        rng = np.random.default_rng(2)
        lons, lats = rng.uniform(0, 10, 15), rng.uniform(0, 10, 15)
        g1 = BasisGrid.cover((0, 10, 0, 10), 3, 3)
        g2 = BasisGrid.cover((0, 10, 0, 10), 5, 5)
        S = bisquare_design(lons, lats, [g1, g2], width_factor=1.5)
        assert S.shape == (15, 9 + 25)
        i, j = 4, 3
        d = math.hypot(lons[i] - g1.lons[j], lats[i] - g1.lats[j])
        assert S[i, j] == pytest.approx(bisquare(d, 1.5 * g1.spacing), abs=1e-15)
        j2 = 11
        d2 = math.hypot(lons[i] - g2.lons[j2], lats[i] - g2.lats[j2])
        assert S[i, 9 + j2] == pytest.approx(bisquare(d2, 1.5 * g2.spacing),
                                             abs=1e-15)


class TestWendlandDesign:
    def test_matches_dense_brute_force(self):
        rng = np.random.default_rng(3)
        lons, lats = rng.uniform(0, 10, 30), rng.uniform(0, 10, 30)
        grid = BasisGrid.cover((0, 10, 0, 10), 8, 8)
        support = 2.5 * grid.spacing
        S = wendland_design(lons, lats, grid, support).toarray()
        d = pairwise_distances(lons, lats, grid.lons, grid.lats)
        dense = wendland(d / support)
        np.testing.assert_allclose(S, dense, atol=1e-15)

    def test_row_sparsity_bound(self):
        # A unit lattice has at most 14 points strictly inside any disk of
        # radius 2 (21 for radius 2.5); both caps found by exhaustive search
        # over center offsets in [0,1)^2. The area heuristic
        # pi * (support/cell)^2 holds for the average over uniform points,
        # not per row.
        grid = BasisGrid.cover((0, 20, 0, 20), 21, 21)  # unit cells
        rng = np.random.default_rng(4)
        lons = np.concatenate([rng.uniform(0, 20, 500), grid.lons])
        lats = np.concatenate([rng.uniform(0, 20, 500), grid.lats])
        for factor, cap in [(2.0, 14), (2.5, 21)]:
            S = wendland_design(lons, lats, grid, factor * grid.spacing)
            row_nnz = np.diff(S.indptr)
            assert row_nnz.max() <= cap
            assert row_nnz.mean() <= math.pi * factor ** 2

    @given(seed=st.integers(0, 200))
    @settings(max_examples=25, deadline=None)
    def test_sparse_dense_agree_property(self, seed):
        rng = np.random.default_rng(seed)
        lons, lats = rng.uniform(-3, 13, 12), rng.uniform(-3, 13, 12)
        grid = BasisGrid.cover((0, 10, 0, 10), 5, 5)
        support = rng.uniform(1.0, 8.0)
        S = wendland_design(lons, lats, grid, support).toarray()
        d = pairwise_distances(lons, lats, grid.lons, grid.lats)
        np.testing.assert_allclose(S, wendland(d / support), atol=1e-14)

    def test_validation(self):
        grid = BasisGrid.cover((0, 1, 0, 1), 2, 2)
        with pytest.raises(ValueError):
            wendland_design([0.5], [0.5], grid, 0.0)
