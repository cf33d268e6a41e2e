import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialbench.data_model import (DatasetError, Location, SimulationConfig,
                                     SpatialDataset, TrendSpec, load_csv,
                                     save_csv, simulate, split_holdout)


def make_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    return SpatialDataset(rng.uniform(-10, 10, n), rng.uniform(30, 50, n),
                          rng.normal(size=n))


class TestLocation:
    def test_valid(self):
        loc = Location(-75.5, 41.2)
        assert loc.key == (-75.5, 41.2)

    @pytest.mark.parametrize("lon,lat", [(181, 0), (-181, 0), (0, 91), (0, -91),
                                         (np.nan, 0), (0, np.inf)])
    def test_out_of_range(self, lon, lat):
        with pytest.raises(DatasetError):
            Location(lon, lat)

    def test_key_rounds_to_nine_decimals(self):
        a = Location(1.0000000001, 2.0)   # differs by 1e-10 only
        b = Location(1.0, 2.0)
        assert a.key == b.key


class TestSpatialDataset:
    def test_basic(self):
        d = SpatialDataset([0, 1], [0, 1], [1.5, 2.5])
        assert d.n == len(d) == 2
        assert d.bbox() == (0.0, 1.0, 0.0, 1.0)
        assert d.weights is None

    def test_rejects_duplicates(self):
        with pytest.raises(DatasetError, match="duplicate"):
            SpatialDataset([0, 0], [1, 1], [1.0, 2.0])

    def test_rejects_near_duplicates_below_resolution(self):
        with pytest.raises(DatasetError, match="duplicate"):
            SpatialDataset([0.0, 1e-12], [1, 1], [1.0, 2.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(DatasetError):
            SpatialDataset([0, 1], [0, np.nan], [1.0, 2.0])
        with pytest.raises(DatasetError):
            SpatialDataset([0, 1], [0, 1], [1.0, np.inf])

    def test_rejects_length_mismatch_and_empty(self):
        with pytest.raises(DatasetError):
            SpatialDataset([0, 1], [0], [1.0, 2.0])
        with pytest.raises(DatasetError):
            SpatialDataset([], [], [])

    def test_rejects_bad_weights(self):
        with pytest.raises(DatasetError):
            SpatialDataset([0, 1], [0, 1], [1.0, 2.0], weights=[1.0, 0.0])

    def test_arrays_immutable(self):
        d = make_dataset(5)
        with pytest.raises(ValueError):
            d.values[0] = 99.0

    def test_key_index(self):
        d = SpatialDataset([0.5, 1.5], [2.5, 3.5], [1.0, 2.0])
        assert d.key_index()[(1.5, 3.5)] == 1


class TestCSV:
    def test_round_trip(self, tmp_path):
        d = make_dataset(40, seed=3)
        path = tmp_path / "d.csv"
        save_csv(d, path)
        assert load_csv(path) == d

    def test_round_trip_with_weights(self, tmp_path):
        rng = np.random.default_rng(1)
        d = SpatialDataset(rng.uniform(0, 1, 10), rng.uniform(0, 1, 10),
                           rng.normal(size=10), weights=rng.uniform(0.5, 2, 10))
        path = tmp_path / "d.csv"
        save_csv(d, path)
        back = load_csv(path)
        assert back == d

    def test_malformed_row_reports_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("lon,lat,value\n1.0,2.0,3.0\n1.5,oops,4.0\n")
        with pytest.raises(DatasetError, match="row 3"):
            load_csv(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("lon,lat\n1.0,2.0\n")
        with pytest.raises(DatasetError, match="value"):
            load_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DatasetError, match="empty"):
            load_csv(path)


class TestSplit:
    def test_small_survey_sizes(self):
        # round(0.2 * 71) = 14 held out, 57 for training.
        d = make_dataset(71)
        s = split_holdout(d, 0.2, seed=11)
        assert (s.train.n, s.validation.n) == (57, 14)

    def test_large_survey_sizes(self):
        # round(0.2 * 15448) = 3090 held out, 12358 for training.
        d = make_dataset(15448)
        s = split_holdout(d, 0.2, seed=11)
        assert (s.train.n, s.validation.n) == (12358, 3090)

    def test_deterministic(self):
        d = make_dataset(50)
        a = split_holdout(d, 0.3, seed=5)
        b = split_holdout(d, 0.3, seed=5)
        assert a.train == b.train and a.validation == b.validation
        c = split_holdout(d, 0.3, seed=6)
        assert c.validation != a.validation

    def test_partition(self):
        d = make_dataset(37)
        s = split_holdout(d, 0.25, seed=2)
        train_keys = set(s.train.key_index())
        val_keys = set(s.validation.key_index())
        assert not train_keys & val_keys
        assert train_keys | val_keys == set(d.key_index())

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
    def test_fraction_bounds(self, frac):
        with pytest.raises(ValueError):
            split_holdout(make_dataset(10), frac, seed=0)

    @given(n=st.integers(2, 60), frac=st.floats(0.05, 0.95), seed=st.integers(0, 99))
    @settings(max_examples=40, deadline=None)
    def test_partition_property(self, n, frac, seed):
        d = make_dataset(n, seed=7)
        s = split_holdout(d, frac, seed=seed)
        assert s.train.n + s.validation.n == n
        assert 1 <= s.validation.n <= n - 1
        expected = int(np.rint(frac * n))
        assert s.validation.n == min(max(expected, 1), n - 1)
        assert not set(s.train.key_index()) & set(s.validation.key_index())


BOX = dict(lon_min=0.0, lon_max=50.0, lat_min=0.0, lat_max=50.0)


class TestSimulate:
    def test_deterministic(self):
        cfg = SimulationConfig(**BOX, n_points=60, beta=(1.0, 0.2), sigma0_sq=2.0,
                               theta=3.0, sigma_xi_sq=0.5, sigma_eps_sq=0.25, seed=9)
        a, b = simulate(cfg), simulate(cfg)
        assert a == b

    def test_zero_variance_returns_exact_trend(self):
        cfg = SimulationConfig(**BOX, n_points=30, beta=(2.0, -0.5), sigma0_sq=0.0,
                               theta=1.0, sigma_xi_sq=0.0, sigma_eps_sq=0.0, seed=4)
        d = simulate(cfg)
        expected = 2.0 - 0.5 * d.lats
        np.testing.assert_allclose(d.values, expected, rtol=0, atol=1e-12)

    def test_zero_process_variance_allows_large_n(self):
        cfg = SimulationConfig(**BOX, n_points=8000, beta=(0.0, 0.0), sigma0_sq=0.0,
                               theta=1.0, sigma_xi_sq=1.0, sigma_eps_sq=1.0, seed=4)
        d = simulate(cfg)
        assert d.n == 8000
        # xi + eps variance = 2.0; generous Monte Carlo band.
        assert 1.8 < np.var(d.values) < 2.2

    def test_dense_cap_enforced(self):
        cfg = SimulationConfig(**BOX, n_points=5001, beta=(0.0, 0.0), sigma0_sq=1.0,
                               theta=1.0, sigma_xi_sq=0.0, sigma_eps_sq=0.0, seed=4)
        with pytest.raises(ValueError, match="dense simulation limit"):
            simulate(cfg)

    def test_marginal_variance(self):
        # Var(Z) = sigma0^2 + sigma_xi^2 + sigma_eps^2 = 3.25 at each point;
        # short range vs the 50-degree box keeps the sample variance close.
        cfg = SimulationConfig(**BOX, n_points=2000, beta=(0.0, 0.0), sigma0_sq=2.0,
                               theta=1.0, sigma_xi_sq=0.75, sigma_eps_sq=0.5, seed=21)
        d = simulate(cfg)
        assert 2.7 < np.var(d.values) < 3.8

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimulationConfig(lon_min=0, lon_max=0, lat_min=0, lat_max=1,
                             n_points=5, beta=(0.0, 0.0), sigma0_sq=1.0,
                             theta=1.0, sigma_xi_sq=0.0, sigma_eps_sq=0.0, seed=0)
        with pytest.raises(ValueError):
            SimulationConfig(**BOX, n_points=5, beta=(0.0,), sigma0_sq=1.0,
                             theta=1.0, sigma_xi_sq=0.0, sigma_eps_sq=0.0, seed=0)
        with pytest.raises(ValueError):
            SimulationConfig(**BOX, n_points=5, beta=(0.0, 0.0), sigma0_sq=1.0,
                             theta=-1.0, sigma_xi_sq=0.0, sigma_eps_sq=0.0, seed=0)

    def test_config_round_trip(self):
        cfg = SimulationConfig(**BOX, n_points=12, beta=(1.0, 2.0), sigma0_sq=1.5,
                               theta=2.0, sigma_xi_sq=0.1, sigma_eps_sq=0.2, seed=3)
        assert SimulationConfig.from_dict(cfg.to_dict()) == cfg


class TestTrendSpec:
    def test_default_is_intercept_lat(self):
        t = TrendSpec()
        X = t.design_matrix([10.0, 20.0], [40.0, 45.0])
        np.testing.assert_array_equal(X, [[1.0, 40.0], [1.0, 45.0]])
        assert t.p == 2

    def test_lon_covariate(self):
        t = TrendSpec(("intercept", "lat", "lon"))
        X = t.design_matrix([10.0], [40.0])
        np.testing.assert_array_equal(X, [[1.0, 40.0, 10.0]])

    def test_must_start_with_intercept(self):
        with pytest.raises(ValueError):
            TrendSpec(("lat", "intercept"))

    def test_unknown_covariate(self):
        with pytest.raises(ValueError):
            TrendSpec(("intercept", "elevation"))

    def test_round_trip(self):
        t = TrendSpec(("intercept", "lat", "lon"))
        assert TrendSpec.from_dict(t.to_dict()) == t
