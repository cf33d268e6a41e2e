"""Spatial datasets: construction, CSV ingestion, hold-out splits, simulation.

Coordinates are (lon, lat) in degrees and all distances used by the toolkit
are plain Euclidean distances on those degree coordinates. Values are in ppm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

# Locations are considered identical after rounding to 1e-9 degrees; kriging
# systems are singular under exact duplicates, so ingestion rejects them.
COORD_DECIMALS = 9


class DatasetError(ValueError):
    """Raised for malformed input data (bad rows, duplicates, empty files)."""


@dataclass(frozen=True)
class Location:
    """A point on the globe, (lon, lat) in degrees."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise DatasetError(f"non-finite location ({self.lon}, {self.lat})")
        if not -180.0 <= self.lon <= 180.0:
            raise DatasetError(f"lon {self.lon} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise DatasetError(f"lat {self.lat} outside [-90, 90]")

    @property
    def key(self) -> tuple:
        """Canonical identity used for duplicate/indicator checks."""
        return (round(self.lon, COORD_DECIMALS), round(self.lat, COORD_DECIMALS))


def location_keys(lons: np.ndarray, lats: np.ndarray) -> list[tuple]:
    lons = np.round(np.asarray(lons, dtype=float), COORD_DECIMALS)
    lats = np.round(np.asarray(lats, dtype=float), COORD_DECIMALS)
    return list(zip(lons.tolist(), lats.tolist()))


class SpatialDataset:
    """Ordered spatial observations with optional per-point variance weights.

    Immutable once constructed: the backing arrays are copies with the
    writeable flag cleared, so instances are safe to share across threads.
    """

    def __init__(self, lons, lats, values, weights=None, validate: bool = True):
        self._lons = np.array(lons, dtype=float)
        self._lats = np.array(lats, dtype=float)
        self._values = np.array(values, dtype=float)
        self._weights = None if weights is None else np.array(weights, dtype=float)
        if validate:
            self._validate()
        for arr in (self._lons, self._lats, self._values, self._weights):
            if arr is not None:
                arr.setflags(write=False)
        self._key_index: dict[tuple, int] | None = None

    def _validate(self):
        n = self._lons.size
        if self._lats.size != n or self._values.size != n:
            raise DatasetError("lon/lat/value arrays must have equal length")
        if n == 0:
            raise DatasetError("empty dataset")
        if not np.all(np.isfinite(self._lons)) or not np.all(np.isfinite(self._lats)):
            raise DatasetError("non-finite coordinates")
        if np.any(np.abs(self._lons) > 180.0) or np.any(np.abs(self._lats) > 90.0):
            raise DatasetError("coordinates outside lon [-180,180] / lat [-90,90]")
        if not np.all(np.isfinite(self._values)):
            raise DatasetError("non-finite values")
        keys = location_keys(self._lons, self._lats)
        if len(set(keys)) != n:
            seen = set()
            for i, k in enumerate(keys):
                if k in seen:
                    raise DatasetError(f"duplicate location {k} at point {i}")
                seen.add(k)
        if self._weights is not None:
            if self._weights.size != n:
                raise DatasetError("weights length must equal number of points")
            if not np.all(np.isfinite(self._weights)) or np.any(self._weights <= 0):
                raise DatasetError("weights must be finite and positive")

    @property
    def n(self) -> int:
        return self._lons.size

    def __len__(self) -> int:
        return self.n

    @property
    def lons(self) -> np.ndarray:
        return self._lons

    @property
    def lats(self) -> np.ndarray:
        return self._lats

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def weights(self) -> np.ndarray | None:
        return self._weights

    def location(self, i: int) -> Location:
        return Location(float(self._lons[i]), float(self._lats[i]))

    def key_index(self) -> dict[tuple, int]:
        """Map canonical location key -> point index (built lazily)."""
        if self._key_index is None:
            self._key_index = {
                k: i for i, k in enumerate(location_keys(self._lons, self._lats))
            }
        return self._key_index

    def bbox(self) -> tuple[float, float, float, float]:
        """(lon_min, lon_max, lat_min, lat_max) of the point set."""
        return (
            float(self._lons.min()),
            float(self._lons.max()),
            float(self._lats.min()),
            float(self._lats.max()),
        )

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx)
        w = None if self._weights is None else self._weights[idx]
        return SpatialDataset(self._lons[idx], self._lats[idx], self._values[idx], w,
                              validate=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialDataset):
            return NotImplemented
        if self.n != other.n:
            return False
        same = (
            np.array_equal(self._lons, other._lons)
            and np.array_equal(self._lats, other._lats)
            and np.array_equal(self._values, other._values)
        )
        if self._weights is None or other._weights is None:
            return same and self._weights is other._weights
        return same and np.array_equal(self._weights, other._weights)

    def to_dict(self) -> dict:
        d = {
            "lons": self._lons.tolist(),
            "lats": self._lats.tolist(),
            "values": self._values.tolist(),
        }
        if self._weights is not None:
            d["weights"] = self._weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialDataset":
        return cls(d["lons"], d["lats"], d["values"], d.get("weights"))


@dataclass(frozen=True)
class HoldoutSplit:
    """A train/validation partition of one dataset (disjoint by location)."""

    train: SpatialDataset
    validation: SpatialDataset
    seed: int

    def describe(self) -> dict:
        return {"n_train": self.train.n, "n_validation": self.validation.n,
                "seed": self.seed}


# Covariate terms available to TrendSpec. The first term of any trend must be
# the constant, so fitted surfaces always contain an intercept.
_TREND_TERMS = {
    "intercept": lambda lon, lat: np.ones_like(lat),
    "lat": lambda lon, lat: lat,
    "lon": lambda lon, lat: lon,
}


@dataclass(frozen=True)
class TrendSpec:
    """Large-scale trend covariates x(u); default is (1, lat)."""

    covariates: tuple = ("intercept", "lat")

    def __post_init__(self):
        if len(self.covariates) < 1 or self.covariates[0] != "intercept":
            raise ValueError("trend must start with 'intercept'")
        for name in self.covariates:
            if name not in _TREND_TERMS:
                raise ValueError(f"unknown covariate {name!r}")

    @property
    def p(self) -> int:
        return len(self.covariates)

    def design_matrix(self, lons, lats) -> np.ndarray:
        lons = np.asarray(lons, dtype=float)
        lats = np.asarray(lats, dtype=float)
        cols = [_TREND_TERMS[name](lons, lats) for name in self.covariates]
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        return {"covariates": list(self.covariates)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrendSpec":
        return cls(tuple(d["covariates"]))


@dataclass(frozen=True)
class SimulationConfig:
    """Generator settings for synthetic data from the additive spatial model.

    Values are drawn as trend + exponential-covariance process + fine-scale
    noise + measurement noise at n_points uniform random locations in the box.
    """

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    n_points: int
    beta: tuple
    sigma0_sq: float
    theta: float
    sigma_xi_sq: float
    sigma_eps_sq: float
    seed: int
    trend: TrendSpec = field(default_factory=TrendSpec)

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.lon_max <= self.lon_min or self.lat_max <= self.lat_min:
            raise ValueError("degenerate domain box")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        for name in ("sigma0_sq", "sigma_xi_sq", "sigma_eps_sq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if len(self.beta) != self.trend.p:
            raise ValueError("beta length must match trend covariates")

    def to_dict(self) -> dict:
        return {
            "lon_min": self.lon_min, "lon_max": self.lon_max,
            "lat_min": self.lat_min, "lat_max": self.lat_max,
            "n_points": self.n_points, "beta": list(self.beta),
            "sigma0_sq": self.sigma0_sq, "theta": self.theta,
            "sigma_xi_sq": self.sigma_xi_sq, "sigma_eps_sq": self.sigma_eps_sq,
            "seed": self.seed, "trend": self.trend.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        trend = TrendSpec.from_dict(d.pop("trend")) if "trend" in d else TrendSpec()
        known = {f.name for f in fields(cls)} - {"trend"}
        missing = sorted(known - d.keys())
        extra = sorted(d.keys() - known)
        if missing:
            raise ValueError(f"simulation config missing keys: {missing}")
        if extra:
            raise ValueError(f"simulation config has unknown keys: {extra}")
        d["beta"] = tuple(d["beta"])
        return cls(trend=trend, **d)


def load_csv(path, columns=("lon", "lat", "value"), weight_column=None) -> SpatialDataset:
    """Read a dataset from CSV with a header row.

    `columns` names the lon, lat and value columns. Malformed rows raise
    DatasetError with the offending 1-based row number.
    """
    lon_col, lat_col, val_col = columns
    lons, lats, values, weights = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: empty file")
        for name in columns:
            if name not in reader.fieldnames:
                raise DatasetError(f"{path}: missing column {name!r}")
        if weight_column is None and "weight" in reader.fieldnames:
            weight_column = "weight"
        row_no = 1
        for row in reader:
            row_no += 1
            try:
                lon = float(row[lon_col])
                lat = float(row[lat_col])
                val = float(row[val_col])
                w = float(row[weight_column]) if weight_column else None
            except (TypeError, ValueError, KeyError):
                raise DatasetError(f"{path}: malformed row {row_no}") from None
            if not (math.isfinite(lon) and math.isfinite(lat) and math.isfinite(val)):
                raise DatasetError(f"{path}: malformed row {row_no} (non-finite field)")
            if w is not None and (not math.isfinite(w) or w <= 0):
                raise DatasetError(f"{path}: malformed row {row_no} (bad weight)")
            lons.append(lon)
            lats.append(lat)
            values.append(val)
            if w is not None:
                weights.append(w)
    if not lons:
        raise DatasetError(f"{path}: empty file")
    return SpatialDataset(lons, lats, values, weights if weights else None)


def save_csv(data: SpatialDataset, path) -> None:
    """Write a dataset as CSV (header lon,lat,value[,weight]); round-trips
    exactly through load_csv."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["lon", "lat", "value"]
        if data.weights is not None:
            header.append("weight")
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(data.lons[i])), repr(float(data.lats[i])),
                   repr(float(data.values[i]))]
            if data.weights is not None:
                row.append(repr(float(data.weights[i])))
            writer.writerow(row)


def split_holdout(data: SpatialDataset, fraction: float, seed: int) -> HoldoutSplit:
    """Randomly reserve round(fraction * N) points for validation.

    Sampling is uniform without replacement and deterministic given the seed.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    if data.n < 2:
        raise DatasetError("dataset too small to split")
    m = int(np.rint(fraction * data.n))
    m = min(max(m, 1), data.n - 1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    val_idx = np.sort(perm[:m])
    trn_idx = np.sort(perm[m:])
    return HoldoutSplit(data.subset(trn_idx), data.subset(val_idx), seed)


# Dense simulation builds an n x n covariance matrix; beyond this size the
# memory/time cost is prohibitive, so the generator refuses unless the
# process variance is zero (no dense matrix needed then).
DENSE_SIM_LIMIT = 5000


def simulate(cfg: SimulationConfig) -> SpatialDataset:
    """Draw a synthetic dataset from the additive model.

    Z = X beta + nu + xi + eps, with nu a mean-zero Gaussian process under
    the exponential covariance (sigma0_sq, theta), xi and eps white noise.
    Deterministic given cfg.seed.
    """
    if cfg.sigma0_sq > 0 and cfg.n_points > DENSE_SIM_LIMIT:
        raise ValueError(
            f"n_points={cfg.n_points} exceeds the dense simulation limit "
            f"{DENSE_SIM_LIMIT}; use sigma0_sq=0 or fewer points"
        )
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_points
    lons = rng.uniform(cfg.lon_min, cfg.lon_max, size=n)
    lats = rng.uniform(cfg.lat_min, cfg.lat_max, size=n)
    # Re-draw any colliding locations (vanishing probability, but the dataset
    # invariant forbids duplicates).
    keys = location_keys(lons, lats)
    tries = 0
    while len(set(keys)) != n:
        seen: dict[tuple, int] = {}
        for i, k in enumerate(keys):
            if k in seen:
                lons[i] = rng.uniform(cfg.lon_min, cfg.lon_max)
                lats[i] = rng.uniform(cfg.lat_min, cfg.lat_max)
            else:
                seen[k] = i
        keys = location_keys(lons, lats)
        tries += 1
        if tries > 100:
            raise DatasetError("could not draw distinct locations")

    X = cfg.trend.design_matrix(lons, lats)
    z = X @ np.asarray(cfg.beta, dtype=float)
    if cfg.sigma0_sq > 0:
        from .kernels import ExponentialCov, pairwise_distances
        from .linalg import chol_factor_jittered

        h = pairwise_distances(lons, lats, lons, lats)
        cov = ExponentialCov(cfg.sigma0_sq, cfg.theta)(h)
        factor, _ = chol_factor_jittered(cov)
        z = z + factor.L @ rng.standard_normal(n)
    if cfg.sigma_xi_sq > 0:
        z = z + math.sqrt(cfg.sigma_xi_sq) * rng.standard_normal(n)
    if cfg.sigma_eps_sq > 0:
        z = z + math.sqrt(cfg.sigma_eps_sq) * rng.standard_normal(n)
    return SpatialDataset(lons, lats, z)
