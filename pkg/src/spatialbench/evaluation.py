"""Hold-out evaluation: error metrics, resource metering, the compare table.

The benchmark protocol: split a dataset, fit each requested method on the
training part, score hold-out error (RSTE), penalized model fit (PMCC, only
for methods that report prediction variances), and surface roughness at the
shortest raster lag (lag-1 semivariogram of the predicted surface), while
metering wall-clock time and peak Python memory per method.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import config as cfg
from .data_model import HoldoutSplit, SpatialDataset, TrendSpec
from .predictors import fit as fit_predictor

CSV_HEADER = ["Predictor", "RSTE", "PMCC", "Lag-1 Semivariogram",
              "CPU Time (in minutes)", "Peak Memory Usage (in MB)"]


def rste(observed, predicted) -> float:
    """Root summed-to-mean squared prediction error over the hold-out set."""
    observed = np.asarray(observed, float)
    predicted = np.asarray(predicted, float)
    if observed.shape != predicted.shape or observed.size == 0:
        raise ValueError("observed/predicted must be equal-length, nonempty")
    return float(np.sqrt(np.mean((observed - predicted) ** 2)))


def pmcc(observed, predicted, variance, sign: str = "paper") -> float:
    """Penalized model-comparison criterion over the hold-out set.

    mean_j [ (z_j - zhat_j)^2 / s2_j + sign * log s2_j ], with sign -1 under
    the "paper" convention and +1 under the proper-scoring "score"
    convention. Requires strictly positive variances.
    """
    observed = np.asarray(observed, float)
    predicted = np.asarray(predicted, float)
    variance = np.asarray(variance, float)
    if not (observed.shape == predicted.shape == variance.shape) or observed.size == 0:
        raise ValueError("inputs must be equal-length, nonempty")
    if np.any(variance <= 0):
        raise ValueError("PMCC requires strictly positive predicted variances")
    if sign == "paper":
        s = -1.0
    elif sign == "score":
        s = 1.0
    else:
        raise ValueError("sign must be 'paper' or 'score'")
    return float(np.mean((observed - predicted) ** 2 / variance
                         + s * np.log(variance)))


def lag1_semivariogram(lons, lats, values, lag: float | None = None,
                       tol: float = 1e-6) -> float:
    """Empirical semivariogram at the shortest positive lag of a point set.

    gamma(h) = 1/(2 |N(h)|) sum over pairs at distance within `tol` of `lag`.
    With `lag=None` the smallest nonzero inter-point distance is used, which
    on a regular raster is the grid step.
    """
    lons = np.asarray(lons, float)
    lats = np.asarray(lats, float)
    values = np.asarray(values, float)
    if lons.size < 2:
        raise ValueError("need at least two points")
    pts = np.column_stack((lons, lats))
    tree = cKDTree(pts)
    if lag is None:
        nn = tree.query(pts, k=2)[0][:, 1]
        lag = float(np.min(nn[nn > 0]))
    if lag <= 0:
        raise ValueError("lag must be positive")
    pairs = tree.query_pairs(r=lag + tol, output_type="ndarray")
    if pairs.size == 0:
        raise ValueError(f"no point pairs at lag {lag}")
    d = np.sqrt(np.sum((pts[pairs[:, 0]] - pts[pairs[:, 1]]) ** 2, axis=1))
    keep = np.abs(d - lag) <= tol
    if not np.any(keep):
        raise ValueError(f"no point pairs within {tol} of lag {lag}")
    diffs = values[pairs[keep, 0]] - values[pairs[keep, 1]]
    return float(np.sum(diffs ** 2) / (2.0 * diffs.size))


@dataclass(frozen=True)
class MeterReading:
    """Wall-clock minutes and peak traced memory (MB) for one metered call."""

    minutes: float
    peak_mb: float


def meter(fn, *args, **kwargs):
    """Run fn, returning (result, MeterReading).

    Memory is the tracemalloc peak, i.e. Python-level allocations including
    numpy buffers; time is elapsed wall clock in minutes.
    """
    tracing_before = tracemalloc.is_tracing()
    if not tracing_before:
        tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    finally:
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        if not tracing_before:
            tracemalloc.stop()
    return result, MeterReading(elapsed / 60.0, peak / (1024.0 * 1024.0))


@dataclass(frozen=True)
class RasterSpec:
    """Regular lon/lat raster: corners and step, inclusive of both corners
    when the span is a whole multiple of the step."""

    lon0: float
    lat0: float
    lon1: float
    lat1: float
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("raster step must be positive")
        if self.lon1 <= self.lon0 or self.lat1 <= self.lat0:
            raise ValueError("raster corners must satisfy lon1 > lon0, lat1 > lat0")

    @classmethod
    def parse(cls, text: str) -> "RasterSpec":
        parts = text.split(",")
        if len(parts) != 5:
            raise ValueError("raster must be 'lon0,lat0,lon1,lat1,step'")
        lon0, lat0, lon1, lat1, step = (float(p) for p in parts)
        return cls(lon0, lat0, lon1, lat1, step)

    @classmethod
    def cover(cls, bbox, step: float) -> "RasterSpec":
        return cls(bbox[0], bbox[2], bbox[1], bbox[3], step)

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        nx = int(math.floor((self.lon1 - self.lon0) / self.step + 1e-9)) + 1
        ny = int(math.floor((self.lat1 - self.lat0) / self.step + 1e-9)) + 1
        gx = self.lon0 + self.step * np.arange(nx)
        gy = self.lat0 + self.step * np.arange(ny)
        LON, LAT = np.meshgrid(gx, gy, indexing="ij")
        return LON.ravel(), LAT.ravel()

    def bbox(self) -> tuple:
        return (self.lon0, self.lon1, self.lat0, self.lat1)

    def to_dict(self) -> dict:
        return {"lon0": self.lon0, "lat0": self.lat0, "lon1": self.lon1,
                "lat1": self.lat1, "step": self.step}


@dataclass
class MethodReport:
    tag: str
    rste: float
    pmcc: float | None
    semivariogram: float
    cpu_minutes: float
    peak_mb: float
    params: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.tag, _fmt(self.rste),
                "N/A" if self.pmcc is None else _fmt(self.pmcc),
                _fmt(self.semivariogram), _fmt(self.cpu_minutes),
                _fmt(self.peak_mb)]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


@dataclass
class CompareReport:
    rows: list
    n_train: int
    n_validation: int
    seed: int
    pmcc_sign: str
    raster: RasterSpec

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow(row.csv_row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_validation": self.n_validation,
            "seed": self.seed,
            "pmcc_sign": self.pmcc_sign,
            "raster": self.raster.to_dict(),
            "rows": [{
                "tag": r.tag, "rste": r.rste, "pmcc": r.pmcc,
                "semivariogram": r.semivariogram,
                "cpu_minutes": r.cpu_minutes, "peak_mb": r.peak_mb,
                "params": r.params,
            } for r in self.rows],
        }


def evaluate_method(tag: str, split: HoldoutSplit, raster: RasterSpec, *,
                    trend: TrendSpec | None = None,
                    sigma_eps_sq: float | None = None,
                    options: dict | None = None, pmcc_sign: str = "paper",
                    seed: int | None = None) -> MethodReport:
    """Fit one method on the training part and score it on the hold-out part.

    The metered block covers fitting, hold-out prediction, and the raster
    prediction used for the semivariogram — the method's complete workload.
    """
    val = split.validation
    bbox = raster.bbox()

    def run():
        model = fit_predictor(tag, split.train, trend=trend,
                              sigma_eps_sq=sigma_eps_sq, options=options,
                              domain_bbox=bbox, seed=seed)
        pred_val = model.predict(val.lons, val.lats)
        raster_lons, raster_lats = raster.points()
        pred_raster = model.predict(raster_lons, raster_lats)
        return model, pred_val, pred_raster, raster_lons, raster_lats

    (model, pred_val, pred_raster, r_lons, r_lats), reading = meter(run)
    score_rste = rste(val.values, pred_val.mean)
    score_pmcc = None
    if pred_val.has_variance:
        score_pmcc = pmcc(val.values, pred_val.mean, pred_val.variance,
                          sign=pmcc_sign)
    score_sv = lag1_semivariogram(r_lons, r_lats, pred_raster.mean)
    return MethodReport(tag, score_rste, score_pmcc, score_sv,
                        reading.minutes, reading.peak_mb,
                        model.params_summary())


def compare(split: HoldoutSplit, methods=None, raster: RasterSpec | None = None,
            *, trend: TrendSpec | None = None, sigma_eps_sq: float | None = None,
            method_options: dict | None = None, pmcc_sign: str = "paper",
            seed: int | None = None,
            raster_step: float | None = None) -> CompareReport:
    """Run the benchmark protocol for several methods on one split."""
    defaults = cfg.defaults()
    if methods is None:
        methods = defaults["methods"]
    if raster is None:
        step = raster_step if raster_step is not None else defaults["raster_step"]
        lo0, hi0, la0, la1 = split.train.bbox()
        lo0v, hi0v, la0v, la1v = split.validation.bbox()
        raster = RasterSpec(min(lo0, lo0v), min(la0, la0v),
                            max(hi0, hi0v), max(la1, la1v), step)
    rows = []
    for tag in methods:
        opts = None if method_options is None else method_options.get(tag)
        rows.append(evaluate_method(tag, split, raster, trend=trend,
                                    sigma_eps_sq=sigma_eps_sq, options=opts,
                                    pmcc_sign=pmcc_sign, seed=seed))
    return CompareReport(rows, split.train.n, split.validation.n,
                         split.seed, pmcc_sign, raster)
