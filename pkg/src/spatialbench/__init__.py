"""Spatial prediction toolkit: seven interpolators, one benchmark harness."""

from .data_model import (HoldoutSplit, Location, SimulationConfig,
                         SpatialDataset, TrendSpec, load_csv, save_csv,
                         simulate, split_holdout)
from .evaluation import (RasterSpec, compare, evaluate_method,
                         lag1_semivariogram, meter, pmcc, rste)
from .predictors import FittedPredictor, PredictionResult, fit, load

__version__ = "0.1.0"

__all__ = [
    "FittedPredictor", "HoldoutSplit", "Location", "PredictionResult",
    "RasterSpec", "SimulationConfig", "SpatialDataset", "TrendSpec",
    "compare", "evaluate_method", "fit", "lag1_semivariogram", "load",
    "load_csv", "meter", "pmcc", "rste", "save_csv", "simulate",
    "split_holdout",
]
