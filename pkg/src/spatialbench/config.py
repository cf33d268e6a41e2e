"""Default settings for predictors and the benchmark harness.

`defaults()` returns the full settings tree (what `show-defaults` prints);
`merge` layers a user config file over it. Values marked "auto" are resolved
at fit time from the data (documented per method below).
"""

from __future__ import annotations

import copy
import json

# Known measurement-error variance sigma_eps^2, in ppm^2. Per-point scaling
# V(u) comes from the dataset's optional weight column (default 1).
DEFAULT_SIGMA_EPS_SQ = 5.6062

METHOD_TAGS = ("TSK", "SSP", "EDW", "FRK", "MPP", "SPD", "LTK")

_DEFAULTS = {
    "sigma_eps_sq": DEFAULT_SIGMA_EPS_SQ,
    "seed": 0,
    "split_fraction": 0.2,
    "methods": list(METHOD_TAGS),
    "pmcc_sign": "paper",
    "raster_step": 1.0,
    "trend": {"covariates": ["intercept", "lat"]},
    # Dense-solver methods refuse datasets larger than this.
    "dense_limit": 3000,
    "TSK": {
        # None lets ML estimate the fine-scale variance; a number pins it.
        "fix_sigma_xi_sq": None,
    },
    "SSP": {
        # Smoothing parameter candidates for leave-one-out selection, in the
        # same units as the d^2 log d radial matrix.
        "theta_grid": [10.0 ** e for e in range(-3, 7)],
    },
    "EDW": {
        "theta": 1.0,
    },
    "FRK": {
        # Bisquare center grids, coarse to fine; r = total center count.
        "resolutions": [[4, 4], [9, 9]],
        "width_factor": 1.5,
        "em_max_iter": 200,
        "em_tol": 1e-8,
    },
    "MPP": {
        "knots": [8, 8],
        "n_iter": 2000,
        "burn_in": 500,
        "thin": 1,
        "kappa_step": 0.3,
        # "auto": IG(2, var(resid)/2) for sigma_nu^2, IG(2, sigma_eps_sq)
        # for sigma_eps^2, kappa ~ U(3/d_max, 3/d_min).
        "priors": "auto",
        # None samples sigma_eps^2; a number holds it fixed.
        "fix_sigma_eps_sq": None,
        "prediction_seed": 1,
    },
    "SPD": {
        # "auto": roughly one mesh node per data point, ceil(sqrt(n)) per
        # axis, clipped to [8, 120].
        "mesh_nodes": "auto",
        "margin_cells": 2,
        "kappa_grid_size": 8,
        "lambda_grid": [10.0 ** e for e in (-3, -2.5, -2, -1.5, -1, -0.5, 0, 0.5, 1)],
    },
    "LTK": {
        # "auto": ceil(sqrt(n)) lattice nodes per axis before margin cells
        # are added, clipped to [8, 120].
        "lattice_nodes": "auto",
        "margin_cells": 2,
        "support_factor": 2.5,
        "sigma_eta_sq_grid_decades": 2.0,
        "sigma_eta_sq_grid_size": 7,
        "kappa_grid": [0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0],
        "refine": True,
    },
}


def defaults() -> dict:
    return copy.deepcopy(_DEFAULTS)


def merge(base: dict, override: dict) -> dict:
    """Recursively overlay `override` onto `base` (returns a new dict)."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path) -> dict:
    """Read a JSON config file and overlay it on the defaults."""
    with open(path) as fh:
        user = json.load(fh)
    if not isinstance(user, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = [k for k in user if k not in _DEFAULTS]
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    return merge(_DEFAULTS, user)
