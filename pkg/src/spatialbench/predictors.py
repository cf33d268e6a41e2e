"""Seven spatial predictors behind one fit/predict interface.

Tags: TSK (stationary kriging), SSP (smoothing spline), EDW (exponential
distance weighting), FRK (fixed-rank kriging), MPP (modified predictive
process), SPD (SPDE/Markov-field approximation), LTK (lattice kriging).
`fit(tag, train, ...)` returns a FittedPredictor; `load(path)` restores one
saved with `.save(path)`. An extra tag OLS (trend-only least squares) serves
as a no-spatial-structure baseline and is not part of the canonical set.

All methods share the trend x(u)'beta (default intercept + latitude) and a
known measurement-error variance sigma_eps_sq * weight_i per point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from . import config as cfg
from .data_model import SpatialDataset, TrendSpec, location_keys
from .estimation import (ExponentialMLResult, GibbsConfig, InverseGammaPrior,
                         MPPPriors, em_low_rank, exponential_ml, fit_ols,
                         loocv_select_theta, mpp_gibbs, tps_system_solve)
from .kernels import (BasisGrid, ExponentialCov, bisquare_design,
                      pairwise_distances, tps_radial, wendland_design)
from .linalg import (LowRankPlusDiag, SparseLowRank, chol_factor_jittered,
                     gls_beta, sparse_spd_factor)

SERIAL_FORMAT = "spatialbench-fitted"
SERIAL_VERSION = 1


class UnknownMethodError(ValueError):
    pass


class PredictorSizeError(ValueError):
    """Dense-solver method asked to handle more points than its limit."""


class PredictorDomainError(ValueError):
    """Prediction location falls outside the fitted mesh/lattice domain."""


@dataclass(frozen=True)
class PredictionResult:
    """Point predictions and (when the method provides one) variances."""

    mean: np.ndarray
    variance: np.ndarray | None

    @property
    def has_variance(self) -> bool:
        return self.variance is not None


_REGISTRY: dict[str, type] = {}


def _register(tag):
    def deco(klass):
        klass.tag = tag
        _REGISTRY[tag] = klass
        return klass
    return deco


def _eps_var(train: SpatialDataset, sigma_eps_sq: float) -> np.ndarray:
    w = train.weights if train.weights is not None else np.ones(train.n)
    return sigma_eps_sq * w


def _resolve_bbox(train: SpatialDataset, domain_bbox) -> tuple:
    if domain_bbox is None:
        return train.bbox()
    lon_min, lon_max, lat_min, lat_max = (float(v) for v in domain_bbox)
    tb = train.bbox()
    return (min(lon_min, tb[0]), max(lon_max, tb[1]),
            min(lat_min, tb[2]), max(lat_max, tb[3]))


class FittedPredictor:
    """Base class: serialization envelope and shared attributes."""

    tag = "?"

    def __init__(self, train: SpatialDataset, trend: TrendSpec, sigma_eps_sq: float):
        self.train = train
        self.trend = trend
        self.sigma_eps_sq = float(sigma_eps_sq)
        self.eps_var = _eps_var(train, sigma_eps_sq)

    # -- interface -----------------------------------------------------------
    def predict(self, lons, lats) -> PredictionResult:
        raise NotImplementedError

    def _params_dict(self) -> dict:
        raise NotImplementedError

    def params_summary(self) -> dict:
        """Small human-readable parameter summary (for CLI output)."""
        return {}

    # -- persistence ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": SERIAL_FORMAT,
            "version": SERIAL_VERSION,
            "tag": self.tag,
            "sigma_eps_sq": self.sigma_eps_sq,
            "trend": self.trend.to_dict(),
            "train": self.train.to_dict(),
            "params": self._params_dict(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def from_dict(d: dict) -> "FittedPredictor":
        if d.get("format") != SERIAL_FORMAT:
            raise ValueError("not a fitted-predictor document")
        if d.get("version") != SERIAL_VERSION:
            raise ValueError(f"unsupported version {d.get('version')!r}")
        tag = d["tag"]
        if tag not in _REGISTRY:
            raise UnknownMethodError(f"unknown method tag {tag!r}")
        train = SpatialDataset.from_dict(d["train"])
        trend = TrendSpec.from_dict(d["trend"])
        return _REGISTRY[tag]._from_params(train, trend, d["sigma_eps_sq"],
                                           d["params"])


def load(path) -> FittedPredictor:
    with open(path) as fh:
        return FittedPredictor.from_dict(json.load(fh))


def _check_dense_limit(tag: str, n: int, limit: int):
    if n > limit:
        raise PredictorSizeError(
            f"{tag} builds dense n x n systems and is capped at n={limit}; "
            f"got n={n}. Use FRK/MPP/SPD/LTK for datasets this large."
        )


# ---------------------------------------------------------------------------
# TSK: stationary kriging under an exponential covariance, ML parameters
# ---------------------------------------------------------------------------

@_register("TSK")
class TSKPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, beta, sigma0_sq, theta,
                 sigma_xi_sq):
        super().__init__(train, trend, sigma_eps_sq)
        self.beta = np.asarray(beta, float)
        self.sigma0_sq = float(sigma0_sq)
        self.theta = float(theta)
        self.sigma_xi_sq = float(sigma_xi_sq)
        self._cov = ExponentialCov(self.sigma0_sq, self.theta)
        h = pairwise_distances(train.lons, train.lats, train.lons, train.lats)
        diag = self.sigma_xi_sq + self.eps_var
        Sigma = self._cov(h) + np.diag(diag)
        if np.all(diag == 0):
            # Pure process covariance; a relative ridge keeps the solve stable
            # without visibly perturbing predictions.
            Sigma = Sigma + 1e-12 * self.sigma0_sq * np.eye(train.n)
        self._factor, _ = chol_factor_jittered(Sigma)
        X = trend.design_matrix(train.lons, train.lats)
        self._alpha = self._factor.solve(train.values - X @ self.beta)
        self._Siv_X = self._factor.solve(X)
        XtSivX = X.T @ self._Siv_X
        self._XtSivX_factor, _ = chol_factor_jittered(XtSivX)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        _check_dense_limit("TSK", train.n, opts["dense_limit"])
        X = trend.design_matrix(train.lons, train.lats)
        res: ExponentialMLResult = exponential_ml(
            train.lons, train.lats, train.values, X,
            _eps_var(train, sigma_eps_sq),
            fix_sigma_xi_sq=opts.get("fix_sigma_xi_sq"))
        return cls(train, trend, sigma_eps_sq, res.beta, res.sigma0_sq,
                   res.theta, res.sigma_xi_sq)

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["beta"], p["sigma0_sq"],
                   p["theta"], p["sigma_xi_sq"])

    def _params_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "sigma0_sq": self.sigma0_sq,
                "theta": self.theta, "sigma_xi_sq": self.sigma_xi_sq}

    def params_summary(self) -> dict:
        return {"sigma0_sq": self.sigma0_sq, "theta": self.theta,
                "sigma_xi_sq": self.sigma_xi_sq, "beta": self.beta.tolist()}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        Xp = self.trend.design_matrix(lons, lats)
        d = pairwise_distances(lons, lats, self.train.lons, self.train.lats)
        C = self._cov(d)
        if self.sigma_xi_sq > 0:
            # The fine-scale term is white noise, so it covaries with Z only
            # at an exactly matching training location.
            idx = self.train.key_index()
            for j, key in enumerate(location_keys(lons, lats)):
                i = idx.get(key)
                if i is not None:
                    C[j, i] += self.sigma_xi_sq
        mean = Xp @ self.beta + C @ self._alpha
        t = self._factor.solve(C.T)               # (n, m)
        cSc = np.einsum("jn,nj->j", C, t)
        m_vec = Xp.T - self.train_X().T @ t       # (p, m)
        corr = np.einsum("pj,pj->j", m_vec, self._XtSivX_factor.solve(m_vec))
        var = self.sigma0_sq + self.sigma_xi_sq - cSc + corr
        return PredictionResult(mean, np.maximum(var, 0.0))

    def train_X(self) -> np.ndarray:
        return self.trend.design_matrix(self.train.lons, self.train.lats)


# ---------------------------------------------------------------------------
# SSP: thin-plate smoothing spline, leave-one-out smoothing selection
# ---------------------------------------------------------------------------

@_register("SSP")
class SSPPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, theta, coef, beta):
        super().__init__(train, trend, sigma_eps_sq)
        self.theta = float(theta)
        self.coef = np.asarray(coef, float)
        self.beta = np.asarray(beta, float)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        _check_dense_limit("SSP", train.n, opts["dense_limit"])
        h = pairwise_distances(train.lons, train.lats, train.lons, train.lats)
        W = tps_radial(h)
        X = trend.design_matrix(train.lons, train.lats)
        theta, _ = loocv_select_theta(W, X, train.values, opts["theta_grid"])
        coef, beta = tps_system_solve(W, X, train.values, theta)
        return cls(train, trend, sigma_eps_sq, theta, coef, beta)

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["theta"], p["coef"], p["beta"])

    def _params_dict(self) -> dict:
        return {"theta": self.theta, "coef": self.coef.tolist(),
                "beta": self.beta.tolist()}

    def params_summary(self) -> dict:
        return {"theta": self.theta, "beta": self.beta.tolist()}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        Xp = self.trend.design_matrix(lons, lats)
        d = pairwise_distances(lons, lats, self.train.lons, self.train.lats)
        mean = Xp @ self.beta + tps_radial(d) @ self.coef
        return PredictionResult(mean, None)


# ---------------------------------------------------------------------------
# EDW: negative-exponential distance weighting
# ---------------------------------------------------------------------------

@_register("EDW")
class EDWPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, theta):
        super().__init__(train, trend, sigma_eps_sq)
        if theta <= 0:
            raise ValueError("EDW theta must be positive")
        self.theta = float(theta)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        return cls(train, trend, sigma_eps_sq, opts["theta"])

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["theta"])

    def _params_dict(self) -> dict:
        return {"theta": self.theta}

    def params_summary(self) -> dict:
        return {"theta": self.theta}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        d = pairwise_distances(lons, lats, self.train.lons, self.train.lats)
        # Shift by the row minimum before exponentiating so far-field points
        # do not underflow every weight to zero.
        shifted = d - d.min(axis=1, keepdims=True)
        w = np.exp(-self.theta * shifted)
        mean = (w @ self.train.values) / w.sum(axis=1)
        return PredictionResult(mean, None)


# ---------------------------------------------------------------------------
# FRK: fixed-rank kriging on bisquare basis grids, EM-estimated K and nugget
# ---------------------------------------------------------------------------

@_register("FRK")
class FRKPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, beta, K, sigma_xi_sq,
                 grids_spec, width_factor):
        super().__init__(train, trend, sigma_eps_sq)
        self.beta = np.asarray(beta, float)
        self.K = np.asarray(K, float)
        self.sigma_xi_sq = float(sigma_xi_sq)
        self.grids_spec = [tuple(g) for g in grids_spec]  # (bbox..., nx, ny)
        self.width_factor = float(width_factor)
        self.grids = [BasisGrid.cover(g[:4], g[4], g[5]) for g in self.grids_spec]
        self.r = sum(g.r for g in self.grids)
        S = bisquare_design(train.lons, train.lats, self.grids, self.width_factor)
        self._S = S
        d = self.sigma_xi_sq + self.eps_var
        self._sigma = LowRankPlusDiag(S, self.K, d)
        X = trend.design_matrix(train.lons, train.lats)
        R = train.values - X @ self.beta
        self._w = self._sigma.solve(R)
        self._g1 = self.K @ (S.T @ self._w)
        siv_S = self._sigma.solve(S)
        self._T = S.T @ siv_S                       # S' Sigma^-1 S
        self._Q2 = self.K @ self._T @ self.K
        self._G = siv_S @ self.K                    # Sigma^-1 S K, (n, r)
        B = self._sigma._Dinv_S
        MB = self._sigma.M_chol.solve(B.T)          # M^-1 B', (r, n)
        self._diag_sigma_inv = 1.0 / d - np.einsum("ij,ji->i", B, MB)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        bbox = _resolve_bbox(train, domain_bbox)
        grids_spec = [bbox + (int(nx), int(ny)) for nx, ny in opts["resolutions"]]
        grids = [BasisGrid.cover(bbox, nx, ny) for _, _, _, _, nx, ny in
                 [g for g in grids_spec]]
        S = bisquare_design(train.lons, train.lats, grids, opts["width_factor"])
        X = trend.design_matrix(train.lons, train.lats)
        beta0 = fit_ols(X, train.values)
        R = train.values - X @ beta0
        var0 = max(float(np.var(R)), 1e-10)
        r = S.shape[1]
        eps_var = _eps_var(train, sigma_eps_sq)
        em = em_low_rank(R, S, eps_var, K0=0.5 * var0 * np.eye(r),
                         sigma_xi_sq0=0.25 * var0,
                         max_iter=opts["em_max_iter"], tol=opts["em_tol"])
        sigma = LowRankPlusDiag(S, em.K, em.sigma_xi_sq + eps_var)
        beta = gls_beta(X, train.values, sigma.solve)
        return cls(train, trend, sigma_eps_sq, beta, em.K, em.sigma_xi_sq,
                   grids_spec, opts["width_factor"])

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["beta"], p["K"],
                   p["sigma_xi_sq"], p["grids_spec"], p["width_factor"])

    def _params_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "K": self.K.tolist(),
                "sigma_xi_sq": self.sigma_xi_sq,
                "grids_spec": [list(g) for g in self.grids_spec],
                "width_factor": self.width_factor}

    def params_summary(self) -> dict:
        return {"r": self.r, "sigma_xi_sq": self.sigma_xi_sq,
                "beta": self.beta.tolist()}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        Xp = self.trend.design_matrix(lons, lats)
        a = bisquare_design(lons, lats, self.grids, self.width_factor)  # (m, r)
        mean = Xp @ self.beta + a @ self._g1
        var = (np.einsum("ij,ij->i", a @ self.K, a) + self.sigma_xi_sq
               - np.einsum("ij,ij->i", a @ self._Q2, a))
        if self.sigma_xi_sq > 0:
            idx = self.train.key_index()
            for j, key in enumerate(location_keys(lons, lats)):
                i = idx.get(key)
                if i is None:
                    continue
                mean[j] += self.sigma_xi_sq * self._w[i]
                var[j] -= (2.0 * self.sigma_xi_sq * float(self._G[i] @ a[j])
                           + self.sigma_xi_sq ** 2 * self._diag_sigma_inv[i])
        return PredictionResult(mean, np.maximum(var, 0.0))


# ---------------------------------------------------------------------------
# MPP: modified predictive process, Metropolis-within-Gibbs posterior
# ---------------------------------------------------------------------------

def _knot_grid(bbox, nx, ny) -> tuple[np.ndarray, np.ndarray]:
    """Knots at the cell centers of an nx-by-ny partition of the box."""
    lon_min, lon_max, lat_min, lat_max = bbox
    gx = lon_min + (np.arange(nx) + 0.5) * (lon_max - lon_min) / nx
    gy = lat_min + (np.arange(ny) + 0.5) * (lat_max - lat_min) / ny
    LON, LAT = np.meshgrid(gx, gy, indexing="ij")
    return LON.ravel(), LAT.ravel()


@_register("MPP")
class MPPPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, knot_lons, knot_lats,
                 samples, kappa_accept_rate, prediction_seed):
        super().__init__(train, trend, sigma_eps_sq)
        self.knot_lons = np.asarray(knot_lons, float)
        self.knot_lats = np.asarray(knot_lats, float)
        self.samples = {k: np.asarray(v, float) for k, v in samples.items()}
        self.kappa_accept_rate = float(kappa_accept_rate)
        self.prediction_seed = int(prediction_seed)
        self._h_knots = pairwise_distances(self.knot_lons, self.knot_lats,
                                           self.knot_lons, self.knot_lats)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        bbox = _resolve_bbox(train, domain_bbox)
        knot_lons, knot_lats = _knot_grid(bbox, *opts["knots"])
        X = trend.design_matrix(train.lons, train.lats)
        w = train.weights if train.weights is not None else np.ones(train.n)
        priors = opts["priors"]
        if priors == "auto":
            resid_var = max(float(np.var(train.values - X @ fit_ols(X, train.values))),
                            1e-8)
            pts = np.column_stack((train.lons, train.lats))
            nn = cKDTree(pts).query(pts, k=2)[0][:, 1]
            bb = train.bbox()
            d_max = math.hypot(bb[1] - bb[0], bb[3] - bb[2])
            d_min = max(float(np.min(nn[nn > 0])), 1e-4 * d_max)
            priors = MPPPriors(
                sigma_nu_sq=InverseGammaPrior(2.0, resid_var / 2.0),
                sigma_eps_sq=InverseGammaPrior(2.0, sigma_eps_sq),
                kappa_lo=3.0 / d_max, kappa_hi=3.0 / d_min)
        gibbs = GibbsConfig(n_iter=opts["n_iter"], burn_in=opts["burn_in"],
                            thin=opts["thin"], kappa_step=opts["kappa_step"],
                            seed=0 if seed is None else int(seed))
        res = mpp_gibbs(train.values, X, train.lons, train.lats,
                        knot_lons, knot_lats, w, priors, gibbs,
                        fix_sigma_eps_sq=opts.get("fix_sigma_eps_sq"))
        samples = {"beta": res.beta, "eta": res.eta, "kappa": res.kappa,
                   "sigma_nu_sq": res.sigma_nu_sq,
                   "sigma_eps_sq": res.sigma_eps_sq}
        return cls(train, trend, sigma_eps_sq, knot_lons, knot_lats, samples,
                   res.kappa_accept_rate, opts["prediction_seed"])

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["knot_lons"], p["knot_lats"],
                   p["samples"], p["kappa_accept_rate"], p["prediction_seed"])

    def _params_dict(self) -> dict:
        return {"knot_lons": self.knot_lons.tolist(),
                "knot_lats": self.knot_lats.tolist(),
                "samples": {k: v.tolist() for k, v in self.samples.items()},
                "kappa_accept_rate": self.kappa_accept_rate,
                "prediction_seed": self.prediction_seed}

    def params_summary(self) -> dict:
        return {"r": self.knot_lons.size,
                "n_samples": int(self.samples["kappa"].size),
                "kappa_accept_rate": self.kappa_accept_rate,
                "posterior_mean_kappa": float(np.mean(self.samples["kappa"])),
                "posterior_mean_sigma_nu_sq": float(np.mean(self.samples["sigma_nu_sq"])),
                "posterior_mean_sigma_eps_sq": float(np.mean(self.samples["sigma_eps_sq"]))}

    def predict(self, lons, lats, rng=None) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        m = lons.size
        if rng is None:
            rng = np.random.default_rng(self.prediction_seed)
        Xp = self.trend.design_matrix(lons, lats)
        beta = self.samples["beta"]
        eta = self.samples["eta"]
        kappa = self.samples["kappa"]
        nu = self.samples["sigma_nu_sq"]
        eps = self.samples["sigma_eps_sq"]
        L = kappa.size
        draws = np.empty((L, m))
        h_pred = pairwise_distances(lons, lats, self.knot_lons, self.knot_lats)
        # One knot-correlation factorization per distinct kappa in the chain.
        for kap in np.unique(kappa):
            idx = np.flatnonzero(kappa == kap)
            factor, _ = chol_factor_jittered(np.exp(-kap * self._h_knots))
            U = np.exp(-kap * h_pred)
            S_u = factor.solve(U.T).T
            vtil = np.maximum(1.0 - np.einsum("ij,ij->i", U, S_u), 1e-10)
            base = Xp @ beta[idx].T + S_u @ eta[idx].T        # (m, |idx|)
            noise_sd = np.sqrt(np.outer(vtil, nu[idx]) + eps[idx][None, :])
            draws[idx] = (base + noise_sd * rng.standard_normal((m, idx.size))).T
        mean = draws.mean(axis=0)
        var = draws.var(axis=0, ddof=1)
        # An observed location has a degenerate posterior: the datum itself.
        key_idx = self.train.key_index()
        for j, key in enumerate(location_keys(lons, lats)):
            i = key_idx.get(key)
            if i is not None:
                mean[j] = self.train.values[i]
                var[j] = 0.0
        return PredictionResult(mean, var)


# ---------------------------------------------------------------------------
# Triangulated-mesh helpers shared by the Markov-field predictor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriMesh:
    """Regular rectangular grid split into right triangles (SW-NE diagonals)."""

    xs: np.ndarray
    ys: np.ndarray

    @property
    def nx(self) -> int:
        return self.xs.size

    @property
    def ny(self) -> int:
        return self.ys.size

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @classmethod
    def cover(cls, bbox, nx, ny, margin_cells=0) -> "TriMesh":
        lon_min, lon_max, lat_min, lat_max = bbox
        hx = (lon_max - lon_min) / (nx - 1)
        hy = (lat_max - lat_min) / (ny - 1)
        xs = lon_min + hx * np.arange(-margin_cells, nx + margin_cells)
        ys = lat_min + hy * np.arange(-margin_cells, ny + margin_cells)
        return cls(xs, ys)

    def node_index(self, i, j):
        return i * self.ny + j

    def triangles(self) -> np.ndarray:
        """(2 * cells, 3) vertex indices; each cell split along SW-NE."""
        nx, ny = self.nx, self.ny
        i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
        v00 = (i * ny + j).ravel()
        v10 = ((i + 1) * ny + j).ravel()
        v01 = (i * ny + j + 1).ravel()
        v11 = ((i + 1) * ny + j + 1).ravel()
        t1 = np.column_stack((v00, v10, v11))
        t2 = np.column_stack((v00, v11, v01))
        return np.vstack((t1, t2))

    def node_coords(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack((X.ravel(), Y.ravel()))


def fem_matrices(mesh: TriMesh) -> tuple[np.ndarray, sparse.csr_matrix]:
    """Lumped mass diagonal c and stiffness matrix G for piecewise linears.

    c_i = (1/3) * total area of triangles containing node i; G assembles the
    per-triangle gradient inner products A * grad(phi_i) . grad(phi_j).
    """
    coords = mesh.node_coords()
    tris = mesh.triangles()
    p = coords[tris]                       # (T, 3, 2)
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    cross = e2[:, 0] * (-e1[:, 1]) - e2[:, 1] * (-e1[:, 0])
    area = 0.5 * np.abs(cross)
    edges = np.stack((e0, e1, e2), axis=1)  # (T, 3, 2)
    Ke = np.einsum("tik,tjk->tij", edges, edges) / (4.0 * area)[:, None, None]
    c = np.zeros(mesh.n_nodes)
    np.add.at(c, tris.ravel(), np.repeat(area / 3.0, 3))
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    G = sparse.csr_matrix((Ke.ravel(), (rows, cols)),
                          shape=(mesh.n_nodes, mesh.n_nodes))
    return c, G


def fem_projection(lons, lats, mesh: TriMesh) -> sparse.csr_matrix:
    """Barycentric interpolation weights from mesh nodes to points.

    Raises PredictorDomainError for points outside the meshed box.
    """
    lons = np.asarray(lons, float)
    lats = np.asarray(lats, float)
    xs, ys = mesh.xs, mesh.ys
    if (lons.min() < xs[0] - 1e-12 or lons.max() > xs[-1] + 1e-12
            or lats.min() < ys[0] - 1e-12 or lats.max() > ys[-1] + 1e-12):
        raise PredictorDomainError("prediction location outside the fitted mesh")
    hx = xs[1] - xs[0]
    hy = ys[1] - ys[0]
    tx = np.clip((lons - xs[0]) / hx, 0.0, mesh.nx - 1 - 1e-12)
    ty = np.clip((lats - ys[0]) / hy, 0.0, mesh.ny - 1 - 1e-12)
    ix = tx.astype(int)
    iy = ty.astype(int)
    u = tx - ix
    v = ty - iy
    ny = mesh.ny
    v00 = ix * ny + iy
    v10 = (ix + 1) * ny + iy
    v01 = ix * ny + iy + 1
    v11 = (ix + 1) * ny + iy + 1
    lower = u >= v  # triangle (v00, v10, v11); else (v00, v11, v01)
    rows = np.repeat(np.arange(lons.size), 3)
    cols = np.where(lower[:, None],
                    np.column_stack((v00, v10, v11)),
                    np.column_stack((v00, v11, v01))).ravel()
    w_lower = np.column_stack((1.0 - u, u - v, v))
    w_upper = np.column_stack((1.0 - v, u, v - u))
    data = np.where(lower[:, None], w_lower, w_upper).ravel()
    return sparse.csr_matrix((data, (rows, cols)), shape=(lons.size, mesh.n_nodes))


def _posterior_predict(factor, mu, S_pred, Xp, beta, chunk=256):
    """Mean x'beta + S mu and variance diag(S P^-1 S') in column chunks."""
    mean = Xp @ beta + S_pred @ mu
    m = S_pred.shape[0]
    var = np.empty(m)
    St = sparse.csc_matrix(S_pred.T)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        block = St[:, lo:hi].toarray()
        sol = factor.solve(block)
        var[lo:hi] = np.einsum("ij,ij->j", block, sol)
    return mean, np.maximum(var, 0.0)


@_register("SPD")
class SPDPredictor(FittedPredictor):
    """Markov-field approximation on a triangulated grid.

    The latent field has sparse precision (1/sigma_nu^2) * Qt with
    Qt = (kappa^2 C + G)' C^-1 (kappa^2 C + G); data load onto nodes through
    barycentric projection. (kappa, lambda = sigma_eps_hat^2 / sigma_nu^2)
    are chosen on a profile-likelihood grid with sigma_nu^2 closed-form.
    """

    def __init__(self, train, trend, sigma_eps_sq, beta, kappa, sigma_nu_sq,
                 sigma_noise_sq, mesh_spec):
        super().__init__(train, trend, sigma_eps_sq)
        self.beta = np.asarray(beta, float)
        self.kappa = float(kappa)
        self.sigma_nu_sq = float(sigma_nu_sq)
        self.sigma_noise_sq = float(sigma_noise_sq)
        self.mesh_spec = tuple(mesh_spec)       # bbox(4), nx, ny, margin_cells
        self.mesh = TriMesh.cover(self.mesh_spec[:4], *self.mesh_spec[4:])
        c, G = fem_matrices(self.mesh)
        self._Qt = _spde_precision(self.kappa, c, G)
        A = fem_projection(train.lons, train.lats, self.mesh)
        X = trend.design_matrix(train.lons, train.lats)
        R = train.values - X @ self.beta
        P = (self._Qt / self.sigma_nu_sq
             + (A.T @ A) / self.sigma_noise_sq).tocsc()
        self._P_factor = sparse_spd_factor(P)
        self._mu = self._P_factor.solve((A.T @ R) / self.sigma_noise_sq)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        bbox = _resolve_bbox(train, domain_bbox)
        if opts["mesh_nodes"] == "auto":
            side = int(np.clip(math.ceil(math.sqrt(train.n)), 8, 120))
            nx = ny = side
        else:
            nx, ny = (int(v) for v in opts["mesh_nodes"])
        margin = int(opts["margin_cells"])
        mesh_spec = bbox + (nx, ny, margin)
        mesh = TriMesh.cover(bbox, nx, ny, margin)
        c, G = fem_matrices(mesh)
        A = fem_projection(train.lons, train.lats, mesh)
        X = trend.design_matrix(train.lons, train.lats)
        beta0 = fit_ols(X, train.values)
        R = train.values - X @ beta0
        n = train.n

        h = max(mesh.xs[1] - mesh.xs[0], mesh.ys[1] - mesh.ys[0])
        d_max = math.hypot(bbox[1] - bbox[0], bbox[3] - bbox[2])
        kap_lo = math.sqrt(8.0) / (0.7 * d_max)
        kap_hi = max(math.sqrt(8.0) / (2.0 * h), kap_lo * 1.001)
        kappas = np.geomspace(kap_lo, kap_hi, int(opts["kappa_grid_size"]))
        lambdas = np.asarray(opts["lambda_grid"], float)

        w = train.weights if train.weights is not None else np.ones(n)
        best = None
        for kap in kappas:
            Qt = _spde_precision(kap, c, G)
            qt_logdet = (2.0 * sparse_spd_factor(_kc_plus_g(kap, c, G)).logdet()
                         - float(np.sum(np.log(c))))
            for lam in lambdas:
                unit = SparseLowRank(A, Qt, qt_logdet, lam * w)
                quad = unit.quad_form(R)
                s_nu = max(quad / n, 1e-12)
                nll = 0.5 * (n * math.log(2 * math.pi) + n * math.log(s_nu)
                             + unit.logdet() + n)
                if best is None or nll < best[0]:
                    best = (nll, kap, lam, unit, qt_logdet)
        _, kap, lam, unit, _ = best
        beta = gls_beta(X, train.values, unit.solve)
        R = train.values - X @ beta
        s_nu = max(unit.quad_form(R) / n, 1e-12)
        return cls(train, trend, sigma_eps_sq, beta, kap, s_nu, lam * s_nu,
                   mesh_spec)

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["beta"], p["kappa"],
                   p["sigma_nu_sq"], p["sigma_noise_sq"], p["mesh_spec"])

    def _params_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "kappa": self.kappa,
                "sigma_nu_sq": self.sigma_nu_sq,
                "sigma_noise_sq": self.sigma_noise_sq,
                "mesh_spec": list(self.mesh_spec)}

    def params_summary(self) -> dict:
        return {"kappa": self.kappa, "sigma_nu_sq": self.sigma_nu_sq,
                "sigma_noise_sq": self.sigma_noise_sq,
                "n_mesh_nodes": self.mesh.n_nodes, "beta": self.beta.tolist()}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        A_pred = fem_projection(lons, lats, self.mesh)
        Xp = self.trend.design_matrix(lons, lats)
        mean, var = _posterior_predict(self._P_factor, self._mu, A_pred,
                                       Xp, self.beta)
        return PredictionResult(mean, var)


def _kc_plus_g(kappa, c, G) -> sparse.csc_matrix:
    return (sparse.diags(kappa * kappa * c) + G).tocsc()


def _spde_precision(kappa, c, G) -> sparse.csc_matrix:
    """Qt = (kappa^2 C + G)' C^-1 (kappa^2 C + G), C the lumped mass diagonal."""
    KG = _kc_plus_g(kappa, c, G)
    return (KG.T @ sparse.diags(1.0 / c) @ KG).tocsc()


# ---------------------------------------------------------------------------
# LTK: lattice process with SAR precision and compact Wendland basis
# ---------------------------------------------------------------------------

def _sar_matrix(nx, ny, kappa) -> sparse.csc_matrix:
    """B = (4 + kappa^2) I - (4-neighbor lattice adjacency), node k = i*ny+j."""
    Tx = sparse.diags([np.ones(nx - 1), np.ones(nx - 1)], [-1, 1])
    Ty = sparse.diags([np.ones(ny - 1), np.ones(ny - 1)], [-1, 1])
    adj = sparse.kron(Tx, sparse.identity(ny)) + sparse.kron(sparse.identity(nx), Ty)
    return ((4.0 + kappa * kappa) * sparse.identity(nx * ny) - adj).tocsc()


@_register("LTK")
class LTKPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, beta, sigma_eta_sq, kappa,
                 lattice_spec, support):
        super().__init__(train, trend, sigma_eps_sq)
        self.beta = np.asarray(beta, float)
        self.sigma_eta_sq = float(sigma_eta_sq)
        self.kappa = float(kappa)
        self.lattice_spec = tuple(lattice_spec)  # bbox(4), nx, ny, margin_cells
        self.support = float(support)
        self.grid, self._nx_t, self._ny_t = _ltk_lattice(self.lattice_spec)
        S = wendland_design(train.lons, train.lats, self.grid, self.support)
        B = _sar_matrix(self._nx_t, self._ny_t, self.kappa)
        Kinv = (B.T @ B) / self.sigma_eta_sq
        X = trend.design_matrix(train.lons, train.lats)
        R = train.values - X @ self.beta
        P = (Kinv + (S.T @ sparse.diags(1.0 / self.eps_var) @ S)).tocsc()
        self._P_factor = sparse_spd_factor(P)
        self._mu = self._P_factor.solve(S.T @ (R / self.eps_var))

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        bbox = _resolve_bbox(train, domain_bbox)
        if opts["lattice_nodes"] == "auto":
            side = int(np.clip(math.ceil(math.sqrt(train.n)), 8, 120))
            nx = ny = side
        else:
            nx, ny = (int(v) for v in opts["lattice_nodes"])
        margin = int(opts["margin_cells"])
        lattice_spec = bbox + (nx, ny, margin)
        grid, nx_t, ny_t = _ltk_lattice(lattice_spec)
        support = opts["support_factor"] * grid.spacing
        S = wendland_design(train.lons, train.lats, grid, support)
        X = trend.design_matrix(train.lons, train.lats)
        beta0 = fit_ols(X, train.values)
        R = train.values - X @ beta0
        eps_var = _eps_var(train, sigma_eps_sq)
        n = train.n
        var0 = max(float(np.var(R)), 1e-10)
        r = grid.r

        def nll(log_params):
            s_eta = math.exp(log_params[0])
            kap = math.exp(log_params[1])
            if not (1e-12 < s_eta < 1e12) or not (1e-6 < kap < 1e3):
                return 1e12
            B = _sar_matrix(nx_t, ny_t, kap)
            kinv_logdet = (2.0 * sparse_spd_factor(B).logdet()
                           - r * math.log(s_eta))
            try:
                model = SparseLowRank(S, (B.T @ B) / s_eta, kinv_logdet, eps_var)
            except np.linalg.LinAlgError:
                return 1e12
            return 0.5 * (n * math.log(2 * math.pi) + model.logdet()
                          + model.quad_form(R))

        decades = float(opts["sigma_eta_sq_grid_decades"])
        s_grid = var0 * np.logspace(-decades, decades,
                                    int(opts["sigma_eta_sq_grid_size"]))
        k_grid = np.asarray(opts["kappa_grid"], float)
        best = None
        for s_eta in s_grid:
            for kap in k_grid:
                val = nll([math.log(s_eta), math.log(kap)])
                if best is None or val < best[0]:
                    best = (val, s_eta, kap)
        _, s_eta, kap = best
        if opts["refine"]:
            res = minimize(nll, np.log([s_eta, kap]), method="Nelder-Mead",
                           options={"xatol": 1e-4, "fatol": 1e-6,
                                    "maxiter": 200})
            if np.isfinite(res.fun) and res.fun <= best[0]:
                s_eta, kap = (math.exp(res.x[0]), math.exp(res.x[1]))
        B = _sar_matrix(nx_t, ny_t, kap)
        kinv_logdet = 2.0 * sparse_spd_factor(B).logdet() - r * math.log(s_eta)
        model = SparseLowRank(S, (B.T @ B) / s_eta, kinv_logdet, eps_var)
        beta = gls_beta(X, train.values, model.solve)
        return cls(train, trend, sigma_eps_sq, beta, s_eta, kap, lattice_spec,
                   support)

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["beta"], p["sigma_eta_sq"],
                   p["kappa"], p["lattice_spec"], p["support"])

    def _params_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "sigma_eta_sq": self.sigma_eta_sq,
                "kappa": self.kappa, "lattice_spec": list(self.lattice_spec),
                "support": self.support}

    def params_summary(self) -> dict:
        return {"sigma_eta_sq": self.sigma_eta_sq, "kappa": self.kappa,
                "r": self.grid.r, "support": self.support,
                "beta": self.beta.tolist()}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        S_pred = wendland_design(lons, lats, self.grid, self.support)
        Xp = self.trend.design_matrix(lons, lats)
        mean, var = _posterior_predict(self._P_factor, self._mu, S_pred,
                                       Xp, self.beta)
        return PredictionResult(mean, var)


def _ltk_lattice(lattice_spec) -> tuple[BasisGrid, int, int]:
    bbox = lattice_spec[:4]
    nx, ny, margin = (int(v) for v in lattice_spec[4:])
    hx = (bbox[1] - bbox[0]) / (nx - 1)
    hy = (bbox[3] - bbox[2]) / (ny - 1)
    nx_t = nx + 2 * margin
    ny_t = ny + 2 * margin
    grid = BasisGrid.cover((bbox[0] - margin * hx, bbox[1] + margin * hx,
                            bbox[2] - margin * hy, bbox[3] + margin * hy),
                           nx_t, ny_t)
    return grid, nx_t, ny_t


# ---------------------------------------------------------------------------
# OLS: trend-only baseline (not part of the canonical method set)
# ---------------------------------------------------------------------------

@_register("OLS")
class TrendOnlyPredictor(FittedPredictor):
    def __init__(self, train, trend, sigma_eps_sq, beta):
        super().__init__(train, trend, sigma_eps_sq)
        self.beta = np.asarray(beta, float)

    @classmethod
    def fit(cls, train, trend, sigma_eps_sq, opts, domain_bbox=None, seed=None):
        X = trend.design_matrix(train.lons, train.lats)
        return cls(train, trend, sigma_eps_sq, fit_ols(X, train.values))

    @classmethod
    def _from_params(cls, train, trend, sigma_eps_sq, p):
        return cls(train, trend, sigma_eps_sq, p["beta"])

    def _params_dict(self) -> dict:
        return {"beta": self.beta.tolist()}

    def params_summary(self) -> dict:
        return {"beta": self.beta.tolist()}

    def predict(self, lons, lats) -> PredictionResult:
        lons = np.atleast_1d(np.asarray(lons, float))
        lats = np.atleast_1d(np.asarray(lats, float))
        return PredictionResult(self.trend.design_matrix(lons, lats) @ self.beta,
                                None)


# ---------------------------------------------------------------------------

def fit(tag: str, train: SpatialDataset, *, trend: TrendSpec | None = None,
        sigma_eps_sq: float | None = None, options: dict | None = None,
        domain_bbox=None, seed: int | None = None) -> FittedPredictor:
    """Fit one method by tag. `options` overrides that method's defaults;
    `domain_bbox` widens basis/mesh coverage beyond the training extent."""
    if tag not in _REGISTRY:
        raise UnknownMethodError(
            f"unknown method tag {tag!r}; choose from {sorted(_REGISTRY)}")
    defaults = cfg.defaults()
    if sigma_eps_sq is None:
        sigma_eps_sq = defaults["sigma_eps_sq"]
    opts = dict(defaults.get(tag, {}))
    opts["dense_limit"] = defaults["dense_limit"]
    if options:
        opts.update(options)
    if trend is None:
        trend = TrendSpec()
    return _REGISTRY[tag].fit(train, trend, float(sigma_eps_sq), opts,
                              domain_bbox=domain_bbox, seed=seed)
