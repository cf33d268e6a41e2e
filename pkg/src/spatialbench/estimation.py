"""Parameter estimation: profile ML, spline cross-validation, EM, Gibbs MCMC.

Each routine works on detrended residuals or handles the trend internally as
documented; predictors in `predictors.py` wrap these with model assembly and
prediction formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .kernels import ExponentialCov, pairwise_distances
from .linalg import LowRankPlusDiag, chol_factor_jittered, gls_beta


def fit_ols(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Ordinary least squares trend coefficients."""
    beta, *_ = np.linalg.lstsq(np.asarray(X, float), np.asarray(z, float), rcond=None)
    return beta


# ---------------------------------------------------------------------------
# Exponential-covariance ML (used by the stationary kriging predictor)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentialMLResult:
    sigma0_sq: float
    theta: float
    sigma_xi_sq: float
    beta: np.ndarray
    neg_loglik: float
    converged: bool


def exponential_ml(lons, lats, z, X, eps_var, fix_sigma_xi_sq=None,
                   init=None) -> ExponentialMLResult:
    """Maximum likelihood for Sigma = sigma0^2 exp(-h/theta) + diag(nugget+eps).

    The trend is profiled out by generalized least squares inside the
    objective; the covariance parameters are optimized on the log scale with
    Nelder-Mead. `eps_var` is the known per-point measurement-error variance
    vector; `fix_sigma_xi_sq` pins the fine-scale variance instead of
    estimating it.
    """
    lons = np.asarray(lons, float)
    lats = np.asarray(lats, float)
    z = np.asarray(z, float)
    X = np.asarray(X, float)
    eps_var = np.asarray(eps_var, float)
    n = z.size
    h = pairwise_distances(lons, lats, lons, lats)
    d_max = float(h.max())
    if d_max <= 0:
        raise ValueError("all locations coincide")

    resid0 = z - X @ fit_ols(X, z)
    var0 = max(float(np.var(resid0)), 1e-12)
    if init is None:
        init = (var0, d_max / 10.0, 0.1 * var0)
    estimate_xi = fix_sigma_xi_sq is None

    def unpack(p):
        sigma0_sq = math.exp(p[0])
        theta = math.exp(p[1])
        xi = math.exp(p[2]) if estimate_xi else fix_sigma_xi_sq
        return sigma0_sq, theta, xi

    best = {"nll": math.inf, "params": None, "beta": None}

    def nll(p):
        sigma0_sq, theta, xi = unpack(p)
        if theta > 100.0 * d_max or theta < 1e-6 * d_max:
            return 1e12
        diag = xi + eps_var
        cov = ExponentialCov(sigma0_sq, theta)(h)
        cov = cov + np.diag(diag)
        if np.all(diag == 0):
            cov = cov + 1e-12 * sigma0_sq * np.eye(n)
        try:
            factor, _ = chol_factor_jittered(cov)
        except np.linalg.LinAlgError:
            return 1e12
        beta = gls_beta(X, z, factor.solve)
        r = z - X @ beta
        val = 0.5 * (n * math.log(2 * math.pi) + factor.logdet() + r @ factor.solve(r))
        if val < best["nll"]:
            best["nll"] = val
            best["params"] = (sigma0_sq, theta, xi)
            best["beta"] = beta
        return val

    p0 = [math.log(init[0]), math.log(init[1])]
    if estimate_xi:
        p0.append(math.log(max(init[2], 1e-10)))
    res = minimize(nll, np.array(p0), method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 2000})
    nll(res.x)  # make sure the optimizer's final point is in `best`
    sigma0_sq, theta, xi = best["params"]
    return ExponentialMLResult(sigma0_sq, theta, xi, best["beta"],
                               best["nll"], bool(res.success))


# ---------------------------------------------------------------------------
# Thin-plate spline smoothing with leave-one-out cross-validation
# ---------------------------------------------------------------------------

def tps_system_solve(W, X, z, theta):
    """Solve the penalized thin-plate system for coefficients (c, beta).

    (W + theta I) c + X beta = z subject to X' c = 0; theta > 0 required.
    """
    W = np.asarray(W, float)
    X = np.asarray(X, float)
    z = np.asarray(z, float)
    n = z.size
    M = np.linalg.inv(W + theta * np.eye(n))
    XtMX = X.T @ M @ X
    beta = np.linalg.solve(XtMX, X.T @ (M @ z))
    c = M @ (z - X @ beta)
    return c, beta


def tps_hat_matrix(W, X, theta) -> np.ndarray:
    """Hat matrix mapping data to in-sample fitted values for one theta."""
    W = np.asarray(W, float)
    X = np.asarray(X, float)
    n = W.shape[0]
    M = np.linalg.inv(W + theta * np.eye(n))
    B = np.linalg.solve(X.T @ M @ X, X.T @ M)
    XB = X @ B
    return XB + W @ M @ (np.eye(n) - XB)


def loocv_select_theta(W, X, z, theta_grid) -> tuple[float, np.ndarray]:
    """Pick the smoothing parameter minimizing the leave-one-out score.

    Score(theta) = mean_i ((z_i - yhat_i) / (1 - H_ii))^2 using the hat-matrix
    shortcut. Degenerate inputs (constant data, or H_ii -> 1 throughout the
    grid) fall back to the largest theta, i.e. maximum smoothing.
    """
    z = np.asarray(z, float)
    theta_grid = np.sort(np.asarray(theta_grid, float))
    if np.any(theta_grid <= 0):
        raise ValueError("theta grid must be positive")
    n = z.size
    scores = np.full(theta_grid.size, np.inf)
    if np.ptp(z) == 0.0:
        return float(theta_grid[-1]), scores
    for k, theta in enumerate(theta_grid):
        H = tps_hat_matrix(W, X, theta)
        denom = 1.0 - np.diag(H)
        if np.any(denom <= 1e-12):
            continue
        scores[k] = float(np.mean(((z - H @ z) / denom) ** 2))
    if not np.any(np.isfinite(scores)):
        return float(theta_grid[-1]), scores
    return float(theta_grid[int(np.argmin(scores))]), scores


# ---------------------------------------------------------------------------
# EM for the low-rank (basis-coefficient) model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EMResult:
    K: np.ndarray
    sigma_xi_sq: float
    logliks: np.ndarray
    converged: bool
    n_iter: int


def em_low_rank(R, S, eps_var, K0, sigma_xi_sq0, max_iter=200, tol=1e-8,
                xi_floor=1e-12) -> EMResult:
    """EM for R = S eta + xi + eps with eta ~ N(0, K), xi ~ N(0, sigma_xi^2 I).

    Both M-steps are the exact conditional-expectation updates, so the
    marginal log-likelihood is nondecreasing across iterations; the returned
    `logliks` has one entry per iteration evaluated at the pre-update
    parameters, plus a final entry at the converged parameters.
    """
    R = np.asarray(R, float)
    eps_var = np.asarray(eps_var, float)
    n = R.size
    K = np.array(K0, dtype=float)
    sigma_xi_sq = float(sigma_xi_sq0)
    scale = max(float(np.var(R)), 1.0)
    logliks = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = sigma_xi_sq + eps_var
        sigma = LowRankPlusDiag(S, K, d)
        ll = sigma.gaussian_loglik(R)
        logliks.append(ll)
        if len(logliks) > 1 and abs(ll - logliks[-2]) < tol * (1.0 + abs(ll)):
            converged = True
            break
        siv_R = sigma.solve(R)
        StSivR = S.T @ siv_R
        mu = K @ StSivR
        # Var(eta | R) = K - K S' Sigma^-1 S K, via Sigma^-1 S column stack.
        siv_S = sigma.solve(S.toarray() if hasattr(S, "toarray") else S)
        KSt = K @ (S.T @ siv_S)
        V = K - KSt @ K
        K = V + np.outer(mu, mu)
        K = 0.5 * (K + K.T)
        sigma_xi_sq = sigma_xi_sq + (sigma_xi_sq ** 2 / n) * (
            float(siv_R @ siv_R) - sigma.trace_inv())
        sigma_xi_sq = max(sigma_xi_sq, xi_floor * scale)
    d = sigma_xi_sq + eps_var
    logliks.append(LowRankPlusDiag(S, K, d).gaussian_loglik(R))
    return EMResult(K, sigma_xi_sq, np.asarray(logliks), converged, it)


# ---------------------------------------------------------------------------
# Metropolis-within-Gibbs for the predictive-process model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InverseGammaPrior:
    shape: float
    scale: float

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError("inverse-gamma shape/scale must be positive")

    def draw(self, rng) -> float:
        return float(self.scale / rng.gamma(self.shape))


@dataclass(frozen=True)
class MPPPriors:
    """Priors for the predictive-process sampler.

    sigma_nu_sq, sigma_eps_sq: inverse gamma; kappa (correlation decay,
    effective range 3/kappa): uniform on [kappa_lo, kappa_hi]; flat on beta.
    """

    sigma_nu_sq: InverseGammaPrior
    sigma_eps_sq: InverseGammaPrior
    kappa_lo: float
    kappa_hi: float

    def __post_init__(self):
        if not 0 < self.kappa_lo < self.kappa_hi:
            raise ValueError("need 0 < kappa_lo < kappa_hi")


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 2000
    burn_in: int = 500
    thin: int = 1
    kappa_step: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class MPPSamples:
    beta: np.ndarray          # (L, p)
    eta: np.ndarray           # (L, r)
    kappa: np.ndarray         # (L,)
    sigma_nu_sq: np.ndarray   # (L,)
    sigma_eps_sq: np.ndarray  # (L,)
    kappa_accept_rate: float
    xi: np.ndarray | None = None  # (L, n) only when requested

    @property
    def L(self) -> int:
        return self.kappa.size


class _KappaCache:
    """Per-kappa quantities for the predictive-process basis at the knots."""

    __slots__ = ("kappa", "chol", "S", "vtil", "logdet")

    def __init__(self, kappa, h_knots, h_data_knots):
        self.kappa = kappa
        Ck = np.exp(-kappa * h_knots)
        factor, _ = chol_factor_jittered(Ck)
        self.chol = factor
        U = np.exp(-kappa * h_data_knots)
        self.S = factor.solve(U.T).T           # U Ck^-1, shape (n, r)
        # Modified fine-scale variances 1 - u_i' Ck^-1 u_i, clamped away
        # from zero so the xi conditional stays proper.
        self.vtil = np.maximum(1.0 - np.einsum("ij,ij->i", U, self.S), 1e-10)
        self.logdet = factor.logdet()


def mpp_gibbs(z, X, lons, lats, knot_lons, knot_lats, eps_weights, priors: MPPPriors,
              cfg: GibbsConfig, fix_sigma_eps_sq=None, fix_kappa=None,
              store_xi=False) -> MPPSamples:
    """Sample (beta, eta, xi, sigma_nu^2, kappa, sigma_eps^2) from the
    predictive-process model z = X beta + S(kappa) eta + xi + eps.

    eta ~ N(0, sigma_nu^2 C*(kappa)) at the knots, xi_i ~ N(0, sigma_nu^2
    vtil_i(kappa)) is the modified fine-scale term, eps_i ~ N(0, sigma_eps^2
    w_i) with known weights w. Conjugate draws for everything except kappa,
    which moves by random-walk Metropolis on log kappa.
    """
    z = np.asarray(z, float)
    X = np.asarray(X, float)
    lons = np.asarray(lons, float)
    lats = np.asarray(lats, float)
    w = np.asarray(eps_weights, float)
    n, p = X.shape
    r = len(knot_lons)
    rng = np.random.default_rng(cfg.seed)

    h_knots = pairwise_distances(knot_lons, knot_lats, knot_lons, knot_lats)
    h_data_knots = pairwise_distances(lons, lats, knot_lons, knot_lats)

    if fix_kappa is not None:
        kappa = float(fix_kappa)
    else:
        kappa = math.sqrt(priors.kappa_lo * priors.kappa_hi)
    cache = _KappaCache(kappa, h_knots, h_data_knots)

    beta = fit_ols(X, z)
    resid_var = max(float(np.var(z - X @ beta)), 1e-8)
    sigma_nu_sq = resid_var
    sigma_eps_sq = fix_sigma_eps_sq if fix_sigma_eps_sq is not None else 0.5 * resid_var
    eta = np.zeros(r)
    xi = np.zeros(n)

    n_keep = (cfg.n_iter - cfg.burn_in + cfg.thin - 1) // cfg.thin
    out_beta = np.empty((n_keep, p))
    out_eta = np.empty((n_keep, r))
    out_kappa = np.empty(n_keep)
    out_nu = np.empty(n_keep)
    out_eps = np.empty(n_keep)
    out_xi = np.empty((n_keep, n)) if store_xi else None

    kappa_tries = 0
    kappa_accepts = 0

    def log_target_kappa(c: _KappaCache) -> float:
        # Terms of the joint density that involve kappa (through C*, S, vtil).
        quad_eta = float(eta @ c.chol.solve(eta)) / sigma_nu_sq
        xi_term = float(np.sum(np.log(c.vtil) + xi * xi / (sigma_nu_sq * c.vtil)))
        e = z - X @ beta - c.S @ eta - xi
        eps_term = float(np.sum(e * e / (sigma_eps_sq * w)))
        return -0.5 * (quad_eta + c.logdet + xi_term + eps_term)

    keep = 0
    for it in range(cfg.n_iter):
        S = cache.S
        # --- (beta, eta) joint conjugate Gaussian given xi ---
        A = np.hstack((X, S))
        Winv = 1.0 / (sigma_eps_sq * w)
        AtW = A.T * Winv
        P = AtW @ A
        P[p:, p:] += cache.chol.solve(np.eye(r)) / sigma_nu_sq
        P = 0.5 * (P + P.T)
        c_fac, _ = chol_factor_jittered(P)
        mean = c_fac.solve(AtW @ (z - xi))
        u = solve_triangular(c_fac.L, rng.standard_normal(p + r),
                             lower=True, trans="T")
        gamma = mean + u
        beta = gamma[:p]
        eta = gamma[p:]

        # --- xi elementwise conjugate ---
        e = z - X @ beta - S @ eta
        v_fine = sigma_nu_sq * cache.vtil
        v_eps = sigma_eps_sq * w
        post_var = v_fine * v_eps / (v_fine + v_eps)
        post_mean = e * v_fine / (v_fine + v_eps)
        xi = post_mean + np.sqrt(post_var) * rng.standard_normal(n)

        # --- sigma_eps^2 conjugate inverse gamma ---
        if fix_sigma_eps_sq is None:
            eps = e - xi
            shape = priors.sigma_eps_sq.shape + 0.5 * n
            scale = priors.sigma_eps_sq.scale + 0.5 * float(np.sum(eps * eps / w))
            sigma_eps_sq = scale / rng.gamma(shape)

        # --- sigma_nu^2 conjugate inverse gamma (eta and xi both scale with it) ---
        shape = priors.sigma_nu_sq.shape + 0.5 * (r + n)
        scale = (priors.sigma_nu_sq.scale
                 + 0.5 * float(eta @ cache.chol.solve(eta))
                 + 0.5 * float(np.sum(xi * xi / cache.vtil)))
        sigma_nu_sq = scale / rng.gamma(shape)

        # --- kappa random-walk Metropolis on the log scale ---
        if fix_kappa is None:
            kappa_tries += 1
            prop = math.exp(math.log(cache.kappa)
                            + cfg.kappa_step * rng.standard_normal())
            if priors.kappa_lo <= prop <= priors.kappa_hi:
                cand = _KappaCache(prop, h_knots, h_data_knots)
                log_alpha = (log_target_kappa(cand) - log_target_kappa(cache)
                             + math.log(prop) - math.log(cache.kappa))
                if math.log(rng.uniform()) < log_alpha:
                    cache = cand
                    kappa_accepts += 1

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            out_beta[keep] = beta
            out_eta[keep] = eta
            out_kappa[keep] = cache.kappa
            out_nu[keep] = sigma_nu_sq
            out_eps[keep] = sigma_eps_sq
            if store_xi:
                out_xi[keep] = xi
            keep += 1

    rate = kappa_accepts / kappa_tries if kappa_tries else 0.0
    return MPPSamples(out_beta[:keep], out_eta[:keep], out_kappa[:keep],
                      out_nu[:keep], out_eps[:keep], rate,
                      out_xi[:keep] if store_xi else None)
