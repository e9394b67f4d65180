"""Per-margin fitting and prediction for ensemble postprocessing models.

Two families are provided, both in their exchangeable-member form:

* mixture models ("bma-*"): the predictive law is a weighted mixture of
  member-specific kernels, fit by maximum likelihood via EM;
* regression models ("nr-*"): a single parametric law whose location and
  scale are regressed on the ensemble, fit by minimum CRPS (normal,
  truncated normal) or censored maximum likelihood (precipitation).

Fits operate on rolling training windows of recent forecast/observation
pairs; every fit is a pure function of its window, so fitting disjoint
margins concurrently is safe.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field
from datetime import timedelta

import numpy as np
from scipy import optimize, special

from .distributions import (
    BernoulliGammaMixtureDist,
    GammaDist,
    NormalDist,
    NormalMixtureDist,
    PointMassLogisticDist,
    TruncatedNormalDist,
)
from .errors import InputError, InsufficientTrainingDataError

__all__ = [
    "MarginIndex",
    "TrainingCase",
    "TrainingWindow",
    "FitDiagnostics",
    "BMANormalParams",
    "BMAPrecipParams",
    "NRNormalParams",
    "NRPrecipParams",
    "fit_bma_normal",
    "predict_bma_normal",
    "fit_bma_precip",
    "predict_bma_precip",
    "fit_nr_normal",
    "predict_nr_normal",
    "fit_nr_precip",
    "predict_nr_precip",
    "fit_nr_wind_speed",
    "predict_nr_wind_speed",
    "roll_window",
    "MODELS",
    "fit_model",
    "predict_model",
    "fit_record",
    "params_from_dict",
]

MIN_TRAIN_CASES = 10
SIGMA2_FLOOR = 1e-6
MEAN_FLOOR = 1e-6
COEF_BOUND = 20.0  # logit-scale box; hitting it signals separation

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


@dataclass(frozen=True)
class MarginIndex:
    """One univariate margin: (variable, location, lead time in hours)."""

    variable: str
    location: str
    lead_hours: int

    def __post_init__(self):
        if self.lead_hours <= 0:
            raise InputError(f"lead_hours must be positive, got {self.lead_hours}")

    def key(self) -> str:
        return f"{self.variable}/{self.location}/{self.lead_hours}h"

    def to_dict(self) -> dict:
        return {
            "variable": self.variable,
            "location": self.location,
            "lead_hours": self.lead_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginIndex":
        return cls(d["variable"], d["location"], int(d["lead_hours"]))


@dataclass(frozen=True)
class TrainingCase:
    """One past forecast case: valid time, M member values, observation."""

    valid_time: object
    ensemble: np.ndarray
    observation: float

    def __post_init__(self):
        ens = np.asarray(self.ensemble, dtype=float)
        object.__setattr__(self, "ensemble", ens)
        if ens.ndim != 1 or ens.size == 0 or not np.all(np.isfinite(ens)):
            raise InputError("ensemble values must be a finite 1-d vector")
        if not np.isfinite(self.observation):
            raise InputError("observation must be finite")


@dataclass
class TrainingWindow:
    """Time-ordered training cases for one margin, at most one per day."""

    cases: list
    window_days: int

    def __post_init__(self):
        if self.window_days <= 0:
            raise InputError("window_days must be positive")
        if len(self.cases) > self.window_days:
            raise InputError(
                f"{len(self.cases)} cases exceed the {self.window_days}-day window"
            )
        sizes = {c.ensemble.size for c in self.cases}
        if len(sizes) > 1:
            raise InputError(f"inconsistent member counts in window: {sorted(sizes)}")

    def __len__(self):
        return len(self.cases)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack the window into (n, M) member values and (n,) observations."""
        X = np.stack([c.ensemble for c in self.cases])
        y = np.array([c.observation for c in self.cases], dtype=float)
        return X, y

    def span(self) -> tuple[object, object]:
        return self.cases[0].valid_time, self.cases[-1].valid_time


def roll_window(history, valid_time, window_days: int) -> TrainingWindow:
    """Most recent cases strictly before ``valid_time``, within the calendar
    window of ``window_days`` days, capped at ``window_days`` cases."""
    if window_days <= 0:
        raise InputError("window_days must be positive")
    times = [c.valid_time for c in history]
    if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
        raise InputError("history must be sorted by valid time")
    start = valid_time - timedelta(days=window_days)
    left = bisect_left(times, start)
    right = bisect_left(times, valid_time)
    selected = list(history[left:right])[-window_days:]
    if not selected:
        raise InsufficientTrainingDataError(
            f"no training cases in the {window_days} days before {valid_time}"
        )
    return TrainingWindow(selected, window_days)


@dataclass
class FitDiagnostics:
    converged: bool = True
    n_iter: int = 0
    objective: float | None = None
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "n_iter": self.n_iter,
            "objective": self.objective,
            "flags": list(self.flags),
        }


def _require_cases(window: TrainingWindow, n_min: int = MIN_TRAIN_CASES):
    if len(window) < n_min:
        raise InsufficientTrainingDataError(
            f"need at least {n_min} training cases, got {len(window)}"
        )


# ---------------------------------------------------------------------------
# Mixture model, normal kernel (temperature / pressure)
# ---------------------------------------------------------------------------


@dataclass
class BMANormalParams:
    """Normal-kernel mixture: component m is N(a + b x_m, sigma2), weight w_m."""

    weights: np.ndarray
    a: float
    b: float
    sigma2: float
    diag: FitDiagnostics = field(default_factory=FitDiagnostics)

    def to_dict(self) -> dict:
        return {
            "weights": np.asarray(self.weights).tolist(),
            "a": self.a,
            "b": self.b,
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BMANormalParams":
        return cls(np.asarray(d["weights"], dtype=float), d["a"], d["b"], d["sigma2"])


def _shared_wls(X, y, z):
    """Weighted least squares of y on x pooled over members, weights z (n, M)."""
    s0 = float(z.sum())
    s1 = float((z * X).sum())
    s2 = float((z * X * X).sum())
    t0 = float((z * y[:, None]).sum())
    t1 = float((z * X * y[:, None]).sum())
    det = s0 * s2 - s1 * s1
    if det <= 1e-12 * max(1.0, abs(s0 * s2)):
        return t0 / s0, 0.0  # constant predictor: intercept only
    b = (s0 * t1 - s1 * t0) / det
    a = (t0 - b * s1) / s0
    return a, b


def fit_bma_normal(window: TrainingWindow, exchangeable: bool = True) -> BMANormalParams:
    """Maximum likelihood via EM for the normal-kernel mixture.

    Exchangeable members force uniform weights; the bias coefficients and
    kernel variance are shared across members either way.  The per-iteration
    log-likelihood is nondecreasing (asserted in debug mode) except when the
    variance floor engages on a degenerate window.
    """
    _require_cases(window)
    X, y = window.arrays()
    n, M = X.shape
    flags = []
    if np.ptp(y) == 0.0:
        flags.append("degenerate_window")

    w = np.full(M, 1.0 / M)
    z = np.full((n, M), 1.0 / M)
    a, b = _shared_wls(X, y, z)
    sigma2 = max(float(np.mean((y[:, None] - (a + b * X)) ** 2)), SIGMA2_FLOOR)

    prev_ll = -np.inf
    converged = False
    floored = sigma2 <= SIGMA2_FLOOR
    it = 0
    for it in range(1, 501):
        mu = a + b * X
        log_comp = (
            np.log(w)
            - 0.5 * math.log(2.0 * math.pi * sigma2)
            - (y[:, None] - mu) ** 2 / (2.0 * sigma2)
        )
        norm = special.logsumexp(log_comp, axis=1)
        ll = float(norm.sum())
        if __debug__ and np.isfinite(prev_ll) and not floored:
            assert ll >= prev_ll - 1e-8 * max(1.0, abs(prev_ll)), "EM log-likelihood decreased"
        if np.isfinite(prev_ll) and abs(ll - prev_ll) < 1e-6 * max(1.0, abs(prev_ll)):
            converged = True
            break
        prev_ll = ll

        z = np.exp(log_comp - norm[:, None])
        if not exchangeable:
            w = z.mean(axis=0)
            w = w / w.sum()
        a, b = _shared_wls(X, y, z)
        sigma2 = float((z * (y[:, None] - (a + b * X)) ** 2).sum() / n)
        floored = sigma2 < SIGMA2_FLOOR
        if floored:
            sigma2 = SIGMA2_FLOOR
            if "sigma2_floored" not in flags:
                flags.append("sigma2_floored")

    diag = FitDiagnostics(converged, it, prev_ll, tuple(flags))
    return BMANormalParams(w, float(a), float(b), float(sigma2), diag)


def predict_bma_normal(params: BMANormalParams, ensemble) -> NormalMixtureDist:
    x = np.asarray(ensemble, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InputError("ensemble must be a finite 1-d vector")
    w = np.asarray(params.weights, dtype=float)
    if w.size != x.size:
        if np.allclose(w, w[0]):
            w = np.full(x.size, 1.0 / x.size)
        else:
            raise InputError(
                f"ensemble size {x.size} does not match {w.size} member weights"
            )
    sigma = math.sqrt(params.sigma2)
    comps = [(w[m], NormalDist(params.a + params.b * x[m], sigma)) for m in range(x.size)]
    return NormalMixtureDist(comps)


# ---------------------------------------------------------------------------
# Mixture model, Bernoulli-gamma kernel (precipitation)
# ---------------------------------------------------------------------------


@dataclass
class BMAPrecipParams:
    """Occurrence logit (alpha, beta, gamma) on (1, x^(1/3), 1{x=0}) plus a
    gamma kernel for cube-root amounts: mean a + b x^(1/3), variance c + d x."""

    logistic: tuple
    gamma_mean: tuple
    gamma_var: tuple
    pop_only: bool = False
    diag: FitDiagnostics = field(default_factory=FitDiagnostics)

    def to_dict(self) -> dict:
        return {
            "logistic": list(self.logistic),
            "gamma_mean": list(self.gamma_mean),
            "gamma_var": list(self.gamma_var),
            "pop_only": self.pop_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BMAPrecipParams":
        return cls(
            tuple(d["logistic"]),
            tuple(d["gamma_mean"]),
            tuple(d["gamma_var"]),
            bool(d.get("pop_only", False)),
        )


def _fit_logistic(design: np.ndarray, target: np.ndarray):
    """ML logistic regression with box bounds; returns (coef, clamped)."""

    def nll(beta):
        eta = design @ beta
        # -log L = sum softplus(-eta) over successes + softplus(eta) over failures
        return float(
            np.sum(np.logaddexp(0.0, -eta[target])) + np.sum(np.logaddexp(0.0, eta[~target]))
        )

    def grad(beta):
        p = special.expit(design @ beta)
        return design.T @ (p - target)

    k = design.shape[1]
    res = optimize.minimize(
        nll,
        np.zeros(k),
        jac=grad,
        method="L-BFGS-B",
        bounds=[(-COEF_BOUND, COEF_BOUND)] * k,
        options={"maxiter": 500, "ftol": 1e-12},
    )
    clamped = bool(np.any(np.abs(res.x) >= COEF_BOUND - 1e-6))
    return res.x, clamped, res


def fit_bma_precip(window: TrainingWindow, exchangeable: bool = True) -> BMAPrecipParams:
    """Occurrence and amount parts fit separately by maximum likelihood,
    pooling (case, member) pairs across the exchangeable members."""
    if not exchangeable:
        raise InputError("only exchangeable members are supported for this model")
    _require_cases(window)
    X, y = window.arrays()
    if np.any(X < 0.0) or np.any(y < 0.0):
        raise InputError("precipitation amounts must be nonnegative")
    n, M = X.shape
    flags = []

    if np.all(y == 0.0):
        diag = FitDiagnostics(True, 0, None, ("all_zero_window", "pop_only"))
        return BMAPrecipParams((COEF_BOUND, 0.0, 0.0), (MEAN_FLOOR, 0.0), (SIGMA2_FLOOR, 0.0), True, diag)

    xr = np.cbrt(X)
    occ = np.repeat(y == 0.0, M)
    design = np.column_stack([np.ones(n * M), xr.ravel(), (X == 0.0).ravel()])
    coef, clamped, res_l = _fit_logistic(design, occ)
    if clamped:
        flags.append("separation_clamped")
    if not np.any(y == 0.0):
        flags.append("no_zero_window")

    pos = y > 0.0
    z = np.cbrt(y[pos])
    Xp = X[pos]
    xrp = xr[pos]

    # moment-based starting point: OLS for the mean, residual moments for the variance
    A = np.column_stack([np.ones(xrp.size), xrp.ravel()])
    mcoef, *_ = np.linalg.lstsq(A, np.repeat(z, M), rcond=None)
    resid2 = (np.repeat(z, M) - A @ mcoef) ** 2
    vcoef, *_ = np.linalg.lstsq(np.column_stack([np.ones(Xp.size), Xp.ravel()]), resid2, rcond=None)
    c0 = max(float(vcoef[0]), SIGMA2_FLOOR)
    d0 = max(float(vcoef[1]), 0.0)

    def nll(theta):
        a, b, g1, g2 = theta
        mu = np.clip(a + b * xrp, MEAN_FLOOR, None)
        var = np.clip(g1 * g1 + g2 * g2 * Xp, SIGMA2_FLOOR, None)
        shape = mu * mu / var
        rate = mu / var
        logpdf = (
            shape * np.log(rate)
            - special.gammaln(shape)
            + (shape - 1.0) * np.log(z)[:, None]
            - rate * z[:, None]
        )
        return -float(logpdf.sum()) / (z.size * M)

    theta0 = np.array([max(mcoef[0], MEAN_FLOOR), mcoef[1], math.sqrt(c0), math.sqrt(d0)])
    res = optimize.minimize(nll, theta0, method="L-BFGS-B", options={"maxiter": 500, "ftol": 1e-12})
    a, b, g1, g2 = res.x
    if np.any(a + b * xrp < MEAN_FLOOR):
        flags.append("gamma_mean_clamped")

    diag = FitDiagnostics(bool(res.success and res_l.success), int(res.nit), float(res.fun), tuple(flags))
    return BMAPrecipParams(
        tuple(float(v) for v in coef),
        (float(a), float(b)),
        (float(g1 * g1), float(g2 * g2)),
        False,
        diag,
    )


def predict_bma_precip(params: BMAPrecipParams, ensemble) -> BernoulliGammaMixtureDist:
    x = np.asarray(ensemble, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InputError("ensemble must be a finite 1-d vector")
    if np.any(x < 0.0):
        raise InputError("precipitation forecasts must be nonnegative")
    if params.pop_only:
        return BernoulliGammaMixtureDist(1.0, [])
    alpha, beta, gamma = params.logistic
    xr = np.cbrt(x)
    p0 = special.expit(alpha + beta * xr + gamma * (x == 0.0))
    pop_zero = float(p0.mean())
    wpos = 1.0 - p0
    if wpos.sum() <= 0.0:
        return BernoulliGammaMixtureDist(1.0, [])
    w = wpos / wpos.sum()
    a, b = params.gamma_mean
    c, d = params.gamma_var
    mu = np.clip(a + b * xr, MEAN_FLOOR, None)
    var = np.clip(c + d * x, SIGMA2_FLOOR, None)
    comps = [(float(w[m]), GammaDist(float(mu[m]), float(var[m]))) for m in range(x.size)]
    return BernoulliGammaMixtureDist(pop_zero, comps)


# ---------------------------------------------------------------------------
# Regression model, normal / truncated normal (temperature, pressure, wind)
# ---------------------------------------------------------------------------


@dataclass
class NRNormalParams:
    """Predictive N(a + b * sum(x), c + d * S^2) with shared member coefficient."""

    a: float
    b: float
    c: float
    d: float
    diag: FitDiagnostics = field(default_factory=FitDiagnostics)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "d": self.d}

    @classmethod
    def from_dict(cls, d: dict) -> "NRNormalParams":
        return cls(d["a"], d["b"], d["c"], d["d"])


def _ensemble_stats(X):
    sumx = X.sum(axis=1)
    s2 = X.var(axis=1)  # divisor M
    return sumx, s2


def _crps_normal_vec(mu, sigma, y):
    z = (y - mu) / sigma
    phi = np.exp(-0.5 * z * z) / _SQRT_2PI
    return sigma * (z * (2.0 * special.ndtr(z) - 1.0) + 2.0 * phi - _INV_SQRT_PI)


def _nr_normal_objective(theta, sumx, s2, y):
    a, b, g1, g2 = theta
    mu = a + b * sumx
    var = np.maximum(g1 * g1 + g2 * g2 * s2, 1e-12)
    sigma = np.sqrt(var)
    z = (y - mu) / sigma
    phi = np.exp(-0.5 * z * z) / _SQRT_2PI
    two_cdf1 = 2.0 * special.ndtr(z) - 1.0
    crps = sigma * (z * two_cdf1 + 2.0 * phi - _INV_SQRT_PI)
    dmu = -two_cdf1
    dsigma = 2.0 * phi - _INV_SQRT_PI
    grad = np.array(
        [
            dmu.mean(),
            (dmu * sumx).mean(),
            (dsigma * g1 / sigma).mean(),
            (dsigma * g2 * s2 / sigma).mean(),
        ]
    )
    return float(crps.mean()), grad


def _nr_start(sumx, s2, y):
    A = np.column_stack([np.ones_like(sumx), sumx])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    varres = max(float(resid.var()), SIGMA2_FLOOR)
    mean_s2 = max(float(s2.mean()), 1e-12)
    return np.array(
        [coef[0], coef[1], math.sqrt(0.5 * varres), math.sqrt(0.5 * varres / mean_s2)]
    )


def fit_nr_normal(window: TrainingWindow, exchangeable: bool = True) -> NRNormalParams:
    """Minimum-CRPS estimation of the normal regression model.

    Nonnegativity of the variance coefficients is enforced by the squared
    reparameterization c = g1^2, d = g2^2.
    """
    if not exchangeable:
        raise InputError("only exchangeable members are supported for this model")
    _require_cases(window)
    X, y = window.arrays()
    sumx, s2 = _ensemble_stats(X)
    theta0 = _nr_start(sumx, s2, y)
    res = optimize.minimize(
        _nr_normal_objective,
        theta0,
        args=(sumx, s2, y),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 1000, "ftol": 1e-12, "gtol": 1e-10},
    )
    flags = () if res.success else ("not_converged",)
    a, b, g1, g2 = res.x
    diag = FitDiagnostics(bool(res.success), int(res.nit), float(res.fun), flags)
    return NRNormalParams(float(a), float(b), float(g1 * g1), float(g2 * g2), diag)


def predict_nr_normal(params: NRNormalParams, ensemble) -> NormalDist:
    x = np.asarray(ensemble, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InputError("ensemble must be a finite 1-d vector")
    mu = params.a + params.b * float(x.sum())
    var = max(params.c + params.d * float(x.var()), 1e-12)
    return NormalDist(mu, math.sqrt(var))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


def _truncnorm_crps_quad(mu, sigma, y):
    """CRPS of N(mu, sigma^2) truncated to [0, inf), per case, by fixed-node
    Gauss-Legendre quadrature of the integral form split at the observation."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    y = np.asarray(y, dtype=float)
    plow = special.ndtr(-mu / sigma)
    zmass = np.maximum(1.0 - plow, 1e-300)  # keep far-left exploration finite
    y0 = np.maximum(y, 0.0)
    hi = np.maximum(mu + 9.0 * sigma, y0 + sigma)

    def cdf(zs):
        return np.clip((special.ndtr((zs - mu[:, None]) / sigma[:, None]) - plow[:, None]) / zmass[:, None], 0.0, 1.0)

    def segment(a, b, square_of):
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        zs = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        return half * (square_of(cdf(zs)) @ _GL_WEIGHTS)

    lower = segment(np.zeros_like(y0), y0, lambda F: F * F)
    upper = segment(y0, hi, lambda F: (1.0 - F) * (1.0 - F))
    return lower + upper + np.maximum(-y, 0.0)


def fit_nr_wind_speed(window: TrainingWindow, exchangeable: bool = True) -> NRNormalParams:
    """As ``fit_nr_normal`` but minimizing the truncated-normal CRPS,
    evaluated by quadrature; intended for nonnegative wind speed."""
    if not exchangeable:
        raise InputError("only exchangeable members are supported for this model")
    _require_cases(window)
    X, y = window.arrays()
    if np.any(y < 0.0):
        raise InputError("wind speed observations must be nonnegative")
    sumx, s2 = _ensemble_stats(X)
    theta0 = _nr_start(sumx, s2, y)

    def objective(theta):
        a, b, g1, g2 = theta
        mu = a + b * sumx
        sigma = np.sqrt(np.maximum(g1 * g1 + g2 * g2 * s2, 1e-12))
        return float(_truncnorm_crps_quad(mu, sigma, y).mean())

    res = optimize.minimize(
        objective, theta0, method="L-BFGS-B", options={"maxiter": 500, "ftol": 1e-12}
    )
    flags = () if res.success else ("not_converged",)
    a, b, g1, g2 = res.x
    diag = FitDiagnostics(bool(res.success), int(res.nit), float(res.fun), flags)
    return NRNormalParams(float(a), float(b), float(g1 * g1), float(g2 * g2), diag)


def predict_nr_wind_speed(params: NRNormalParams, ensemble) -> TruncatedNormalDist:
    x = np.asarray(ensemble, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InputError("ensemble must be a finite 1-d vector")
    mu = params.a + params.b * float(x.sum())
    var = max(params.c + params.d * float(x.var()), 1e-12)
    return TruncatedNormalDist(mu, math.sqrt(var), lower=0.0)


# ---------------------------------------------------------------------------
# Regression model, censored logistic (precipitation)
# ---------------------------------------------------------------------------


@dataclass
class NRPrecipParams:
    """Censored-logistic cdf expit(a + b * sum(x) + gamma_h * y) on y >= 0."""

    a: float
    b: float
    gamma_h: float
    diag: FitDiagnostics = field(default_factory=FitDiagnostics)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "gamma_h": self.gamma_h}

    @classmethod
    def from_dict(cls, d: dict) -> "NRPrecipParams":
        return cls(d["a"], d["b"], d["gamma_h"])


def fit_nr_precip(window: TrainingWindow) -> NRPrecipParams:
    """Censored maximum likelihood: P(Y=0) = G(0) for dry cases, the logistic
    density of G for wet cases.  gamma_h stays positive via log-reparameterization."""
    _require_cases(window)
    X, y = window.arrays()
    if np.any(X < 0.0) or np.any(y < 0.0):
        raise InputError("precipitation amounts must be nonnegative")
    sumx = X.sum(axis=1)
    zero = y == 0.0
    flags = []
    if zero.all():
        flags.append("all_zero_window")
    elif not zero.any():
        flags.append("no_zero_window")

    ypos = y[~zero]
    s_zero = sumx[zero]
    s_pos = sumx[~zero]

    def nll(theta):
        a, b, loggamma = theta
        g = math.exp(loggamma)
        out = float(np.sum(np.logaddexp(0.0, -(a + b * s_zero))))
        v = a + b * s_pos + g * ypos
        out += float(np.sum(np.logaddexp(0.0, v) + np.logaddexp(0.0, -v))) - ypos.size * loggamma
        return out / y.size

    def grad(theta):
        a, b, loggamma = theta
        g = math.exp(loggamma)
        u = a + b * s_zero
        dz = special.expit(u) - 1.0
        v = a + b * s_pos + g * ypos
        dv = 2.0 * special.expit(v) - 1.0
        da = float(dz.sum() + dv.sum())
        db = float((dz * s_zero).sum() + (dv * s_pos).sum())
        dg = float((dv * ypos).sum() * g - ypos.size)
        return np.array([da, db, dg]) / y.size

    scale = float(np.std(ypos)) if ypos.size > 1 and np.std(ypos) > 0 else 1.0
    p0 = min(max(float(zero.mean()), 0.05), 0.95)
    theta0 = np.array([special.logit(p0), 0.0, -math.log(scale)])
    res = optimize.minimize(
        nll,
        theta0,
        jac=grad,
        method="L-BFGS-B",
        bounds=[(-COEF_BOUND, COEF_BOUND), (-COEF_BOUND, COEF_BOUND), (-12.0, 12.0)],
        options={"maxiter": 500, "ftol": 1e-12},
    )
    if np.any(np.abs(res.x[:2]) >= COEF_BOUND - 1e-6):
        flags.append("separation_clamped")
    diag = FitDiagnostics(bool(res.success), int(res.nit), float(res.fun), tuple(flags))
    return NRPrecipParams(float(res.x[0]), float(res.x[1]), float(math.exp(res.x[2])), diag)


def predict_nr_precip(params: NRPrecipParams, ensemble) -> PointMassLogisticDist:
    x = np.asarray(ensemble, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InputError("ensemble must be a finite 1-d vector")
    return PointMassLogisticDist(params.a + params.b * float(x.sum()), params.gamma_h)


# ---------------------------------------------------------------------------
# Model registry and parameter serialization
# ---------------------------------------------------------------------------

MODELS = {
    "bma-normal": (fit_bma_normal, predict_bma_normal, BMANormalParams),
    "bma-precip": (fit_bma_precip, predict_bma_precip, BMAPrecipParams),
    "nr-normal": (fit_nr_normal, predict_nr_normal, NRNormalParams),
    "nr-precip": (lambda w, exchangeable=True: fit_nr_precip(w), predict_nr_precip, NRPrecipParams),
    "nr-truncnormal": (fit_nr_wind_speed, predict_nr_wind_speed, NRNormalParams),
}


def fit_model(model: str, window: TrainingWindow, exchangeable: bool = True):
    if model not in MODELS:
        raise InputError(f"unknown model {model!r}; choose from {sorted(MODELS)}")
    fit, _, _ = MODELS[model]
    return fit(window, exchangeable=exchangeable)


def predict_model(model: str, params, ensemble):
    if model not in MODELS:
        raise InputError(f"unknown model {model!r}; choose from {sorted(MODELS)}")
    _, predict, _ = MODELS[model]
    return predict(params, ensemble)


def fit_record(margin: MarginIndex, model: str, params, window: TrainingWindow) -> dict:
    """JSON-ready record of one fit: margin, model, parameters, window span
    and fit diagnostics."""
    start, end = window.span()
    return {
        "margin": margin.to_dict(),
        "model": model,
        "params": params.to_dict(),
        "window": {
            "start": str(start),
            "end": str(end),
            "n_cases": len(window),
        },
        "fit_diagnostics": params.diag.to_dict(),
    }


def params_from_dict(model: str, d: dict):
    if model not in MODELS:
        raise InputError(f"unknown model {model!r}; choose from {sorted(MODELS)}")
    _, _, cls = MODELS[model]
    return cls.from_dict(d)
