"""Univariate predictive distributions used by the postprocessing models.

Each distribution exposes ``cdf``, ``quantile``, ``mean``, ``sample`` and,
where one exists, a continuous density ``pdf`` plus the discrete atoms of
mixed discrete-continuous laws.  All values are immutable after
construction and every method is a pure function; sampling takes a
caller-supplied ``numpy.random.Generator``, the module holds no RNG state.

Quantiles follow the left-continuous generalized inverse
``F^-1(tau) = inf{y : F(y) >= tau}``, so for a law with a point mass at
zero every ``tau`` at or below that mass maps to zero.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import InputError

__all__ = [
    "Distribution",
    "NormalDist",
    "TruncatedNormalDist",
    "GammaDist",
    "NormalMixtureDist",
    "BernoulliGammaMixtureDist",
    "PointMassLogisticDist",
    "EmpiricalDist",
    "crps_closed_normal",
    "distribution_from_dict",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def _phi(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT_2PI


def _check_tau(tau):
    t = np.asarray(tau, dtype=float)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise InputError("quantile level must lie strictly inside (0, 1)")
    return t


def _bisect_quantile(cdf, tau, lo, hi, xtol=1e-12, max_iter=200):
    """Bracketed bisection of a nondecreasing cdf, vectorized over tau.

    ``lo`` and ``hi`` must already bracket the solution:
    cdf(lo) <= tau <= cdf(hi) elementwise.
    """
    tau = np.asarray(tau, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), tau.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), tau.shape).copy()
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < tau
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= xtol * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


class Distribution:
    """Common behaviour: inverse-transform sampling and atom bookkeeping."""

    def cdf(self, y):
        raise NotImplementedError

    def quantile(self, tau):
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def atoms(self) -> tuple[float, ...]:
        """Locations carrying discrete probability mass."""
        return ()

    def point_mass(self, y: float) -> float:
        """Probability of the single point ``y`` (zero for continuous laws)."""
        return 0.0

    def cdf_left(self, y):
        """Left-hand limit F(y-)."""
        return self.cdf(y) - self.point_mass(y)

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-transform draw(s), deterministic given the generator state."""
        u = rng.random(size)
        u = np.clip(u, 1e-16, 1.0 - 1e-16)
        return self.quantile(u)

    def to_dict(self) -> dict:
        raise NotImplementedError


class NormalDist(Distribution):
    """Normal law with mean ``mu`` and standard deviation ``sigma`` > 0."""

    __slots__ = ("mu", "sigma")

    def __init__(self, mu: float, sigma: float):
        sigma = float(sigma)
        if not (sigma > 0.0) or not np.isfinite(sigma):
            raise InputError(f"sigma must be positive and finite, got {sigma}")
        self.mu = float(mu)
        self.sigma = sigma

    def cdf(self, y):
        return special.ndtr((np.asarray(y, dtype=float) - self.mu) / self.sigma)

    def pdf(self, y):
        return _phi((np.asarray(y, dtype=float) - self.mu) / self.sigma) / self.sigma

    def quantile(self, tau):
        tau = _check_tau(tau)
        return self.mu + self.sigma * special.ndtri(tau)

    def mean(self) -> float:
        return self.mu

    def crps(self, y):
        return crps_closed_normal(self, y)

    def to_dict(self) -> dict:
        return {"family": "normal", "params": {"mu": self.mu, "sigma": self.sigma}}

    def __repr__(self):
        return f"NormalDist(mu={self.mu!r}, sigma={self.sigma!r})"


class TruncatedNormalDist(Distribution):
    """Normal law restricted to ``[lower, inf)`` and renormalized."""

    __slots__ = ("mu", "sigma", "lower", "_plow", "_pmass")

    def __init__(self, mu: float, sigma: float, lower: float = 0.0):
        sigma = float(sigma)
        if not (sigma > 0.0) or not np.isfinite(sigma):
            raise InputError(f"sigma must be positive and finite, got {sigma}")
        self.mu = float(mu)
        self.sigma = sigma
        self.lower = float(lower)
        self._plow = float(special.ndtr((self.lower - self.mu) / self.sigma))
        self._pmass = 1.0 - self._plow
        if self._pmass <= 0.0:
            raise InputError("no probability mass above the truncation point")

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        z = special.ndtr((y - self.mu) / self.sigma)
        out = (z - self._plow) / self._pmass
        return np.clip(np.where(y < self.lower, 0.0, out), 0.0, 1.0)

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        dens = _phi((y - self.mu) / self.sigma) / (self.sigma * self._pmass)
        return np.where(y < self.lower, 0.0, dens)

    def quantile(self, tau):
        tau = _check_tau(tau)
        return self.mu + self.sigma * special.ndtri(self._plow + tau * self._pmass)

    def mean(self) -> float:
        alpha = (self.lower - self.mu) / self.sigma
        return self.mu + self.sigma * float(_phi(alpha)) / self._pmass

    def to_dict(self) -> dict:
        return {
            "family": "truncated_normal",
            "params": {"mu": self.mu, "sigma": self.sigma, "lower": self.lower},
        }

    def __repr__(self):
        return (
            f"TruncatedNormalDist(mu={self.mu!r}, sigma={self.sigma!r}, "
            f"lower={self.lower!r})"
        )


class GammaDist(Distribution):
    """Gamma law parameterized by mean > 0 and variance > 0.

    Internally moment-matched to shape ``k = mean^2/variance`` and rate
    ``r = mean/variance``.
    """

    __slots__ = ("mean_", "variance", "shape", "rate")

    def __init__(self, mean: float, variance: float):
        mean = float(mean)
        variance = float(variance)
        if not (mean > 0.0) or not (variance > 0.0):
            raise InputError("gamma mean and variance must be positive")
        self.mean_ = mean
        self.variance = variance
        self.shape = mean * mean / variance
        self.rate = mean / variance

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return special.gammainc(self.shape, self.rate * np.maximum(y, 0.0))

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = (
                self.shape * math.log(self.rate)
                - math.lgamma(self.shape)
                + (self.shape - 1.0) * np.log(y)
                - self.rate * y
            )
        return np.where(y > 0.0, np.exp(logp), 0.0)

    def quantile(self, tau):
        tau = _check_tau(tau)
        return special.gammaincinv(self.shape, tau) / self.rate

    def mean(self) -> float:
        return self.mean_

    def to_dict(self) -> dict:
        return {"family": "gamma", "params": {"mean": self.mean_, "variance": self.variance}}

    def __repr__(self):
        return f"GammaDist(mean={self.mean_!r}, variance={self.variance!r})"


def _normalized_weights(weights, what: str) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise InputError(f"{what} needs at least one component")
    if np.any(w < 0.0):
        raise InputError(f"{what} weights must be nonnegative")
    total = float(w.sum())
    if abs(total - 1.0) > 1e-12:
        raise InputError(f"{what} weights must sum to 1, got {total!r}")
    return w / total


class NormalMixtureDist(Distribution):
    """Finite mixture of normal components given as (weight, NormalDist)."""

    __slots__ = ("weights", "mus", "sigmas")

    def __init__(self, components):
        components = list(components)
        self.weights = _normalized_weights([w for w, _ in components], "mixture")
        self.mus = np.array([c.mu for _, c in components], dtype=float)
        self.sigmas = np.array([c.sigma for _, c in components], dtype=float)

    @property
    def components(self):
        return [
            (float(w), NormalDist(m, s))
            for w, m, s in zip(self.weights, self.mus, self.sigmas)
        ]

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        z = (y[..., None] - self.mus) / self.sigmas
        return special.ndtr(z) @ self.weights

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        z = (y[..., None] - self.mus) / self.sigmas
        return (_phi(z) / self.sigmas) @ self.weights

    def quantile(self, tau):
        tau = _check_tau(tau)
        # Component extreme quantiles bracket the mixture quantile.
        z = special.ndtri(tau)
        comp_q = self.mus + np.multiply.outer(z, self.sigmas)
        lo = comp_q.min(axis=-1)
        hi = comp_q.max(axis=-1)
        return _bisect_quantile(self.cdf, tau, lo, hi)

    def mean(self) -> float:
        return float(self.weights @ self.mus)

    def crps(self, y):
        """Closed-form CRPS for a normal mixture.

        Uses E|X| for normal X: A(m, s) = m (2 Phi(m/s) - 1) + 2 s phi(m/s).
        """
        y = np.asarray(y, dtype=float)

        def _a(m, s):
            z = m / s
            return m * (2.0 * special.ndtr(z) - 1.0) + 2.0 * s * _phi(z)

        w = self.weights
        first = _a(y[..., None] - self.mus, self.sigmas) @ w
        pair_s = np.sqrt(self.sigmas[:, None] ** 2 + self.sigmas[None, :] ** 2)
        pair = _a(self.mus[:, None] - self.mus[None, :], pair_s)
        second = 0.5 * float(w @ pair @ w)
        return first - second

    def to_dict(self) -> dict:
        return {
            "family": "normal_mixture",
            "params": {
                "weights": self.weights.tolist(),
                "mus": self.mus.tolist(),
                "sigmas": self.sigmas.tolist(),
            },
        }

    def __repr__(self):
        return f"NormalMixtureDist({len(self.weights)} components)"


class BernoulliGammaMixtureDist(Distribution):
    """Point mass at zero plus a gamma mixture for the cube root of y > 0.

    ``pop_zero`` is the total probability of exactly zero.  The components
    describe the conditional law of ``y**(1/3)`` given ``y > 0``; ``cdf``
    and ``quantile`` operate on the original accumulation scale, so callers
    never see the cube-root transform.  ``components`` may be empty only
    when ``pop_zero == 1``.
    """

    __slots__ = ("pop_zero", "weights", "gammas")

    def __init__(self, pop_zero: float, components):
        pop_zero = float(pop_zero)
        if not (0.0 <= pop_zero <= 1.0):
            raise InputError(f"pop_zero must lie in [0, 1], got {pop_zero}")
        components = list(components)
        self.pop_zero = pop_zero
        if not components:
            if pop_zero < 1.0:
                raise InputError("positive-part components required when pop_zero < 1")
            self.weights = np.zeros(0)
            self.gammas = []
        else:
            self.weights = _normalized_weights([w for w, _ in components], "gamma mixture")
            self.gammas = [g for _, g in components]

    def _positive_cdf(self, z):
        """Mixture cdf of the cube-root variable, z >= 0."""
        if not self.gammas:
            return np.ones_like(np.asarray(z, dtype=float))
        parts = np.stack([g.cdf(z) for g in self.gammas], axis=-1)
        return parts @ self.weights

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        pos = np.cbrt(np.maximum(y, 0.0))
        out = self.pop_zero + (1.0 - self.pop_zero) * self._positive_cdf(pos)
        return np.where(y < 0.0, 0.0, out)

    def pdf(self, y):
        """Density of the continuous part on the original scale (y > 0)."""
        y = np.asarray(y, dtype=float)
        if not self.gammas:
            return np.zeros_like(y)
        z = np.cbrt(np.maximum(y, 1e-300))
        parts = np.stack([g.pdf(z) for g in self.gammas], axis=-1)
        dens = (1.0 - self.pop_zero) * (parts @ self.weights) / (3.0 * z * z)
        return np.where(y > 0.0, dens, 0.0)

    def atoms(self) -> tuple[float, ...]:
        return (0.0,) if self.pop_zero > 0.0 else ()

    def point_mass(self, y: float) -> float:
        return self.pop_zero if y == 0.0 else 0.0

    def quantile(self, tau):
        tau = _check_tau(tau)
        scalar = tau.ndim == 0
        tau = np.atleast_1d(tau)
        out = np.zeros_like(tau)
        above = tau > self.pop_zero
        if np.any(above):
            if not self.gammas:
                raise InputError("quantile above pop_zero undefined without components")
            tpos = (tau[above] - self.pop_zero) / (1.0 - self.pop_zero)
            comp_q = np.stack([g.quantile(tpos) for g in self.gammas], axis=-1)
            lo = comp_q.min(axis=-1)
            hi = comp_q.max(axis=-1)
            z = _bisect_quantile(self._positive_cdf, tpos, lo, hi)
            out[above] = z**3
        return out[0] if scalar else out

    def mean(self) -> float:
        if not self.gammas:
            return 0.0
        # E[Z^3] for Z ~ Gamma(k, r) is k (k+1) (k+2) / r^3.
        third = np.array(
            [g.shape * (g.shape + 1.0) * (g.shape + 2.0) / g.rate**3 for g in self.gammas]
        )
        return float((1.0 - self.pop_zero) * (self.weights @ third))

    def to_dict(self) -> dict:
        return {
            "family": "bernoulli_gamma_mixture",
            "params": {
                "pop_zero": self.pop_zero,
                "weights": self.weights.tolist(),
                "means": [g.mean_ for g in self.gammas],
                "variances": [g.variance for g in self.gammas],
            },
        }

    def __repr__(self):
        return (
            f"BernoulliGammaMixtureDist(pop_zero={self.pop_zero!r}, "
            f"{len(self.gammas)} gamma components)"
        )


class PointMassLogisticDist(Distribution):
    """Censored-logistic law on y >= 0: F(y) = expit(eta + gamma_h * y).

    The mass at zero is ``expit(eta)``; above zero the cdf is a logistic
    curve in y with slope parameter ``gamma_h`` > 0.
    """

    __slots__ = ("eta", "gamma_h")

    def __init__(self, eta: float, gamma_h: float):
        gamma_h = float(gamma_h)
        if not (gamma_h > 0.0):
            raise InputError(f"gamma_h must be positive, got {gamma_h}")
        self.eta = float(eta)
        self.gamma_h = gamma_h

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y < 0.0, 0.0, special.expit(self.eta + self.gamma_h * y))

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        p = special.expit(self.eta + self.gamma_h * y)
        return np.where(y > 0.0, self.gamma_h * p * (1.0 - p), 0.0)

    def atoms(self) -> tuple[float, ...]:
        return (0.0,)

    def point_mass(self, y: float) -> float:
        return float(special.expit(self.eta)) if y == 0.0 else 0.0

    def quantile(self, tau):
        tau = _check_tau(tau)
        val = (special.logit(tau) - self.eta) / self.gamma_h
        return np.where(tau <= special.expit(self.eta), 0.0, val)

    def mean(self) -> float:
        # int_0^inf (1 - F) dy = softplus(-eta) / gamma_h
        return float(np.logaddexp(0.0, -self.eta)) / self.gamma_h

    def to_dict(self) -> dict:
        return {
            "family": "point_mass_logistic",
            "params": {"eta": self.eta, "gamma_h": self.gamma_h},
        }

    def __repr__(self):
        return f"PointMassLogisticDist(eta={self.eta!r}, gamma_h={self.gamma_h!r})"


class EmpiricalDist(Distribution):
    """Empirical measure of a finite sample; each point carries mass 1/n.

    ``quantile`` is the left-continuous generalized inverse, so
    ``quantile((m - 0.5) / n)`` is exactly the m-th order statistic.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        vals = np.sort(np.asarray(values, dtype=float))
        if vals.size == 0:
            raise InputError("empirical distribution needs at least one value")
        if not np.all(np.isfinite(vals)):
            raise InputError("empirical distribution values must be finite")
        self.values = vals

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.searchsorted(self.values, y, side="right") / self.values.size

    def atoms(self) -> tuple[float, ...]:
        return tuple(np.unique(self.values))

    def point_mass(self, y: float) -> float:
        return float(np.sum(self.values == y)) / self.values.size

    def quantile(self, tau):
        tau = _check_tau(tau)
        n = self.values.size
        idx = np.ceil(tau * n).astype(int) - 1
        return self.values[np.clip(idx, 0, n - 1)]

    def mean(self) -> float:
        return float(self.values.mean())

    def crps(self, y):
        """Closed-form CRPS of the empirical measure (the ensemble formula)."""
        y = float(y)
        x = self.values
        return float(np.mean(np.abs(x - y))) - 0.5 * float(
            np.mean(np.abs(x[:, None] - x[None, :]))
        )

    def to_dict(self) -> dict:
        return {"family": "empirical", "params": {"values": self.values.tolist()}}

    def __repr__(self):
        return f"EmpiricalDist(n={self.values.size})"


def crps_closed_normal(dist: NormalDist, y) -> float:
    """Closed-form continuous ranked probability score of a normal law."""
    y = np.asarray(y, dtype=float)
    z = (y - dist.mu) / dist.sigma
    out = dist.sigma * (z * (2.0 * special.ndtr(z) - 1.0) + 2.0 * _phi(z) - _INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


_FAMILIES = {
    "normal": lambda p: NormalDist(p["mu"], p["sigma"]),
    "truncated_normal": lambda p: TruncatedNormalDist(p["mu"], p["sigma"], p["lower"]),
    "gamma": lambda p: GammaDist(p["mean"], p["variance"]),
    "normal_mixture": lambda p: NormalMixtureDist(
        [(w, NormalDist(m, s)) for w, m, s in zip(p["weights"], p["mus"], p["sigmas"])]
    ),
    "bernoulli_gamma_mixture": lambda p: BernoulliGammaMixtureDist(
        p["pop_zero"],
        [
            (w, GammaDist(m, v))
            for w, m, v in zip(p["weights"], p["means"], p["variances"])
        ],
    ),
    "point_mass_logistic": lambda p: PointMassLogisticDist(p["eta"], p["gamma_h"]),
    "empirical": lambda p: EmpiricalDist(p["values"]),
}


def distribution_from_dict(d: dict) -> Distribution:
    """Rebuild a distribution from its ``to_dict`` representation."""
    try:
        family = d["family"]
        params = d["params"]
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed distribution record: {d!r}") from exc
    if family not in _FAMILIES:
        raise InputError(f"unknown distribution family {family!r}")
    return _FAMILIES[family](params)
