"""Proper scores, calibration transforms and rank histograms.

Scores follow the sign convention "smaller is better".  The numeric CRPS
integrates the squared difference between the predictive cdf and the
observation step function, splitting the integration range at discrete
atoms so mixed discrete-continuous laws are handled exactly.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .coupling import compute_ranks
from .distributions import Distribution
from .errors import EnscopulaWarning, InputError, IntegrationError

__all__ = [
    "crps_numeric",
    "crps_ensemble",
    "abs_error_at_median",
    "energy_score_ensemble",
    "standardize_margins",
    "pit",
    "verification_rank",
    "multivariate_rank",
    "HistogramSpec",
    "HistogramResult",
    "build_histogram",
    "ScoreRecord",
    "ScoreReport",
]

CRPS_TOL = 1e-8
_TAIL = 1e-8


def crps_numeric(dist: Distribution, y: float) -> float:
    """CRPS by adaptive quadrature of integral of (F(z) - 1{y <= z})^2.

    The bracket covers [quantile(1e-8), quantile(1 - 1e-8)] and the
    observation; the integral is split at discrete atoms, so step cdfs
    (empirical measures, point masses) integrate exactly.
    """
    y = float(y)
    lo = float(dist.quantile(_TAIL))
    hi = float(dist.quantile(1.0 - _TAIL))
    a = min(lo, y)
    b = max(hi, y)
    cut = sorted({a, b, y, *(atom for atom in dist.atoms() if a < atom < b)})
    if a == b:  # point measure at the observation
        return 0.0

    def integrand(z):
        return (float(dist.cdf(z)) - (1.0 if y <= z else 0.0)) ** 2

    total = 0.0
    err = 0.0
    for left, right in zip(cut[:-1], cut[1:]):
        if right <= left:
            continue
        val, abserr = integrate.quad(
            integrand, left, right, limit=200, epsabs=1e-10, epsrel=1e-10
        )
        total += val
        err += abserr
    if err > CRPS_TOL:
        raise IntegrationError(
            f"quadrature error {err:.2e} exceeds the {CRPS_TOL:.0e} tolerance"
        )
    return total


def crps_ensemble(members, y: float) -> float:
    """CRPS of the empirical measure of the members:
    mean |x_m - y| - half the mean absolute member difference."""
    x = np.asarray(members, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InputError("members must be a nonempty 1-d vector")
    y = float(y)
    first = float(np.mean(np.abs(x - y)))
    second = float(np.mean(np.abs(x[:, None] - x[None, :])))
    return first - 0.5 * second


def abs_error_at_median(dist: Distribution, y: float) -> float:
    """Absolute error of the predictive median (the Bayes point forecast
    under absolute loss)."""
    return abs(float(dist.quantile(0.5)) - float(y))


def energy_score_ensemble(members, y) -> float:
    """Energy score of an ensemble of vectors: mean ||x_m - y|| minus half
    the mean pairwise member distance (Euclidean norm)."""
    x = np.asarray(members, dtype=float)
    obs = np.asarray(y, dtype=float)
    if x.ndim != 2:
        raise InputError("members must be an (M, L) matrix")
    if obs.shape != (x.shape[1],):
        raise InputError(
            f"observation dimension {obs.shape} does not match margins {x.shape[1]}"
        )
    first = float(np.mean(np.linalg.norm(x - obs, axis=1)))
    diffs = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    return first - 0.5 * float(diffs.mean())


def standardize_margins(member_values, observations):
    """Shift and scale every margin by the test-set observation mean and
    (population) standard deviation, for joint energy scoring.

    ``member_values`` is (n_cases, M, L), ``observations`` is (n_cases, L).
    Margins whose observations have zero spread are excluded with a warning.
    Returns (standardized members, standardized observations, kept margin
    positions).
    """
    x = np.asarray(member_values, dtype=float)
    obs = np.asarray(observations, dtype=float)
    if x.ndim != 3 or obs.ndim != 2 or x.shape[0] != obs.shape[0] or x.shape[2] != obs.shape[1]:
        raise InputError("expected members (n, M, L) and observations (n, L)")
    if obs.shape[0] == 0:
        raise InputError("test set is empty")
    mean = obs.mean(axis=0)
    std = obs.std(axis=0)
    kept = np.flatnonzero(std > 0.0)
    if kept.size < obs.shape[1]:
        dropped = sorted(set(range(obs.shape[1])) - set(kept.tolist()))
        warnings.warn(
            f"margins {dropped} have zero observation spread and are excluded",
            EnscopulaWarning,
            stacklevel=2,
        )
    x_std = (x[:, :, kept] - mean[kept]) / std[kept]
    obs_std = (obs[:, kept] - mean[kept]) / std[kept]
    return x_std, obs_std, kept.tolist()


def pit(dist: Distribution, y: float, rng: np.random.Generator | None = None) -> float:
    """Probability integral transform, randomized at discrete atoms.

    Where the cdf jumps at the observation, the PIT is drawn uniformly on
    [F(y-), F(y)], which restores exact uniformity under calibration.
    """
    y = float(y)
    mass = dist.point_mass(y)
    upper = float(dist.cdf(y))
    if mass == 0.0:
        return upper
    if rng is None:
        raise InputError("a random generator is required for a cdf jump at y")
    return upper - mass + float(rng.random()) * mass


def verification_rank(members, y: float, tie_seed: int = 0) -> int:
    """Rank of the observation in the pooled set of members plus observation,
    ties resolved uniformly at random (seed-deterministic)."""
    x = np.asarray(members, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InputError("members must be a nonempty 1-d vector")
    pooled = np.append(x, float(y))
    perm = compute_ranks(pooled, tie_seed)
    return int(perm.sigma[-1])


def multivariate_rank(members, y, tie_seed: int = 0) -> int:
    """Multivariate rank via pre-ranks: each pooled vector's pre-rank counts
    the pooled vectors weakly below it in every coordinate; the returned
    value is the (tie-randomized) rank of the observation's pre-rank."""
    x = np.asarray(members, dtype=float)
    obs = np.asarray(y, dtype=float)
    if x.ndim != 2:
        raise InputError("members must be an (M, L) matrix")
    if obs.shape != (x.shape[1],):
        raise InputError(
            f"observation dimension {obs.shape} does not match margins {x.shape[1]}"
        )
    pooled = np.vstack([x, obs])
    dominated = np.all(pooled[:, None, :] <= pooled[None, :, :], axis=2)
    pre_ranks = dominated.sum(axis=0)
    perm = compute_ranks(pre_ranks.astype(float), tie_seed)
    return int(perm.sigma[-1])


@dataclass(frozen=True)
class HistogramSpec:
    """Bin layout for a calibration histogram.

    ``kind`` is "pit" (values in [0, 1]) or "rank" / "multivariate-rank"
    (integer values in 1..bins); rank histograms must use M + 1 bins.
    """

    bins: int
    kind: str = "pit"

    def __post_init__(self):
        if self.bins < 2:
            raise InputError("a histogram needs at least 2 bins")
        if self.kind not in ("pit", "rank", "multivariate-rank"):
            raise InputError(f"unknown histogram kind {self.kind!r}")


@dataclass
class HistogramResult:
    spec: HistogramSpec
    counts: np.ndarray
    chi2: float
    p_value: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.n, 1)

    def to_rows(self):
        return [
            {"bin": i + 1, "count": int(c), "frequency": float(f)}
            for i, (c, f) in enumerate(zip(self.counts, self.frequencies))
        ]


def build_histogram(values, spec: HistogramSpec) -> HistogramResult:
    """Bin counts plus the chi-square statistic against the uniform null."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise InputError("cannot build a histogram from no values")
    if spec.kind == "pit":
        if np.any(vals < 0.0) or np.any(vals > 1.0):
            raise InputError("PIT values must lie in [0, 1]")
        idx = np.minimum((vals * spec.bins).astype(int), spec.bins - 1)
    else:
        idx = vals.astype(int) - 1
        if np.any(vals != np.round(vals)) or np.any(idx < 0) or np.any(idx >= spec.bins):
            raise InputError(f"ranks must be integers in 1..{spec.bins}")
    counts = np.bincount(idx, minlength=spec.bins)
    expected = vals.size / spec.bins
    chi2 = float(np.sum((counts - expected) ** 2) / expected)
    p_value = float(stats.chi2.sf(chi2, spec.bins - 1))
    return HistogramResult(spec, counts, chi2, p_value)


# ---------------------------------------------------------------------------
# Score report container
# ---------------------------------------------------------------------------


@dataclass
class ScoreRecord:
    """Scores of one system for one case; unused metrics stay None."""

    valid_time: object
    scope: str  # margin key, or the joint group name
    system: str
    crps: float | None = None
    abs_error: float | None = None
    energy_score: float | None = None


@dataclass
class ScoreReport:
    """Per-case records, their aggregates and the calibration histograms."""

    records: list = field(default_factory=list)
    histograms: dict = field(default_factory=dict)

    def add(self, record: ScoreRecord):
        self.records.append(record)

    def mean(self, scope: str, system: str, metric: str) -> float:
        vals = [
            getattr(r, metric)
            for r in self.records
            if r.scope == scope and r.system == system and getattr(r, metric) is not None
        ]
        if not vals:
            raise InputError(f"no {metric} records for {scope}/{system}")
        return float(np.mean(vals))

    def aggregates(self) -> dict:
        """Mean of every populated metric per (scope, system), plus histogram
        statistics."""
        sums: dict = {}
        for r in self.records:
            for metric in ("crps", "abs_error", "energy_score"):
                val = getattr(r, metric)
                if val is None:
                    continue
                key = (r.scope, r.system, metric)
                total, count = sums.get(key, (0.0, 0))
                sums[key] = (total + val, count + 1)
        means: dict = {}
        for (scope, system, metric), (total, count) in sorted(sums.items()):
            means.setdefault(scope, {}).setdefault(system, {})[metric] = total / count
            means[scope][system].setdefault("n_cases", count)
        hist = {
            name: {
                "kind": h.spec.kind,
                "bins": h.spec.bins,
                "n": h.n,
                "chi2": h.chi2,
                "p_value": h.p_value,
            }
            for name, h in sorted(self.histograms.items())
        }
        return {"means": means, "histograms": hist}

    def write_cases_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["valid_time", "scope", "system", "crps", "abs_error", "energy_score"]
            )
            for r in self.records:
                writer.writerow(
                    [
                        str(r.valid_time),
                        r.scope,
                        r.system,
                        "" if r.crps is None else repr(r.crps),
                        "" if r.abs_error is None else repr(r.abs_error),
                        "" if r.energy_score is None else repr(r.energy_score),
                    ]
                )

    def write_histogram_csvs(self, directory):
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, hist in sorted(self.histograms.items()):
            path = directory / f"hist_{name.replace('/', '_')}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin", "count", "frequency"])
                for row in hist.to_rows():
                    writer.writerow([row["bin"], row["count"], repr(row["frequency"])])
            paths.append(path)
        return paths
