"""Synthetic truth processes and deliberately flawed raw ensembles.

The generator draws a stationary correlated Gaussian daily signal, adds
correlated truth noise, and builds exchangeable members around the same
signal with configurable bias and a dispersion factor on the member noise.
With zero bias and dispersion factor one, truth and members are
exchangeable by construction, so raw verification ranks are uniform.

Margins are either "continuous" (identity link; variable name "temp") or
"precip" (zero-censored cube link; variable name "precip"), matching the
qualitative behaviour of the real quantities the models target.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
from scipy import special

from .coupling import RawEnsemble
from .errors import InputError
from .postprocess import MarginIndex, TrainingCase

__all__ = ["ScenarioConfig", "ScenarioData", "generate_scenario"]

MARGIN_KINDS = ("continuous", "precip")


@dataclass
class ScenarioConfig:
    n_margins: int
    n_members: int
    n_days: int
    correlation: object = 0.0  # scalar off-diagonal value or full (L, L) matrix
    bias: object = 0.0  # scalar or per-margin vector
    dispersion_factor: float = 1.0
    zero_inflation: float = 0.0
    seed: int = 0
    margin_kinds: tuple = ()
    spread: float = 1.0
    start: date = date(2020, 1, 1)
    lead_hours: int = 24

    def __post_init__(self):
        if self.n_margins < 1 or self.n_members < 2 or self.n_days < 1:
            raise InputError("need n_margins >= 1, n_members >= 2, n_days >= 1")
        if not self.dispersion_factor > 0.0:
            raise InputError("dispersion_factor must be positive")
        if not 0.0 <= self.zero_inflation < 1.0:
            raise InputError("zero_inflation must lie in [0, 1)")
        if not self.spread > 0.0:
            raise InputError("spread must be positive")
        if not self.margin_kinds:
            self.margin_kinds = ("continuous",) * self.n_margins
        self.margin_kinds = tuple(self.margin_kinds)
        if len(self.margin_kinds) != self.n_margins:
            raise InputError("margin_kinds length must equal n_margins")
        for kind in self.margin_kinds:
            if kind not in MARGIN_KINDS:
                raise InputError(f"unknown margin kind {kind!r}")
        if "precip" in self.margin_kinds and self.zero_inflation == 0.0:
            raise InputError("precip margins need zero_inflation > 0")

    def correlation_matrix(self) -> np.ndarray:
        ell = self.n_margins
        corr = np.asarray(self.correlation, dtype=float)
        if corr.ndim == 0:
            mat = np.full((ell, ell), float(corr))
            np.fill_diagonal(mat, 1.0)
        elif corr.shape == (ell, ell):
            mat = corr
        else:
            raise InputError(f"correlation must be scalar or ({ell}, {ell}) matrix")
        if not np.allclose(mat, mat.T):
            raise InputError("correlation matrix must be symmetric")
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError as exc:
            raise InputError("correlation matrix is not positive definite") from exc
        return mat

    def bias_vector(self) -> np.ndarray:
        bias = np.asarray(self.bias, dtype=float)
        if bias.ndim == 0:
            return np.full(self.n_margins, float(bias))
        if bias.shape != (self.n_margins,):
            raise InputError("bias must be scalar or one value per margin")
        return bias

    def margins(self) -> list:
        out = []
        for l, kind in enumerate(self.margin_kinds):
            variable = "temp" if kind == "continuous" else "precip"
            out.append(MarginIndex(variable, f"s{l + 1:02d}", self.lead_hours))
        return out

    def to_dict(self) -> dict:
        corr = np.asarray(self.correlation, dtype=float)
        return {
            "n_margins": self.n_margins,
            "n_members": self.n_members,
            "n_days": self.n_days,
            "correlation": corr.tolist() if corr.ndim else float(corr),
            "bias": np.asarray(self.bias, dtype=float).tolist()
            if np.asarray(self.bias).ndim
            else float(self.bias),
            "dispersion_factor": self.dispersion_factor,
            "zero_inflation": self.zero_inflation,
            "seed": self.seed,
            "margin_kinds": list(self.margin_kinds),
            "spread": self.spread,
            "start": self.start.isoformat(),
            "lead_hours": self.lead_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        kwargs = dict(d)
        if "start" in kwargs and isinstance(kwargs["start"], str):
            kwargs["start"] = date.fromisoformat(kwargs["start"])
        if "margin_kinds" in kwargs:
            kwargs["margin_kinds"] = tuple(kwargs["margin_kinds"])
        return cls(**kwargs)


@dataclass
class ScenarioData:
    """Generated cases: daily raw ensembles plus the verifying observations."""

    config: ScenarioConfig
    margins: list
    times: list
    ensembles: list  # one RawEnsemble per day
    observations: np.ndarray  # (n_days, L)

    def margin_history(self, position: int) -> list:
        """Time-sorted training cases for one margin column."""
        return [
            TrainingCase(t, ens.members[:, position], float(obs[position]))
            for t, ens, obs in zip(self.times, self.ensembles, self.observations)
        ]


def _censored_cube(latent: np.ndarray, cut: float) -> np.ndarray:
    return np.maximum(latent - cut, 0.0) ** 3


def generate_scenario(config: ScenarioConfig) -> ScenarioData:
    """Draw the configured scenario; byte-identical output for a fixed seed."""
    corr = config.correlation_matrix()
    bias = config.bias_vector()
    chol = np.linalg.cholesky(corr)
    ell, m, n = config.n_margins, config.n_members, config.n_days
    rng = np.random.default_rng(config.seed)

    signal = rng.standard_normal((n, ell)) @ chol.T
    truth_noise = rng.standard_normal((n, ell)) @ chol.T
    member_noise = rng.standard_normal((n, m, ell)) @ chol.T

    truth_latent = signal + config.spread * truth_noise
    member_latent = (
        signal[:, None, :]
        + bias[None, None, :]
        + config.dispersion_factor * config.spread * member_noise
    )

    observations = truth_latent.copy()
    members = member_latent.copy()
    if "precip" in config.margin_kinds:
        cut = float(special.ndtri(config.zero_inflation)) * np.sqrt(
            1.0 + config.spread**2
        )
        for l, kind in enumerate(config.margin_kinds):
            if kind == "precip":
                observations[:, l] = _censored_cube(truth_latent[:, l], cut)
                members[:, :, l] = _censored_cube(member_latent[:, :, l], cut)

    margins = config.margins()
    times = [config.start + timedelta(days=t) for t in range(n)]
    ensembles = [
        RawEnsemble(members[t], margins, times[t], ident=f"synthetic@{times[t]}")
        for t in range(n)
    ]
    return ScenarioData(config, margins, times, ensembles, observations)
