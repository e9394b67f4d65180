"""Rank structure, quantization and ensemble reordering.

The reordering stage turns per-margin discrete samples of postprocessed
distributions into a joint ensemble that carries the rank dependence
structure (the empirical copula) of either the raw ensemble or a
historical observation record (Schaake shuffle).

All randomness (tie-breaking, random quantization) is driven by explicit
seeds; per-margin child seeds are derived from a master seed and the
margin ordinal, so batch runs are reproducible regardless of execution
order or parallelism.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .distributions import Distribution
from .errors import (
    DegenerateSmoothingError,
    EnscopulaWarning,
    InputError,
    UnsupportedSchemeError,
)

__all__ = [
    "RawEnsemble",
    "MarginPermutation",
    "QuantizedEnsemble",
    "EccEnsemble",
    "HistoricalRecord",
    "compute_ranks",
    "quantize_q",
    "quantize_r",
    "quantize_t",
    "ecc_reorder",
    "schaake_shuffle",
    "shuffle_margins",
    "couple",
    "empirical_copula_eval",
    "verify_discrete_sklar",
    "verify_ecc_sklar",
    "SklarReport",
    "derive_seed",
    "derive_rng",
]

ECC_SCHEMES = ("q", "r", "t")
U_CLIP = 1e-12  # smoothing cdf values are kept inside (0, 1) by this margin


def derive_seed(master_seed: int, *ordinals: int) -> int:
    """Deterministic child seed from a master seed and ordinal path."""
    ss = np.random.SeedSequence([int(master_seed), *[int(o) for o in ordinals]])
    state = ss.generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def derive_rng(master_seed: int, *ordinals: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *ordinals))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator) or hasattr(seed, "random"):
        return seed
    return np.random.default_rng(seed)


def _as_matrix(values, what: str) -> np.ndarray:
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 2:
        raise InputError(f"{what} must be a 2-d (members x margins) matrix")
    if not np.all(np.isfinite(vals)):
        raise InputError(f"{what} contains non-finite values")
    return vals


@dataclass
class RawEnsemble:
    """M x L matrix of raw member forecasts for one valid time."""

    members: np.ndarray
    margin_index: list
    valid_time: object
    ident: str | None = None

    def __post_init__(self):
        self.members = _as_matrix(self.members, "raw ensemble")
        m, ell = self.members.shape
        if m < 2:
            raise InputError(f"a raw ensemble needs at least 2 members, got {m}")
        if len(self.margin_index) != ell:
            raise InputError(
                f"{ell} margin columns but {len(self.margin_index)} margin indices"
            )
        if self.ident is None:
            self.ident = f"raw@{self.valid_time}"

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def n_margins(self) -> int:
        return self.members.shape[1]


@dataclass
class MarginPermutation:
    """Ranks of one margin's member values: sigma[m] = rank of member m (1-based)."""

    sigma: np.ndarray
    tie_seed: int | None = None

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=int)
        if sorted(sig.tolist()) != list(range(1, sig.size + 1)):
            raise InputError("sigma must be a permutation of 1..M")
        self.sigma = sig


@dataclass
class QuantizedEnsemble:
    """Per-margin discrete samples of the postprocessed distributions.

    Row m of ``values`` holds the m-th sampled value of every margin, in
    generation order (sorted for scheme q, draw order for r, member order
    for t)."""

    values: np.ndarray
    scheme: str
    margin_index: list
    valid_time: object
    source_dists: list | None = None
    seed: int | None = None
    ident: str | None = None

    def __post_init__(self):
        self.values = _as_matrix(self.values, "quantized ensemble")
        if self.scheme not in (*ECC_SCHEMES, "empirical"):
            raise InputError(f"unknown quantization scheme {self.scheme!r}")
        if len(self.margin_index) != self.values.shape[1]:
            raise InputError("margin_index length does not match value columns")
        if self.ident is None:
            self.ident = f"quantized-{self.scheme}@{self.valid_time}"


@dataclass
class EccEnsemble:
    """Reordered quantized ensemble carrying a target rank structure."""

    values: np.ndarray
    margin_index: list
    valid_time: object
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = _as_matrix(self.values, "coupled ensemble")
        if len(self.margin_index) != self.values.shape[1]:
            raise InputError("margin_index length does not match value columns")


@dataclass
class HistoricalRecord:
    """M historical observation vectors over the same margins."""

    values: np.ndarray
    margin_index: list
    dates: list | None = None

    def __post_init__(self):
        self.values = _as_matrix(self.values, "historical record")
        if len(self.margin_index) != self.values.shape[1]:
            raise InputError("margin_index length does not match value columns")


def compute_ranks(values, tie_seed: int | None = 0) -> MarginPermutation:
    """Ranks 1..M of the values, ties broken uniformly at random.

    Tie-free inputs get their (seed-independent) deterministic ranks; tied
    positions are ordered by a random draw controlled solely by ``tie_seed``.
    """
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 1 or vals.size == 0:
        raise InputError("values must be a nonempty 1-d vector")
    if not np.all(np.isfinite(vals)):
        raise InputError("values contain non-finite entries")
    rng = _as_rng(tie_seed)
    tiebreak = rng.random(vals.size)
    order = np.lexsort((tiebreak, vals))
    sigma = np.empty(vals.size, dtype=int)
    sigma[order] = np.arange(1, vals.size + 1)
    seed_val = tie_seed if isinstance(tie_seed, (int, np.integer)) else None
    return MarginPermutation(sigma, seed_val)


def quantize_q(dist: Distribution, n_members: int) -> np.ndarray:
    """Equidistant quantiles at levels (m - 1/2) / M, m = 1..M (sorted)."""
    if n_members < 1:
        raise InputError("need at least one member")
    taus = (np.arange(1, n_members + 1) - 0.5) / n_members
    values = np.asarray(dist.quantile(taus), dtype=float)
    return np.maximum.accumulate(values)


def quantize_r(dist: Distribution, n_members: int, seed) -> np.ndarray:
    """Inverse-transform sample of size M, deterministic given the seed."""
    if n_members < 1:
        raise InputError("need at least one member")
    rng = _as_rng(seed)
    return np.asarray(dist.sample(rng, n_members), dtype=float)


def quantize_t(dist: Distribution, raw_margin) -> np.ndarray:
    """Quantile mapping through a normal smoothing fit of the raw margin.

    The smoothing law S has the raw ensemble mean and variance (divisor M);
    member m maps to ``dist.quantile(S(x_m))``.  Unsupported for target
    distributions with discrete mass, where no smoothing recipe exists.
    """
    x = np.asarray(raw_margin, dtype=float)
    if x.ndim != 1 or x.size < 2 or not np.all(np.isfinite(x)):
        raise InputError("raw margin must be a finite vector of at least 2 values")
    if dist.atoms():
        raise UnsupportedSchemeError(
            "transformation quantization is undefined for distributions with a point mass"
        )
    var = float(x.var())
    if var == 0.0:
        raise DegenerateSmoothingError("raw margin has zero variance")
    u = special.ndtr((x - x.mean()) / np.sqrt(var))
    clipped = np.clip(u, U_CLIP, 1.0 - U_CLIP)
    if np.any(clipped != u):
        warnings.warn(
            "extreme member pushed the smoothing cdf to 0 or 1; value clamped",
            EnscopulaWarning,
            stacklevel=2,
        )
    return np.asarray(dist.quantile(clipped), dtype=float)


def _reorder(quantized: QuantizedEnsemble, perms, provenance: dict, valid_time) -> EccEnsemble:
    values = quantized.values
    m, ell = values.shape
    if len(perms) != ell:
        raise InputError(f"{ell} margins but {len(perms)} permutations")
    out = np.empty_like(values)
    for l, perm in enumerate(perms):
        if perm.sigma.size != m:
            raise InputError(
                f"margin {l}: permutation size {perm.sigma.size} != ensemble size {m}"
            )
        out[:, l] = np.sort(values[:, l])[perm.sigma - 1]
    return EccEnsemble(out, list(quantized.margin_index), valid_time, provenance)


def ecc_reorder(quantized: QuantizedEnsemble, perms) -> EccEnsemble:
    """Give member m the sigma_l(m)-th order statistic of each quantized margin."""
    provenance = {
        "scheme": quantized.scheme,
        "quantized": quantized.ident,
        "tie_seeds": [p.tie_seed for p in perms],
    }
    return _reorder(quantized, perms, provenance, quantized.valid_time)


def schaake_shuffle(
    quantized: QuantizedEnsemble, record: HistoricalRecord, tie_seed: int = 0
) -> EccEnsemble:
    """Reorder the quantized sample into the rank structure of a historical
    observation record of the same size."""
    if record.values.shape[0] != quantized.values.shape[0]:
        raise InputError(
            f"record size {record.values.shape[0]} != ensemble size {quantized.values.shape[0]}"
        )
    if record.values.shape[1] != quantized.values.shape[1]:
        raise InputError("record and quantized ensemble cover different margins")
    perms = [
        compute_ranks(record.values[:, l], derive_seed(tie_seed, l))
        for l in range(record.values.shape[1])
    ]
    provenance = {
        "scheme": "schaake",
        "quantized": quantized.ident,
        "tie_seed": tie_seed,
    }
    return _reorder(quantized, perms, provenance, quantized.valid_time)


def shuffle_margins(quantized: QuantizedEnsemble, seed: int) -> np.ndarray:
    """Randomly permute each margin independently.

    This is the reference arrangement for the individually postprocessed
    ensemble: margins keep their quantized values but carry no rank
    dependence on each other.
    """
    values = quantized.values.copy()
    for l in range(values.shape[1]):
        rng = derive_rng(seed, l)
        values[:, l] = rng.permutation(values[:, l])
    return values


def couple(
    raw: RawEnsemble,
    dists: list,
    scheme: str,
    master_seed: int = 0,
    record: HistoricalRecord | None = None,
) -> tuple[QuantizedEnsemble, EccEnsemble]:
    """Quantize every margin and reorder: the batch form of the coupling stage.

    Per-margin seeds are derived as child_seed = hash(master_seed, ordinal),
    so results do not depend on evaluation order.  ``scheme`` is one of
    q / r / t / schaake (the latter requires ``record``).
    """
    scheme = scheme.lower()
    if scheme not in (*ECC_SCHEMES, "schaake"):
        raise InputError(f"unknown coupling scheme {scheme!r}")
    if len(dists) != raw.n_margins:
        raise InputError(f"{raw.n_margins} margins but {len(dists)} distributions")
    m = raw.n_members
    cols = []
    for l, dist in enumerate(dists):
        if scheme == "r":
            cols.append(quantize_r(dist, m, derive_seed(master_seed, l, 0)))
        elif scheme == "t":
            cols.append(quantize_t(dist, raw.members[:, l]))
        else:  # q, also the margin sample for schaake
            cols.append(quantize_q(dist, m))
    quantized = QuantizedEnsemble(
        np.column_stack(cols),
        "q" if scheme == "schaake" else scheme,
        list(raw.margin_index),
        raw.valid_time,
        source_dists=list(dists),
        seed=master_seed,
    )
    if scheme == "schaake":
        if record is None:
            raise InputError("the schaake scheme requires a historical record")
        coupled = schaake_shuffle(quantized, record, derive_seed(master_seed, 1))
    else:
        perms = [
            compute_ranks(raw.members[:, l], derive_seed(master_seed, l, 1))
            for l in range(raw.n_margins)
        ]
        coupled = ecc_reorder(quantized, perms)
    coupled.provenance["raw"] = raw.ident
    coupled.provenance["master_seed"] = master_seed
    return quantized, coupled


# ---------------------------------------------------------------------------
# Empirical copulas and the discrete coupling identity
# ---------------------------------------------------------------------------


def _rank_matrix(values: np.ndarray) -> np.ndarray:
    """Deterministic per-margin ranks of a tie-free dataset."""
    m, ell = values.shape
    ranks = np.empty((m, ell), dtype=int)
    for l in range(ell):
        col = values[:, l]
        if np.unique(col).size != m:
            raise InputError(
                f"margin {l} has ties; resolve them with compute_ranks first"
            )
        order = np.argsort(col)
        ranks[order, l] = np.arange(1, m + 1)
    return ranks


def empirical_copula_eval(dataset, indices) -> float:
    """Empirical copula at (i_1/M, ..., i_L/M): the fraction of members whose
    per-margin ranks are all within the given index box."""
    values = _as_matrix(dataset, "dataset")
    m, ell = values.shape
    idx = np.asarray(indices, dtype=int)
    if idx.shape != (ell,):
        raise InputError(f"need {ell} indices, got {idx.shape}")
    if np.any(idx < 0) or np.any(idx > m):
        raise InputError(f"indices must lie in [0, {m}]")
    ranks = _rank_matrix(values)
    return float(np.mean(np.all(ranks <= idx, axis=1)))


@dataclass
class SklarReport:
    max_violation: float
    n_grid_points: int

    @property
    def passed(self) -> bool:
        return self.max_violation == 0.0


_BRUTE_MAX_MEMBERS = 20
_BRUTE_MAX_MARGINS = 4


def _check_brute_scale(values: np.ndarray):
    m, ell = values.shape
    if m > _BRUTE_MAX_MEMBERS or ell > _BRUTE_MAX_MARGINS:
        raise InputError(
            f"exhaustive grid check limited to M <= {_BRUTE_MAX_MEMBERS}, "
            f"L <= {_BRUTE_MAX_MARGINS}; got {m} x {ell}"
        )


_EINSUM_SPECS = {
    1: "ma->a",
    2: "ma,mb->ab",
    3: "ma,mb,mc->abc",
    4: "ma,mb,mc,md->abcd",
}


def _grid_identity_violation(copula_values: np.ndarray, margin_values: np.ndarray) -> SklarReport:
    """Max |ecdf(margin_values at y) - E_M(per-margin counts at y)| over the
    full cross-product grid of per-margin values."""
    m, ell = margin_values.shape
    ranks = _rank_matrix(copula_values)
    sorted_margins = np.sort(margin_values, axis=0)
    # per margin: member-below-level and rank-within-count indicators, (M, M)
    below = []
    within = []
    for l in range(ell):
        a = margin_values[:, l][:, None] <= sorted_margins[:, l][None, :]
        counts = a.sum(axis=0)
        below.append(a.astype(float))
        within.append((ranks[:, l][:, None] <= counts[None, :]).astype(float))
    spec = _EINSUM_SPECS[ell]
    lhs = np.einsum(spec, *below) / m
    rhs = np.einsum(spec, *within) / m
    return SklarReport(float(np.max(np.abs(lhs - rhs))), m**ell)


def verify_discrete_sklar(ensemble) -> SklarReport:
    """Check that the multivariate ecdf factors through the empirical copula
    and the marginal ecdfs at every grid point of per-margin values.

    The left side counts members dominated by the grid point on raw values;
    the right side evaluates the rank-based copula at the per-margin counts.
    For a tie-free ensemble the max violation must be exactly zero.
    """
    values = ensemble.members if isinstance(ensemble, RawEnsemble) else _as_matrix(ensemble, "ensemble")
    _check_brute_scale(values)
    return _grid_identity_violation(values, values)


def verify_ecc_sklar(raw, coupled) -> SklarReport:
    """Check the coupled ensemble against the raw ensemble's copula evaluated
    at the quantized margins' ecdfs (the reordering identity)."""
    raw_values = raw.members if isinstance(raw, RawEnsemble) else _as_matrix(raw, "raw")
    out_values = coupled.values if isinstance(coupled, EccEnsemble) else _as_matrix(coupled, "coupled")
    if raw_values.shape != out_values.shape:
        raise InputError("raw and coupled ensembles must have matching shape")
    _check_brute_scale(raw_values)
    return _grid_identity_violation(raw_values, out_values)
