"""CSV ingestion, pipeline orchestration and output serialization.

The pipeline runs the three coupling stages for every test day: fit and
apply a univariate model per margin over a rolling window, quantize the
predictive distributions, and reorder.  Three ensemble systems are scored
side by side for every completed case: the raw ensemble, the independently
arranged quantized sample, and the coupled (rank-reordered) ensemble.

All randomness derives from the run seed, so identical inputs and seeds
produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from . import coupling, postprocess, verification
from .coupling import HistoricalRecord, RawEnsemble, derive_rng, derive_seed
from .errors import EnscopulaError, EnscopulaWarning, InputError, InsufficientTrainingDataError
from .postprocess import MODELS, MarginIndex, TrainingCase
from .verification import HistogramSpec, ScoreRecord, ScoreReport

__all__ = [
    "ForecastDataset",
    "PipelineConfig",
    "PipelineResult",
    "ingest",
    "dataset_from_scenario",
    "run_pipeline",
    "write_pipeline_outputs",
    "write_forecast_csv",
    "write_observation_csv",
    "read_forecast_csv",
    "read_observation_csv",
    "ensemble_rows",
    "score_ensembles",
]

FORECAST_FIXED_COLUMNS = ("valid_time", "variable", "location", "lead_hours")
OBSERVATION_COLUMNS = ("valid_time", "variable", "location", "value")

SYSTEM_RAW = "raw"
SYSTEM_INDEPENDENT = "independent"
SYSTEM_COUPLED = "ecc"
SYSTEM_MARGINAL = "marginal"

JOINT_SCOPE = "joint"
MV_RANK_MAX_MARGINS = 3


def _parse_time(text: str, where: str):
    text = text.strip()
    try:
        if len(text) == 10:
            return date.fromisoformat(text)
        return datetime.fromisoformat(text)
    except ValueError as exc:
        raise InputError(f"{where}: cannot parse valid_time {text!r}") from exc


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise InputError(f"{where}: cannot parse number {text!r}") from exc
    if not np.isfinite(value):
        raise InputError(f"{where}: non-finite value {text!r}")
    return value


def _member_columns(n_members: int) -> list[str]:
    width = max(2, len(str(n_members)))
    return [f"member_{m + 1:0{width}d}" for m in range(n_members)]


@dataclass
class ForecastDataset:
    """Joined, time-sorted forecast and observation store keyed by margin."""

    margins: list
    n_members: int
    times: list
    forecasts: dict  # (time, margin) -> np.ndarray of member values
    observations: dict  # (time, margin) -> float
    missing_observations: list = field(default_factory=list)

    def variables(self) -> list[str]:
        return sorted({m.variable for m in self.margins})

    def margin_history(self, margin: MarginIndex) -> list:
        """Training cases (forecast plus observation) for one margin."""
        out = []
        for t in self.times:
            ens = self.forecasts.get((t, margin))
            obs = self.observations.get((t, margin))
            if ens is not None and obs is not None:
                out.append(TrainingCase(t, ens, obs))
        return out


def read_forecast_csv(path) -> tuple[list, int, dict]:
    """Parse a forecast file into (margins, n_members, {(time, margin): values})."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if tuple(header[:4]) != FORECAST_FIXED_COLUMNS:
            raise InputError(
                f"{path}: header must start with {','.join(FORECAST_FIXED_COLUMNS)}"
            )
        member_cols = header[4:]
        n_members = len(member_cols)
        if n_members < 2:
            raise InputError(f"{path}: need at least 2 member columns")
        if member_cols != _member_columns(n_members):
            raise InputError(f"{path}: member columns must be {_member_columns(n_members)}")

        forecasts: dict = {}
        margins: list = []
        seen_margins = set()
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != 4 + n_members:
                raise InputError(f"{where}: expected {4 + n_members} fields, got {len(row)}")
            t = _parse_time(row[0], where)
            try:
                lead = int(row[3])
            except ValueError as exc:
                raise InputError(f"{where}: bad lead_hours {row[3]!r}") from exc
            try:
                margin = MarginIndex(row[1].strip(), row[2].strip(), lead)
            except InputError as exc:
                raise InputError(f"{where}: {exc}") from exc
            key = (t, margin)
            if key in forecasts:
                raise InputError(f"{where}: duplicate forecast row for {margin.key()} at {t}")
            forecasts[key] = np.array(
                [_parse_float(v, where) for v in row[4:]], dtype=float
            )
            if margin not in seen_margins:
                seen_margins.add(margin)
                margins.append(margin)
    return margins, n_members, forecasts


def read_observation_csv(path) -> dict:
    """Parse an observation file into {(time, variable, location): value}."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if tuple(header) != OBSERVATION_COLUMNS:
            raise InputError(f"{path}: header must be {','.join(OBSERVATION_COLUMNS)}")
        out: dict = {}
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != 4:
                raise InputError(f"{where}: expected 4 fields, got {len(row)}")
            t = _parse_time(row[0], where)
            key = (t, row[1].strip(), row[2].strip())
            if key in out:
                raise InputError(f"{where}: duplicate observation for {key}")
            out[key] = _parse_float(row[3], where)
    return out


def ingest(forecast_csv, observation_csv) -> ForecastDataset:
    """Join forecast and observation files into a time-sorted dataset.

    Forecast rows without a matching observation are kept for prediction
    but flagged and excluded from training.
    """
    margins, n_members, forecasts = read_forecast_csv(forecast_csv)
    obs_raw = read_observation_csv(observation_csv)
    observations: dict = {}
    missing: list = []
    for (t, margin) in forecasts:
        key = (t, margin.variable, margin.location)
        if key in obs_raw:
            observations[(t, margin)] = obs_raw[key]
        else:
            missing.append((t, margin))
    try:
        times = sorted({t for t, _ in forecasts})
    except TypeError as exc:
        raise InputError("valid_time values mix date and datetime formats") from exc
    if missing:
        warnings.warn(
            f"{len(missing)} forecast rows have no matching observation",
            EnscopulaWarning,
            stacklevel=2,
        )
    return ForecastDataset(margins, n_members, times, forecasts, observations, missing)


def dataset_from_scenario(data) -> ForecastDataset:
    """Adapt generated scenario output to the ingestion format."""
    forecasts = {}
    observations = {}
    for t, ens, obs in zip(data.times, data.ensembles, data.observations):
        for pos, margin in enumerate(data.margins):
            forecasts[(t, margin)] = ens.members[:, pos]
            observations[(t, margin)] = float(obs[pos])
    return ForecastDataset(
        list(data.margins),
        data.config.n_members,
        list(data.times),
        forecasts,
        observations,
    )


def ensemble_rows(ensemble) -> list[list]:
    """CSV rows (one per margin) for a raw or coupled ensemble."""
    values = ensemble.members if isinstance(ensemble, RawEnsemble) else ensemble.values
    rows = []
    for pos, margin in enumerate(ensemble.margin_index):
        rows.append(
            [
                ensemble.valid_time.isoformat(),
                margin.variable,
                margin.location,
                margin.lead_hours,
                *[repr(float(v)) for v in values[:, pos]],
            ]
        )
    return rows


def write_forecast_csv(path, ensembles):
    sizes = {e.members.shape[0] if isinstance(e, RawEnsemble) else e.values.shape[0] for e in ensembles}
    if len(sizes) != 1:
        raise InputError(f"inconsistent member counts across ensembles: {sorted(sizes)}")
    (n_members,) = sizes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*FORECAST_FIXED_COLUMNS, *_member_columns(n_members)])
        for ensemble in ensembles:
            writer.writerows(ensemble_rows(ensemble))


def write_observation_csv(path, rows):
    """rows: iterable of (time, variable, location, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OBSERVATION_COLUMNS)
        for t, variable, location, value in rows:
            writer.writerow([t.isoformat(), variable, location, repr(float(value))])


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Model assignment and run settings for the end-to-end pipeline."""

    models: dict
    window_days: int = 30
    scheme: str = "q"
    seed: int = 0
    test_start: object = None
    min_train_cases: int = postprocess.MIN_TRAIN_CASES
    pit_bins: int = 20
    emit_plots: bool = True

    def __post_init__(self):
        if self.scheme not in ("q", "r", "t", "schaake"):
            raise InputError(f"unknown coupling scheme {self.scheme!r}")
        if self.window_days <= 0:
            raise InputError("window_days must be positive")
        for variable, model in self.models.items():
            if model not in MODELS:
                raise InputError(
                    f"variable {variable!r}: unknown model {model!r}; choose from {sorted(MODELS)}"
                )

    def model_for(self, margin: MarginIndex) -> str:
        if margin.variable not in self.models:
            raise InputError(f"no model assigned for variable {margin.variable!r}")
        return self.models[margin.variable]

    def to_dict(self) -> dict:
        return {
            "models": dict(self.models),
            "window_days": self.window_days,
            "scheme": self.scheme,
            "seed": self.seed,
            "test_start": None if self.test_start is None else str(self.test_start),
            "min_train_cases": self.min_train_cases,
            "pit_bins": self.pit_bins,
        }


@dataclass
class PipelineResult:
    config: PipelineConfig
    test_times: list
    ecc: list  # EccEnsemble per completed test case
    quantized: list
    independent: list  # independently arranged member matrices, aligned to ecc
    report: ScoreReport
    joint_margins: list
    skipped: list

    def mean_score(self, scope: str, system: str, metric: str = "crps") -> float:
        return self.report.mean(scope, system, metric)


def _dist_crps(dist, y: float) -> float:
    crps = getattr(dist, "crps", None)
    if crps is not None:
        return float(crps(y))
    return verification.crps_numeric(dist, y)


def _historical_record(dataset, margins, t, n_members):
    """Most recent n_members days with observations for all margins before t."""
    rows = []
    for past in reversed(dataset.times):
        if past >= t:
            continue
        obs = [dataset.observations.get((past, m)) for m in margins]
        if all(o is not None for o in obs):
            rows.append(obs)
        if len(rows) == n_members:
            break
    if len(rows) < n_members:
        raise InsufficientTrainingDataError(
            f"only {len(rows)} complete observation days before {t}, need {n_members}"
        )
    rows.reverse()
    return HistoricalRecord(np.array(rows, dtype=float), list(margins))


def run_pipeline(dataset: ForecastDataset, config: PipelineConfig) -> PipelineResult:
    """Roll, fit, predict, quantize, reorder and score every test day.

    Margin failures (short windows, degenerate fits) are recorded and the
    margin is skipped for that day; the run continues.
    """
    for margin in dataset.margins:
        config.model_for(margin)  # raise early on unassigned variables

    histories = {m: dataset.margin_history(m) for m in dataset.margins}
    if config.test_start is None:
        first = dataset.times[0] + timedelta(days=config.window_days)
        test_times = [t for t in dataset.times if t >= first]
    else:
        test_times = [t for t in dataset.times if t >= config.test_start]
    if not test_times:
        raise InsufficientTrainingDataError(
            "no test days remain after reserving the training window"
        )

    report = ScoreReport()
    skipped: list = []
    ecc_out: list = []
    quantized_out: list = []
    independent_out: list = []

    pits: dict = {m: [] for m in dataset.margins}
    ranks: dict = {
        (system, m): []
        for system in (SYSTEM_RAW, SYSTEM_INDEPENDENT, SYSTEM_COUPLED)
        for m in dataset.margins
    }
    # per-day member matrices and observations for the joint scores
    day_columns: list = []

    for day_i, t in enumerate(test_times):
        margins_today = []
        dists = []
        for margin in dataset.margins:
            ens = dataset.forecasts.get((t, margin))
            if ens is None:
                skipped.append({"valid_time": str(t), "margin": margin.key(), "reason": "no forecast"})
                continue
            try:
                window = postprocess.roll_window(histories[margin], t, config.window_days)
                if len(window) < config.min_train_cases:
                    raise InsufficientTrainingDataError(
                        f"{len(window)} cases < {config.min_train_cases}"
                    )
                model = config.model_for(margin)
                params = postprocess.fit_model(model, window)
                dist = postprocess.predict_model(model, params, ens)
            except EnscopulaError as exc:
                skipped.append({"valid_time": str(t), "margin": margin.key(), "reason": str(exc)})
                continue
            margins_today.append(margin)
            dists.append(dist)

        if not margins_today:
            continue

        positions = [dataset.margins.index(m) for m in margins_today]
        raw = RawEnsemble(
            np.column_stack([dataset.forecasts[(t, m)] for m in margins_today]),
            margins_today,
            t,
        )
        day_seed = derive_seed(config.seed, day_i)
        record = None
        if config.scheme == "schaake":
            try:
                record = _historical_record(dataset, margins_today, t, raw.n_members)
            except InsufficientTrainingDataError as exc:
                skipped.append({"valid_time": str(t), "margin": "*", "reason": str(exc)})
                continue
        quantized, coupled = coupling.couple(raw, dists, config.scheme, day_seed, record)
        independent = coupling.shuffle_margins(quantized, derive_seed(config.seed, day_i, 999))
        ecc_out.append(coupled)
        quantized_out.append(quantized)
        independent_out.append(independent)

        obs_vec = {m: dataset.observations.get((t, m)) for m in margins_today}
        systems = {
            SYSTEM_RAW: raw.members,
            SYSTEM_INDEPENDENT: independent,
            SYSTEM_COUPLED: coupled.values,
        }
        for col, (margin, dist) in enumerate(zip(margins_today, dists)):
            y = obs_vec[margin]
            if y is None:
                continue
            g = positions[col]
            scope = margin.key()
            for tag, (system, values) in enumerate(systems.items()):
                member_col = values[:, col]
                report.add(
                    ScoreRecord(
                        t,
                        scope,
                        system,
                        crps=verification.crps_ensemble(member_col, y),
                        abs_error=abs(float(np.median(member_col)) - y),
                    )
                )
                ranks[(system, margin)].append(
                    verification.verification_rank(
                        member_col, y, derive_seed(config.seed, day_i, g, 10 + tag)
                    )
                )
            report.add(
                ScoreRecord(
                    t,
                    scope,
                    SYSTEM_MARGINAL,
                    crps=_dist_crps(dist, y),
                    abs_error=verification.abs_error_at_median(dist, y),
                )
            )
            pits[margin].append(
                verification.pit(dist, y, derive_rng(config.seed, day_i, g, 20))
            )

        day_columns.append(
            {
                "time": t,
                "day_i": day_i,
                "margins": list(margins_today),
                "systems": systems,
                "obs": obs_vec,
            }
        )

    if not ecc_out:
        raise InsufficientTrainingDataError("no test day completed any margin")

    # Joint scores over the margins completed (with observations) on every day
    joint: list = []
    if day_columns:
        candidate = set(day_columns[0]["margins"])
        for day in day_columns:
            candidate &= {m for m in day["margins"] if day["obs"][m] is not None}
        joint = [m for m in dataset.margins if m in candidate]
    if len(joint) < 2:
        joint = []

    if joint:
        n_days = len(day_columns)
        n_members = dataset.n_members
        obs_mat = np.array(
            [[day["obs"][m] for m in joint] for day in day_columns], dtype=float
        )
        members_by_system = {}
        for system in (SYSTEM_RAW, SYSTEM_INDEPENDENT, SYSTEM_COUPLED):
            stacked = np.empty((n_days, n_members, len(joint)))
            for i, day in enumerate(day_columns):
                cols = [day["margins"].index(m) for m in joint]
                stacked[i] = day["systems"][system][:, cols]
            members_by_system[system] = stacked

        # energy scores on margins standardized by test-set observation stats
        mv_ranks = {s: [] for s in members_by_system}
        for system, stacked in members_by_system.items():
            std_members, std_obs, _ = verification.standardize_margins(stacked, obs_mat)
            for i, day in enumerate(day_columns):
                report.add(
                    ScoreRecord(
                        day["time"],
                        JOINT_SCOPE,
                        system,
                        energy_score=verification.energy_score_ensemble(
                            std_members[i], std_obs[i]
                        ),
                    )
                )
                if len(joint) <= MV_RANK_MAX_MARGINS:
                    tag = 30 + list(members_by_system).index(system)
                    mv_ranks[system].append(
                        verification.multivariate_rank(
                            stacked[i],
                            obs_mat[i],
                            derive_seed(config.seed, day["day_i"], tag),
                        )
                    )
        for system, values in mv_ranks.items():
            if values:
                report.histograms[f"mvrank_{system}"] = verification.build_histogram(
                    values, HistogramSpec(dataset.n_members + 1, "multivariate-rank")
                )

    for margin in dataset.margins:
        if pits[margin]:
            report.histograms[f"pit_{margin.key()}"] = verification.build_histogram(
                pits[margin], HistogramSpec(config.pit_bins, "pit")
            )
        for system in (SYSTEM_RAW, SYSTEM_INDEPENDENT, SYSTEM_COUPLED):
            if ranks[(system, margin)]:
                report.histograms[
                    f"rank_{system}_{margin.key()}"
                ] = verification.build_histogram(
                    ranks[(system, margin)],
                    HistogramSpec(dataset.n_members + 1, "rank"),
                )

    return PipelineResult(
        config,
        [day["time"] for day in day_columns],
        ecc_out,
        quantized_out,
        independent_out,
        report,
        joint,
        skipped,
    )


def score_ensembles(dataset: ForecastDataset, tie_seed: int = 0) -> ScoreReport:
    """Score a stored ensemble file against observations: per-margin CRPS,
    absolute error of the ensemble median, rank histograms, and joint energy
    score plus multivariate ranks where the dimension is small."""
    report = ScoreReport()
    ranks: dict = {m: [] for m in dataset.margins}
    rows = []
    for di, t in enumerate(dataset.times):
        margins_t = [m for m in dataset.margins if (t, m) in dataset.forecasts]
        scored = [m for m in margins_t if (t, m) in dataset.observations]
        for g, margin in enumerate(scored):
            values = dataset.forecasts[(t, margin)]
            y = dataset.observations[(t, margin)]
            report.add(
                ScoreRecord(
                    t,
                    margin.key(),
                    "ensemble",
                    crps=verification.crps_ensemble(values, y),
                    abs_error=abs(float(np.median(values)) - y),
                )
            )
            ranks[margin].append(
                verification.verification_rank(values, y, derive_seed(tie_seed, di, g))
            )
        if len(scored) >= 2 and scored == margins_t:
            rows.append((t, scored))

    joint = None
    if len(rows) >= 2:  # standardization needs a real test-set spread
        joint = rows[0][1]
        if all(r[1] == joint for r in rows) and len(joint) >= 2:
            members = np.stack(
                [
                    np.column_stack([dataset.forecasts[(t, m)] for m in joint])
                    for t, _ in rows
                ]
            )
            obs = np.array(
                [[dataset.observations[(t, m)] for m in joint] for t, _ in rows]
            )
            std_members, std_obs, _ = verification.standardize_margins(members, obs)
            mv = []
            for i, (t, _) in enumerate(rows):
                report.add(
                    ScoreRecord(
                        t,
                        JOINT_SCOPE,
                        "ensemble",
                        energy_score=verification.energy_score_ensemble(
                            std_members[i], std_obs[i]
                        ),
                    )
                )
                if len(joint) <= MV_RANK_MAX_MARGINS:
                    mv.append(
                        verification.multivariate_rank(
                            members[i], obs[i], derive_seed(tie_seed, i, 40)
                        )
                    )
            if mv:
                report.histograms["mvrank_ensemble"] = verification.build_histogram(
                    mv, HistogramSpec(dataset.n_members + 1, "multivariate-rank")
                )
    for margin, values in ranks.items():
        if values:
            report.histograms[f"rank_ensemble_{margin.key()}"] = verification.build_histogram(
                values, HistogramSpec(dataset.n_members + 1, "rank")
            )
    return report


def write_pipeline_outputs(result: PipelineResult, out_dir, emit_plots: bool | None = None) -> list:
    """Write the coupled ensembles, score report, histogram tables and
    figures; returns the list of written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    ecc_csv = out_dir / "forecasts_ecc.csv"
    write_forecast_csv(ecc_csv, result.ecc)
    written.append(ecc_csv)

    provenance = {
        "scheme": result.config.scheme,
        "seed": result.config.seed,
        "cases": [
            {"valid_time": str(e.valid_time), **{k: v for k, v in e.provenance.items() if k != "tie_seeds"}}
            for e in result.ecc
        ],
    }
    prov_path = out_dir / "forecasts_ecc.provenance.json"
    prov_path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    written.append(prov_path)

    cases_csv = out_dir / "scores_cases.csv"
    result.report.write_cases_csv(cases_csv)
    written.append(cases_csv)

    agg = {
        "config": result.config.to_dict(),
        "joint_margins": [m.key() for m in result.joint_margins],
        "n_test_days": len(result.test_times),
        "skipped": result.skipped,
        **result.report.aggregates(),
    }
    agg_path = out_dir / "scores_aggregate.json"
    agg_path.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    written.append(agg_path)

    written.extend(result.report.write_histogram_csvs(out_dir / "histograms"))

    if emit_plots is None:
        emit_plots = result.config.emit_plots
    if emit_plots:
        from . import plots

        written.extend(plots.render_report_figures(result.report, out_dir / "figures"))
    return written
