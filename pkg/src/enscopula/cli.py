"""Command line interface.

Subcommands mirror the pipeline stages: ``synth`` writes a synthetic
scenario to CSV, ``fit`` estimates per-margin models over a rolling
window, ``predict`` turns fitted parameters into predictive distribution
records, ``couple`` quantizes and reorders into a coupled ensemble,
``verify`` scores stored ensembles, and ``pipeline`` runs everything end
to end.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.  Errors are
reported as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import coupling, postprocess, synthetic, workbench
from .distributions import distribution_from_dict
from .errors import EnscopulaError, InputError
from .postprocess import MarginIndex
from .workbench import PipelineConfig, _parse_time

DEFAULT_WINDOW_DAYS = 30


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through our exit codes
        raise InputError(message)


def _common_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed (default 0)")
    common.add_argument(
        "--window-days", type=int, default=None, help=f"training window length (default {DEFAULT_WINDOW_DAYS})"
    )
    common.add_argument("--config", default=None, help="JSON file providing option defaults")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _Parser(prog="enscopula", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario as CSV")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--margins", type=int, default=None)
    p.add_argument("--members", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--correlation", type=float, default=None)
    p.add_argument("--bias", type=float, default=None)
    p.add_argument("--dispersion", type=float, default=None)
    p.add_argument("--zero-inflation", type=float, default=None)
    p.add_argument("--kinds", default=None, help="comma list of continuous|precip per margin")

    p = sub.add_parser("fit", parents=[common], help="fit per-margin models over a rolling window")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--valid-time", required=True)
    p.add_argument("--models", default=None, help='JSON map variable -> model, e.g. {"temp": "nr-normal"}')
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", parents=[common], help="apply fitted parameters to forecasts")
    p.add_argument("--params", required=True)
    p.add_argument("--forecasts", required=True)
    p.add_argument("--valid-time", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("couple", parents=[common], help="quantize and reorder into a coupled ensemble")
    p.add_argument("--dists", required=True, help="distribution records from predict")
    p.add_argument("--forecasts", required=True, help="raw ensemble CSV supplying the rank structure")
    p.add_argument("--valid-time", required=True)
    p.add_argument("--scheme", choices=["q", "r", "t", "schaake"], default="q")
    p.add_argument("--record", default=None, help="observation CSV for the schaake scheme")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("verify", parents=[common], help="score stored ensembles against observations")
    p.add_argument("--ensembles", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("pipeline", parents=[common], help="run the full postprocess/couple/verify pipeline")
    p.add_argument("--forecasts", default=None)
    p.add_argument("--observations", default=None)
    p.add_argument("--scenario", default=None, help="scenario config JSON (generates data in memory)")
    p.add_argument("--models", default=None)
    p.add_argument("--scheme", choices=["q", "r", "t", "schaake"], default=None)
    p.add_argument("--test-start", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-plots", action="store_true")
    return parser


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(args, cfg: dict, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return cfg.get(key, default)


def _parse_models(text, cfg: dict) -> dict:
    if text is None:
        models = cfg.get("models")
        if models is None:
            raise InputError("no model assignment given (--models or config 'models')")
        return dict(models)
    try:
        models = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"--models is not valid JSON: {exc}") from exc
    if not isinstance(models, dict):
        raise InputError("--models must be a JSON object mapping variable to model")
    return models


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    kinds = _resolve(args, cfg, "kinds")
    if isinstance(kinds, str):
        kinds = tuple(k.strip() for k in kinds.split(","))
    scenario = synthetic.ScenarioConfig(
        n_margins=int(_resolve(args, cfg, "margins", 2)),
        n_members=int(_resolve(args, cfg, "members", 10)),
        n_days=int(_resolve(args, cfg, "days", 80)),
        correlation=float(_resolve(args, cfg, "correlation", 0.6)),
        bias=float(_resolve(args, cfg, "bias", 1.0)),
        dispersion_factor=float(_resolve(args, cfg, "dispersion", 0.7)),
        zero_inflation=float(_resolve(args, cfg, "zero_inflation", 0.0)),
        seed=int(_resolve(args, cfg, "seed", 0)),
        margin_kinds=tuple(kinds) if kinds else (),
    )
    data = synthetic.generate_scenario(scenario)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workbench.write_forecast_csv(out / "forecasts.csv", data.ensembles)
    rows = [
        (t, m.variable, m.location, data.observations[i, pos])
        for i, t in enumerate(data.times)
        for pos, m in enumerate(data.margins)
    ]
    workbench.write_observation_csv(out / "observations.csv", rows)
    _write_json(out / "scenario.json", scenario.to_dict())
    print(f"wrote {out / 'forecasts.csv'}, {out / 'observations.csv'}")
    return 0


def _cmd_fit(args) -> int:
    cfg = _load_config(args)
    models = _parse_models(args.models, cfg)
    window_days = int(_resolve(args, cfg, "window_days", DEFAULT_WINDOW_DAYS))
    valid_time = _parse_time(args.valid_time, "--valid-time")
    dataset = workbench.ingest(args.forecasts, args.observations)
    records = []
    errors = []
    for margin in dataset.margins:
        if margin.variable not in models:
            raise InputError(f"no model assigned for variable {margin.variable!r}")
        model = models[margin.variable]
        try:
            window = postprocess.roll_window(dataset.margin_history(margin), valid_time, window_days)
            params = postprocess.fit_model(model, window)
        except EnscopulaError as exc:
            errors.append({"margin": margin.to_dict(), "error": str(exc)})
            continue
        records.append(postprocess.fit_record(margin, model, params, window))
    if not records:
        raise InputError(f"no margin could be fit: {errors}")
    _write_json(args.out, {"valid_time": str(valid_time), "fits": records, "errors": errors})
    print(f"fit {len(records)} margins -> {args.out}")
    return 0


def _read_fits(path) -> list:
    try:
        payload = json.loads(Path(path).read_text())
        return payload["fits"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read fit records from {path}: {exc}") from exc


def _cmd_predict(args) -> int:
    valid_time = _parse_time(args.valid_time, "--valid-time")
    margins, _, forecasts = workbench.read_forecast_csv(args.forecasts)
    records = []
    for fit in _read_fits(args.params):
        margin = MarginIndex.from_dict(fit["margin"])
        model = fit["model"]
        key = (valid_time, margin)
        if key not in forecasts:
            raise InputError(f"no forecast row for {margin.key()} at {valid_time}")
        params = postprocess.params_from_dict(model, fit["params"])
        dist = postprocess.predict_model(model, params, forecasts[key])
        records.append(
            {"margin": margin.to_dict(), "model": model, "distribution": dist.to_dict()}
        )
    _write_json(args.out, {"valid_time": str(valid_time), "distributions": records})
    print(f"predicted {len(records)} margins -> {args.out}")
    return 0


def _cmd_couple(args) -> int:
    cfg = _load_config(args)
    seed = int(_resolve(args, cfg, "seed", 0))
    valid_time = _parse_time(args.valid_time, "--valid-time")
    try:
        payload = json.loads(Path(args.dists).read_text())
        dist_records = payload["distributions"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read distributions from {args.dists}: {exc}") from exc

    margins, n_members, forecasts = workbench.read_forecast_csv(args.forecasts)
    order = []
    dists = []
    for rec in dist_records:
        margin = MarginIndex.from_dict(rec["margin"])
        if (valid_time, margin) not in forecasts:
            raise InputError(f"no raw forecast for {margin.key()} at {valid_time}")
        order.append(margin)
        dists.append(distribution_from_dict(rec["distribution"]))
    if not order:
        raise InputError("no distribution records to couple")
    raw = coupling.RawEnsemble(
        np.column_stack([forecasts[(valid_time, m)] for m in order]), order, valid_time
    )
    record = None
    if args.scheme == "schaake":
        if not args.record:
            raise InputError("--record is required for the schaake scheme")
        obs = workbench.read_observation_csv(args.record)
        by_time: dict = {}
        for (t, variable, location), value in obs.items():
            by_time.setdefault(t, {})[(variable, location)] = value
        rows = []
        for t in sorted(by_time, reverse=True):
            vals = [by_time[t].get((m.variable, m.location)) for m in order]
            if all(v is not None for v in vals) and t < valid_time:
                rows.append(vals)
            if len(rows) == n_members:
                break
        if len(rows) < n_members:
            raise InputError(
                f"record has only {len(rows)} complete days before {valid_time}, need {n_members}"
            )
        rows.reverse()
        record = coupling.HistoricalRecord(np.array(rows, dtype=float), order)
    quantized, coupled = coupling.couple(raw, dists, args.scheme, seed, record)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workbench.write_forecast_csv(out / "forecasts_ecc.csv", [coupled])
    _write_json(
        out / "forecasts_ecc.provenance.json",
        {
            "valid_time": str(valid_time),
            "scheme": args.scheme,
            "seed": seed,
            "raw": raw.ident,
            "quantized": quantized.ident,
        },
    )
    print(f"coupled {len(order)} margins -> {out / 'forecasts_ecc.csv'}")
    return 0


def _cmd_verify(args) -> int:
    cfg = _load_config(args)
    seed = int(_resolve(args, cfg, "seed", 0))
    dataset = workbench.ingest(args.ensembles, args.observations)
    report = workbench.score_ensembles(dataset, tie_seed=seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_cases_csv(out / "scores_cases.csv")
    _write_json(out / "scores_aggregate.json", report.aggregates())
    report.write_histogram_csvs(out / "histograms")
    if not args.no_plots:
        from . import plots

        plots.render_report_figures(report, out / "figures")
    print(f"scored {len(report.records)} cases -> {out}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    seed = int(_resolve(args, cfg, "seed", 0))
    window_days = int(_resolve(args, cfg, "window_days", DEFAULT_WINDOW_DAYS))
    scheme = _resolve(args, cfg, "scheme", "q")
    test_start = _resolve(args, cfg, "test_start")
    if isinstance(test_start, str):
        test_start = _parse_time(test_start, "--test-start")

    if args.forecasts and args.observations:
        dataset = workbench.ingest(args.forecasts, args.observations)
        models = _parse_models(args.models, cfg)
    elif args.forecasts or args.observations:
        raise InputError("--forecasts and --observations must be given together")
    else:
        if args.scenario:
            scenario_cfg = json.loads(Path(args.scenario).read_text())
            scenario_cfg.setdefault("seed", seed)
            scenario = synthetic.ScenarioConfig.from_dict(scenario_cfg)
        else:  # bundled default: biased, underdispersed, correlated pair
            scenario = synthetic.ScenarioConfig(
                n_margins=2,
                n_members=10,
                n_days=80,
                correlation=0.6,
                bias=1.0,
                dispersion_factor=0.7,
                seed=seed,
            )
        dataset = workbench.dataset_from_scenario(synthetic.generate_scenario(scenario))
        models = _parse_models(args.models, cfg) if (args.models or "models" in cfg) else {
            v: "nr-normal" for v in dataset.variables()
        }

    config = PipelineConfig(
        models=models,
        window_days=window_days,
        scheme=scheme,
        seed=seed,
        test_start=test_start,
        emit_plots=not args.no_plots,
    )
    result = workbench.run_pipeline(dataset, config)
    written = workbench.write_pipeline_outputs(result, args.out_dir)
    print(
        f"pipeline: {len(result.test_times)} test days, "
        f"{len(result.skipped)} skips, {len(written)} files -> {args.out_dir}"
    )
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "couple": _cmd_couple,
    "verify": _cmd_verify,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except InputError as exc:
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except EnscopulaError as exc:
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - report, then fail with the runtime code
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
