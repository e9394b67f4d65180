"""Ingestion, pipeline orchestration and CLI behaviour."""

import json
from datetime import date

import numpy as np
import pytest

from enscopula import cli, synthetic, workbench
from enscopula.errors import EnscopulaWarning, InputError
from enscopula.postprocess import MarginIndex
from enscopula.workbench import PipelineConfig

FORECAST_HEADER = "valid_time,variable,location,lead_hours,member_01,member_02,member_03"


def write_small_files(tmp_path, drop_obs=(), extra_forecast_lines=(), extra_obs_lines=()):
    fc = tmp_path / "forecasts.csv"
    ob = tmp_path / "observations.csv"
    f_lines = [FORECAST_HEADER]
    o_lines = ["valid_time,variable,location,value"]
    rng = np.random.default_rng(0)
    for day in range(1, 15):
        t = f"2020-01-{day:02d}"
        for variable, location in (("temp", "a"), ("temp", "b"), ("wind", "a")):
            vals = rng.normal(size=3)
            f_lines.append(
                f"{t},{variable},{location},24," + ",".join(repr(float(v)) for v in vals)
            )
            if (t, variable, location) not in drop_obs:
                o_lines.append(f"{t},{variable},{location},{float(rng.normal())!r}")
    f_lines.extend(extra_forecast_lines)
    o_lines.extend(extra_obs_lines)
    fc.write_text("\n".join(f_lines) + "\n")
    ob.write_text("\n".join(o_lines) + "\n")
    return fc, ob


class TestIngest:
    def test_three_margins_parsed(self, tmp_path):
        fc, ob = write_small_files(tmp_path)
        ds = workbench.ingest(fc, ob)
        assert len(ds.margins) == 3
        assert ds.n_members == 3
        assert len(ds.times) == 14
        for margin in ds.margins:
            assert len(ds.margin_history(margin)) == 14

    def test_missing_observation_flagged_but_forecast_kept(self, tmp_path):
        fc, ob = write_small_files(tmp_path, drop_obs={("2020-01-05", "temp", "a")})
        with pytest.warns(EnscopulaWarning):
            ds = workbench.ingest(fc, ob)
        margin = MarginIndex("temp", "a", 24)
        assert (date(2020, 1, 5), margin) in ds.forecasts
        assert (date(2020, 1, 5), margin) not in ds.observations
        assert len(ds.margin_history(margin)) == 13
        assert (date(2020, 1, 5), margin) in ds.missing_observations

    def test_duplicate_forecast_row_is_hard_error(self, tmp_path):
        dup = "2020-01-03,temp,a,24,0.1,0.2,0.3"
        fc, ob = write_small_files(tmp_path, extra_forecast_lines=[dup])
        with pytest.raises(InputError, match="duplicate"):
            workbench.ingest(fc, ob)

    def test_duplicate_observation_row_is_hard_error(self, tmp_path):
        dup = "2020-01-03,temp,a,0.5"
        fc, ob = write_small_files(tmp_path, extra_obs_lines=[dup])
        with pytest.raises(InputError, match="duplicate"):
            workbench.ingest(fc, ob)

    def test_malformed_row_reports_line_number(self, tmp_path):
        bad = "2020-01-20,temp,a,24,not-a-number,0.2,0.3"
        fc, ob = write_small_files(tmp_path, extra_forecast_lines=[bad])
        with pytest.raises(InputError, match=r":44"):
            workbench.ingest(fc, ob)

    def test_wrong_field_count_reports_line_number(self, tmp_path):
        bad = "2020-01-20,temp,a,24,0.1,0.2"
        fc, ob = write_small_files(tmp_path, extra_forecast_lines=[bad])
        with pytest.raises(InputError, match="expected 7 fields"):
            workbench.ingest(fc, ob)

    def test_bad_header_rejected(self, tmp_path):
        fc = tmp_path / "f.csv"
        fc.write_text("time,var,loc,lead,member_01,member_02\n")
        ob = tmp_path / "o.csv"
        ob.write_text("valid_time,variable,location,value\n")
        with pytest.raises(InputError, match="header"):
            workbench.ingest(fc, ob)

    def test_forecast_csv_roundtrip(self, tmp_path):
        cfg = synthetic.ScenarioConfig(2, 5, 10, seed=1)
        data = synthetic.generate_scenario(cfg)
        path = tmp_path / "fc.csv"
        workbench.write_forecast_csv(path, data.ensembles)
        margins, n_members, forecasts = workbench.read_forecast_csv(path)
        assert margins == data.margins
        assert n_members == 5
        key = (data.times[3], data.margins[1])
        assert np.array_equal(forecasts[key], data.ensembles[3].members[:, 1])


def scenario_dataset(**overrides):
    kwargs = dict(
        n_margins=2, n_members=8, n_days=70, correlation=0.7, bias=1.0,
        dispersion_factor=0.7, seed=5,
    )
    kwargs.update(overrides)
    cfg = synthetic.ScenarioConfig(**kwargs)
    return workbench.dataset_from_scenario(synthetic.generate_scenario(cfg))


class TestRunPipeline:
    def test_three_systems_reported_for_every_case(self):
        ds = scenario_dataset()
        res = workbench.run_pipeline(ds, PipelineConfig({"temp": "nr-normal"}, window_days=30, emit_plots=False))
        n_days = len(res.test_times)
        by_system = {}
        for r in res.report.records:
            if r.scope != "joint" and r.crps is not None:
                by_system.setdefault(r.system, 0)
                by_system[r.system] += 1
        assert by_system["raw"] == by_system["independent"] == by_system["ecc"] == 2 * n_days
        assert by_system["marginal"] == 2 * n_days

    def test_coupled_beats_independent_on_correlated_margins(self):
        ds = scenario_dataset(n_days=120, correlation=0.85)
        res = workbench.run_pipeline(ds, PipelineConfig({"temp": "nr-normal"}, window_days=30, emit_plots=False))
        assert res.mean_score("joint", "ecc", "energy_score") <= res.mean_score(
            "joint", "independent", "energy_score"
        )

    def test_single_margin_reordering_is_score_noop(self):
        ds = scenario_dataset(n_margins=1)
        res = workbench.run_pipeline(ds, PipelineConfig({"temp": "nr-normal"}, window_days=30, emit_plots=False))
        scope = ds.margins[0].key()
        ecc = [r.crps for r in res.report.records if r.scope == scope and r.system == "ecc"]
        ind = [r.crps for r in res.report.records if r.scope == scope and r.system == "independent"]
        # same member multiset, so scores agree up to summation order
        assert np.allclose(ecc, ind, rtol=1e-12, atol=0.0)
        assert res.joint_margins == []

    def test_unassigned_variable_rejected_upfront(self):
        ds = scenario_dataset()
        with pytest.raises(InputError, match="no model assigned"):
            workbench.run_pipeline(ds, PipelineConfig({"pressure": "nr-normal"}, emit_plots=False))

    def test_margin_failures_skip_but_run_continues(self, tmp_path):
        # margin temp/b loses most observations: too short a window, skipped
        drop = {(f"2020-01-{d:02d}", "temp", "b") for d in range(1, 14)}
        fc, ob = write_small_files(tmp_path, drop_obs=drop)
        with pytest.warns(EnscopulaWarning):
            ds = workbench.ingest(fc, ob)
        config = PipelineConfig(
            {"temp": "nr-normal", "wind": "nr-normal"},
            window_days=10, test_start=date(2020, 1, 12), min_train_cases=10,
            emit_plots=False,
        )
        res = workbench.run_pipeline(ds, config)
        assert any(s["margin"] == "temp/b/24h" for s in res.skipped)
        scored_scopes = {r.scope for r in res.report.records}
        assert "temp/a/24h" in scored_scopes
        assert "temp/b/24h" not in scored_scopes

    def test_schaake_scheme_uses_observed_record(self):
        ds = scenario_dataset(n_days=90)
        res = workbench.run_pipeline(
            ds, PipelineConfig({"temp": "nr-normal"}, window_days=30, scheme="schaake", emit_plots=False)
        )
        assert res.ecc[0].provenance["scheme"] == "schaake"
        assert len(res.test_times) > 0

    def test_determinism_of_results(self):
        ds = scenario_dataset()
        config = PipelineConfig({"temp": "nr-normal"}, window_days=30, seed=9, emit_plots=False)
        r1 = workbench.run_pipeline(ds, config)
        r2 = workbench.run_pipeline(ds, config)
        for a, b in zip(r1.ecc, r2.ecc):
            assert np.array_equal(a.values, b.values)
        assert r1.report.aggregates() == r2.report.aggregates()


class TestOutputs:
    def test_output_files_written(self, tmp_path):
        ds = scenario_dataset()
        res = workbench.run_pipeline(ds, PipelineConfig({"temp": "nr-normal"}, window_days=30, emit_plots=False))
        files = workbench.write_pipeline_outputs(res, tmp_path, emit_plots=False)
        names = {f.name for f in files}
        assert {"forecasts_ecc.csv", "forecasts_ecc.provenance.json",
                "scores_cases.csv", "scores_aggregate.json"} <= names
        agg = json.loads((tmp_path / "scores_aggregate.json").read_text())
        assert "means" in agg and "histograms" in agg and "config" in agg
        # the coupled CSV parses back with the forecast reader
        margins, n_members, forecasts = workbench.read_forecast_csv(tmp_path / "forecasts_ecc.csv")
        assert n_members == ds.n_members
        assert len(forecasts) == 2 * len(res.test_times)


class TestCli:
    def run(self, *argv):
        return cli.main(list(argv))

    def test_full_command_chain(self, tmp_path, capsys):
        out = tmp_path / "synth"
        assert self.run("synth", "--out-dir", str(out), "--margins", "2", "--members", "6",
                        "--days", "50", "--seed", "3") == 0
        fc, ob = out / "forecasts.csv", out / "observations.csv"

        params = tmp_path / "params.json"
        assert self.run("fit", "--forecasts", str(fc), "--observations", str(ob),
                        "--valid-time", "2020-02-15", "--models", '{"temp": "nr-normal"}',
                        "--window-days", "30", "--out", str(params)) == 0
        payload = json.loads(params.read_text())
        assert len(payload["fits"]) == 2
        assert set(payload["fits"][0]) == {"margin", "model", "params", "window", "fit_diagnostics"}

        dists = tmp_path / "dists.json"
        assert self.run("predict", "--params", str(params), "--forecasts", str(fc),
                        "--valid-time", "2020-02-15", "--out", str(dists)) == 0
        dist_payload = json.loads(dists.read_text())
        assert dist_payload["distributions"][0]["distribution"]["family"] == "normal"

        coupled = tmp_path / "coupled"
        assert self.run("couple", "--dists", str(dists), "--forecasts", str(fc),
                        "--valid-time", "2020-02-15", "--scheme", "q", "--seed", "4",
                        "--out-dir", str(coupled)) == 0
        assert (coupled / "forecasts_ecc.csv").exists()
        assert (coupled / "forecasts_ecc.provenance.json").exists()

        verified = tmp_path / "verified"
        assert self.run("verify", "--ensembles", str(coupled / "forecasts_ecc.csv"),
                        "--observations", str(ob), "--out-dir", str(verified),
                        "--no-plots") == 0
        assert (verified / "scores_cases.csv").exists()
        capsys.readouterr()

    def test_pipeline_bundled_scenario_writes_reports(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert self.run("pipeline", "--seed", "5", "--out-dir", str(out)) == 0
        assert (out / "scores_aggregate.json").exists()
        assert (out / "figures" / "score_comparison.png").exists()
        capsys.readouterr()

    def test_seed_repeatability_bytewise(self, tmp_path, capsys):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert self.run("pipeline", "--seed", "7", "--out-dir", str(d1), "--no-plots") == 0
        assert self.run("pipeline", "--seed", "7", "--out-dir", str(d2), "--no-plots") == 0
        files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
        assert files1 == files2
        for f in files1:
            assert (d1 / f).read_bytes() == (d2 / f).read_bytes()
        capsys.readouterr()

    def test_transformation_scheme_rejected_for_point_mass_margins(self, tmp_path, capsys):
        out = tmp_path / "synthp"
        assert self.run("synth", "--out-dir", str(out), "--margins", "1", "--members", "8",
                        "--days", "60", "--kinds", "precip", "--zero-inflation", "0.4",
                        "--seed", "2") == 0
        fc, ob = out / "forecasts.csv", out / "observations.csv"
        params = tmp_path / "p.json"
        assert self.run("fit", "--forecasts", str(fc), "--observations", str(ob),
                        "--valid-time", "2020-02-25", "--models", '{"precip": "bma-precip"}',
                        "--out", str(params)) == 0
        dists = tmp_path / "d.json"
        assert self.run("predict", "--params", str(params), "--forecasts", str(fc),
                        "--valid-time", "2020-02-25", "--out", str(dists)) == 0
        capsys.readouterr()
        rc = self.run("couple", "--dists", str(dists), "--forecasts", str(fc),
                      "--valid-time", "2020-02-25", "--scheme", "t",
                      "--out-dir", str(tmp_path / "c"))
        captured = capsys.readouterr()
        assert rc == 1
        err = json.loads(captured.err)
        assert err["error"]["type"] == "UnsupportedSchemeError"

    def test_bad_arguments_exit_code_and_json_error(self, capsys):
        rc = self.run("pipeline")  # missing --out-dir
        captured = capsys.readouterr()
        assert rc == 1
        err = json.loads(captured.err)
        assert "error" in err

    def test_runtime_failure_exit_code(self, monkeypatch, capsys):
        from enscopula.errors import IntegrationError

        def boom(args):
            raise IntegrationError("quadrature blew up")

        monkeypatch.setitem(cli._COMMANDS, "verify", boom)
        rc = self.run("verify", "--ensembles", "x", "--observations", "y", "--out-dir", "z")
        captured = capsys.readouterr()
        assert rc == 2
        assert json.loads(captured.err)["error"]["type"] == "IntegrationError"

    def test_config_file_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 9, "models": {"temp": "bma-normal"}}))
        out = tmp_path / "run"
        assert self.run("pipeline", "--config", str(cfg), "--out-dir", str(out), "--no-plots") == 0
        agg = json.loads((out / "scores_aggregate.json").read_text())
        assert agg["config"]["seed"] == 9
        assert agg["config"]["models"] == {"temp": "bma-normal"}
        capsys.readouterr()
