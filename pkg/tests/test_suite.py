import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from suda.cli import main as cli_main
from suda.errors import ConfigError
from suda.suite import (
    compare,
    execute_suite,
    load_suite,
    spectral_report,
    suite_from_dict,
)

SMOKE = {
    "name": "smoke",
    "problem": {"kind": "quadratic", "d": 3, "het_var": 1.0, "seed": 3},
    "seeds": [1, 2],
    "defaults": {"topology": "ring:8", "iterations": 40, "record_every": 5,
                 "noise_var": 0.001, "schedule": {"kind": "constant", "alpha": 0.05}},
    "runs": [
        {"label": "ed", "method": "ed_d2"},
        {"label": "dsgd", "method": "dsgd"},
        {"label": "psgd", "method": "psgd"},
    ],
}


def write_suite(tmp_path, payload):
    path = tmp_path / "test.suite"
    path.write_text(json.dumps(payload))
    return path


class TestLoadSuite:
    def test_roundtrip(self, tmp_path):
        suite = load_suite(write_suite(tmp_path, SMOKE))
        assert suite.name == "smoke"
        assert suite.labels == ["ed", "dsgd", "psgd"]
        assert suite.runs[0]["iterations"] == 40

    def test_bundled_suites_parse(self):
        import importlib.resources as res

        for name in ("fig1", "fig2", "fig3", "fig5"):
            with res.as_file(res.files("suda") / "suites" / f"{name}.suite") as path:
                suite = load_suite(path)
            assert len(suite.seeds) == 5

    def test_fig2_shape(self):
        import importlib.resources as res

        with res.as_file(res.files("suda") / "suites" / "fig2.suite") as path:
            suite = load_suite(path)
        assert len(suite.runs) == 4
        assert all(r["topology"] == "ring:32" for r in suite.runs)
        assert {r["method"] for r in suite.runs} == {"dsgd", "atc_gt", "ed_d2", "psgd"}

    def test_fig3_topology_sweep(self):
        import importlib.resources as res

        with res.as_file(res.files("suda") / "suites" / "fig3.suite") as path:
            suite = load_suite(path)
        assert len({r["topology"] for r in suite.runs}) == 4

    def test_unknown_top_key(self, tmp_path):
        bad = dict(SMOKE, extra=1)
        with pytest.raises(ConfigError, match="unknown suite keys"):
            load_suite(write_suite(tmp_path, bad))

    def test_unknown_run_key(self, tmp_path):
        bad = json.loads(json.dumps(SMOKE))
        bad["runs"][0]["surprise"] = True
        with pytest.raises(ConfigError, match="unknown keys"):
            load_suite(write_suite(tmp_path, bad))

    def test_empty_suite(self, tmp_path):
        bad = dict(SMOKE, runs=[])
        with pytest.raises(ConfigError, match="no runs"):
            load_suite(write_suite(tmp_path, bad))

    def test_parse_error_has_line_context(self, tmp_path):
        path = tmp_path / "broken.suite"
        path.write_text('{\n  "name": "x",\n  oops\n}')
        with pytest.raises(ConfigError, match=r":3:"):
            load_suite(path)

    def test_duplicate_labels(self, tmp_path):
        bad = json.loads(json.dumps(SMOKE))
        bad["runs"][1]["label"] = "ed"
        with pytest.raises(ConfigError, match="duplicate"):
            load_suite(write_suite(tmp_path, bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_suite(tmp_path / "nope.suite")


class TestExecuteSuite:
    def test_artifacts_and_determinism(self, tmp_path):
        suite = suite_from_dict(SMOKE)
        out1 = tmp_path / "a"
        summary, failures = execute_suite(suite, out1)
        assert failures == []
        assert (out1 / "summary.json").exists()
        assert sorted(p.name for p in (out1 / "runs").iterdir()) == [
            "dsgd_seed1.csv", "dsgd_seed2.csv", "ed_seed1.csv", "ed_seed2.csv",
            "psgd_seed1.csv", "psgd_seed2.csv"]
        assert (out1 / "aggregates" / "ed.csv").exists()
        assert (out1 / "spectral" / "ed.json").exists()
        assert (out1 / "figures" / "grad_norm_avg_sq.png").exists()
        # byte-identical rerun
        out2 = tmp_path / "b"
        execute_suite(suite, out2, figures=False)
        for name in ("runs/ed_seed1.csv", "aggregates/ed.csv", "summary.json"):
            h1 = hashlib.sha256((out1 / name).read_bytes()).hexdigest()
            h2 = hashlib.sha256((out2 / name).read_bytes()).hexdigest()
            assert h1 == h2, name

    def test_summary_contents(self, tmp_path):
        suite = suite_from_dict(SMOKE)
        summary, _ = execute_suite(suite, tmp_path / "out", figures=False)
        ed = summary["runs"]["ed"]
        assert ed["psd_shift_applied"] is True
        assert 0 < ed["plateau"]["grad_norm_avg_sq"] < 10
        assert ed["seeds"] == [1, 2]
        assert summary["version"] == 1

    def test_lambda_interval_guard(self, tmp_path):
        bad = json.loads(json.dumps(SMOKE))
        bad["runs"][0]["lambda_in"] = [0.0, 0.1]  # ring:8 sits near 0.8
        suite = suite_from_dict(bad)
        _, failures = execute_suite(suite, tmp_path / "out", figures=False)
        assert any("outside requested" in msg for msg in failures)

    def test_aborted_run_reported_and_others_kept(self, tmp_path):
        payload = json.loads(json.dumps(SMOKE))
        payload["runs"][0]["schedule"] = {"kind": "constant", "alpha": 1e9}
        suite = suite_from_dict(payload)
        summary, failures = execute_suite(suite, tmp_path / "out", figures=False)
        assert any("NumericOverflowError" in msg for msg in failures)
        assert "dsgd" in summary["runs"]  # partial artifacts retained
        assert not (tmp_path / "out" / "runs" / "ed_seed1.csv").exists()

    def test_auto_n_per_topology(self, tmp_path):
        payload = json.loads(json.dumps(SMOKE))
        payload["runs"] = [
            {"label": "small", "method": "ed_d2", "topology": "ring:8"},
            {"label": "big", "method": "ed_d2", "topology": "ring:12"},
        ]
        suite = suite_from_dict(payload)
        summary, failures = execute_suite(suite, tmp_path / "out", figures=False)
        assert failures == []
        assert set(summary["runs"]) == {"small", "big"}

    def test_pinned_n_mismatch_rejected(self, tmp_path):
        payload = json.loads(json.dumps(SMOKE))
        payload["problem"]["n"] = 12
        suite = suite_from_dict(payload)
        with pytest.raises(ConfigError, match="pins n"):
            execute_suite(suite, tmp_path / "out", figures=False)

    def test_parallel_matches_serial(self, tmp_path):
        suite = suite_from_dict(SMOKE)
        execute_suite(suite, tmp_path / "serial", figures=False)
        execute_suite(suite, tmp_path / "par", jobs=2, figures=False)
        a = (tmp_path / "serial" / "summary.json").read_bytes()
        b = (tmp_path / "par" / "summary.json").read_bytes()
        assert a == b


class TestSpectralReport:
    def test_suda_method_fields(self):
        report = spectral_report("ring:32", "ed_d2")
        assert report["psd_shift_applied"] is True
        assert report["lambda_pre_shift"] == pytest.approx(0.98719, abs=1e-4)
        for key in ("gamma", "lambda_a", "lambda_b_under", "v1", "v2", "lambda_under"):
            assert key in report
        assert report["gamma"] == pytest.approx(np.sqrt(report["lambda"]), abs=1e-10)

    def test_baseline_report_minimal(self):
        report = spectral_report("ring:8", "dsgd")
        assert "gamma" not in report
        assert report["lambda"] == pytest.approx(0.80474, abs=1e-4)


class TestCompare:
    @pytest.fixture()
    def summary_dir(self, tmp_path):
        execute_suite(suite_from_dict(SMOKE), tmp_path, figures=False)
        return tmp_path

    def test_assertions(self, summary_dir):
        spec = {
            "summary": "summary.json",
            "assertions": [
                {"kind": "lambda_in", "run": "ed", "lo": 0.85, "hi": 0.95},
                {"kind": "plateau_le", "metric": "grad_norm_avg_sq",
                 "left": "ed", "right": "ed", "factor": 1.0},
            ],
        }
        report = compare(spec, base_dir=summary_dir)
        assert report["passed"]

    def test_failed_assertion(self, summary_dir):
        spec = {
            "summary": "summary.json",
            "assertions": [
                {"kind": "plateau_ratio_gt", "metric": "grad_norm_avg_sq",
                 "left": "ed", "right": "ed", "factor": 2.0},
            ],
        }
        report = compare(spec, base_dir=summary_dir)
        assert not report["passed"]

    def test_missing_series(self, summary_dir):
        spec = {
            "summary": "summary.json",
            "assertions": [
                {"kind": "lambda_in", "run": "ghost", "lo": 0, "hi": 1},
            ],
        }
        report = compare(spec, base_dir=summary_dir)
        assert not report["passed"]
        assert "ghost" in report["assertions"][0]["detail"]


class TestCli:
    def test_run_and_compare(self, tmp_path, capsys):
        suite_path = write_suite(tmp_path, SMOKE)
        out = tmp_path / "out"
        code = cli_main(["run", str(suite_path), "--out", str(out), "--no-figures"])
        assert code == 0
        assert (out / "summary.json").exists()
        captured = capsys.readouterr()
        assert "smoke" in captured.out

        spec_path = tmp_path / "cmp.json"
        spec_path.write_text(json.dumps({
            "summary": "out/summary.json",
            "assertions": [{"kind": "lambda_in", "run": "ed", "lo": 0.8, "hi": 1.0}],
        }))
        assert cli_main(["compare", str(spec_path)]) == 0
        spec_path.write_text(json.dumps({
            "summary": "out/summary.json",
            "assertions": [{"kind": "lambda_in", "run": "ed", "lo": 0.0, "hi": 0.1}],
        }))
        assert cli_main(["compare", str(spec_path)]) == 1

    def test_spectral_report_json(self, capsys):
        # GT runs on the unshifted (indefinite) ring; constants still finite
        assert cli_main(["spectral-report", "ring:8", "atc_gt"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["method"] == "atc_gt"
        assert out["gamma"] < 1.0 and out["v2"] > 0
        # on a PSD matrix the tracking bound applies
        assert cli_main(["spectral-report", "ring:8+lazy:0.5", "atc_gt"]) == 0
        shifted = json.loads(capsys.readouterr().out)
        assert shifted["v2"] ** 2 <= 9.0 + 1e-9

    def test_config_error_exit_code(self, tmp_path):
        missing = tmp_path / "none.suite"
        assert cli_main(["run", str(missing)]) == 2

    def test_run_failure_exit_code(self, tmp_path):
        payload = json.loads(json.dumps(SMOKE))
        payload["runs"] = [{"label": "boom", "method": "ed_d2",
                            "schedule": {"kind": "constant", "alpha": 1e9}}]
        suite_path = write_suite(tmp_path, payload)
        assert cli_main(["run", str(suite_path), "--out", str(tmp_path / "o"),
                         "--no-figures"]) == 1

    def test_env_var_default_out(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SUDA_OUT", str(tmp_path / "envout"))
        suite_path = write_suite(tmp_path, SMOKE)
        assert cli_main(["run", str(suite_path), "--no-figures"]) == 0
        assert (tmp_path / "envout" / "smoke" / "summary.json").exists()
