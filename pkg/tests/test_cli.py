import json
from pathlib import Path
from unittest.mock import Mock, patch

import numpy as np
import pytest
from click.testing import CliRunner

from zplsource.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, cli, parse_expectation
from zplsource.config import ExperimentKind
from zplsource.runner import ComparisonRow
from zplsource.streams import Origin, PhotonStream
from zplsource.timetags import write_tags


def _result(tmp_path, comparison=()):
    result = Mock()
    result.report = {"dip": 0.81, "tau_f": 4.49}
    result.manifest = tmp_path / "manifest.json"
    result.comparison = list(comparison)
    return result


@patch("zplsource.cli.run_experiment")
def test_simulate_preset(mock_run, tmp_path):
    mock_run.return_value = _result(tmp_path)

    runner = CliRunner()
    result = runner.invoke(
        cli, ["simulate", "--preset", "cw_g2", "--seed", "5", "--out", str(tmp_path)]
    )

    assert result.exit_code == 0
    assert "Running cw_g2 with seed 5" in result.output
    assert "Wrote artifacts to:" in result.output
    config, output_dir = mock_run.call_args.args
    assert config.seed == 5
    assert output_dir == str(tmp_path)


@patch("zplsource.cli.run_experiment")
def test_simulate_failed_acceptance(mock_run, tmp_path):
    row = ComparisonRow("dip", 0.70, 0.79, 0.85, False, -0.09)
    mock_run.return_value = _result(tmp_path, [row])

    runner = CliRunner()
    result = runner.invoke(cli, ["simulate", "--preset", "cw_g2"])

    assert result.exit_code == EXIT_ACCEPTANCE
    assert "✗ dip" in result.output
    assert "Acceptance failed" in result.output


def test_simulate_needs_a_config():
    runner = CliRunner()
    result = runner.invoke(cli, ["simulate"])

    assert result.exit_code == EXIT_CONFIG
    assert "Check the 'config' configuration." in result.output


def test_simulate_invalid_config(tmp_path):
    config_path = tmp_path / "bad.toml"
    config_path.write_text(
        'kind = "saturation_sweep"\nseed = 1\n[sweep]\npowers_mw = []\n'
    )

    runner = CliRunner()
    result = runner.invoke(cli, ["simulate", "--config", str(config_path)])

    assert result.exit_code == EXIT_CONFIG
    assert "sweep.powers_mw" in result.output


def test_simulate_missing_config_file(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli, ["simulate", "--config", str(tmp_path / "no.toml")])

    assert result.exit_code == 1
    assert "File not found" in result.output


@patch("zplsource.cli.run_experiment")
def test_scan_defaults_to_confocal_preset(mock_run, tmp_path):
    mock_run.return_value = _result(tmp_path)

    runner = CliRunner()
    result = runner.invoke(cli, ["scan"])

    assert result.exit_code == 0
    config = mock_run.call_args.args[0]
    assert config.kind is ExperimentKind.CONFOCAL_SCAN


def test_scan_rejects_other_kinds():
    runner = CliRunner()
    result = runner.invoke(cli, ["scan", "--preset", "cw_g2"])

    assert result.exit_code == EXIT_CONFIG
    assert "confocal_scan" in result.output


def test_correlate_tag_file(tmp_path):
    stream = PhotonStream.from_unsorted(
        times=np.array([0, 300, 1000, 2500]),
        origins=np.full(4, Origin.ZPL),
        lines=np.zeros(4),
        channels=np.array([0, 1, 0, 1]),
        duration_ps=10_000,
    )
    tags = write_tags(stream, tmp_path / "run.zplt")

    runner = CliRunner()
    result = runner.invoke(
        cli,
        [
            "correlate",
            str(tags),
            "--bin-width",
            "100",
            "--tau-max",
            "2000",
            "--out",
            str(tmp_path / "corr"),
        ],
    )

    assert result.exit_code == 0
    assert "Correlating 2 x 2 tags" in result.output
    meta = json.loads((tmp_path / "corr" / "histogram.json").read_text())
    assert meta["mode"] == "start_stop"
    assert meta["metadata"]["source"] == str(tags)


def test_fit_saturation_points(tmp_path):
    power = np.array([0.5, 1.0, 2.0, 3.5, 7.0, 14.0, 28.0])
    rate = 180e3 * power / (power + 3.5)
    data = tmp_path / "saturation.csv"
    np.savetxt(
        data,
        np.column_stack([power, rate]),
        delimiter=",",
        header="power_mw,rate",
        comments="",
    )

    runner = CliRunner()
    result = runner.invoke(
        cli, ["fit", str(data), "--model", "saturation", "--out", str(tmp_path)]
    )

    assert result.exit_code == 0
    assert "p_sat = 3.5" in result.output
    record = json.loads((tmp_path / "saturation.json").read_text())
    assert record["params"]["s_inf"] == pytest.approx(180e3, rel=1e-6)


def test_fit_lateral_needs_period(tmp_path):
    data = tmp_path / "histogram.csv"
    data.write_text("tau_ps,counts\n-50.0,1\n50.0,2\n")

    runner = CliRunner()
    result = runner.invoke(cli, ["fit", str(data), "--model", "lateral"])

    assert result.exit_code == EXIT_CONFIG


def test_fit_spot_image(tmp_path):
    rows, cols = np.indices((40, 40))
    r2 = ((cols + 0.5) * 50.0 - 1510.0) ** 2 + ((rows + 0.5) * 50.0 - 480.0) ** 2
    image = tmp_path / "scan.txt"
    np.savetxt(image, 10.0 + 800.0 * np.exp(-4.0 * np.log(2.0) * r2 / 260.0**2))

    runner = CliRunner()
    result = runner.invoke(
        cli,
        [
            "fit",
            str(image),
            "--model",
            "spot",
            "--spot-fwhm",
            "260",
            "--out",
            str(tmp_path),
        ],
    )

    assert result.exit_code == 0
    record = json.loads((tmp_path / "spot.json").read_text())
    assert record["params"]["x0"] == pytest.approx(1510.0, abs=1e-3)
    assert record["params"]["y0"] == pytest.approx(480.0, abs=1e-3)


def test_fit_missing_file():
    runner = CliRunner()
    result = runner.invoke(cli, ["fit", "nope.csv", "--model", "spot"])

    assert result.exit_code == 1
    assert "File not found" in result.output


def test_report_passes(tmp_path):
    report = tmp_path / "report.json"
    report.write_text(json.dumps({"dip": 0.81, "tau_f": 4.52}))

    runner = CliRunner()
    result = runner.invoke(
        cli,
        [
            "report",
            str(report),
            "--expect",
            "dip=0.79:0.85",
            "--expect",
            "tau_f=4.5+-0.15",
        ],
    )

    assert result.exit_code == 0
    assert "✓ dip" in result.output
    assert "✓ tau_f" in result.output


def test_report_fails_against_preset(tmp_path):
    report = tmp_path / "report.json"
    report.write_text(json.dumps({"dip": 0.70, "tau_f": 4.5}))

    runner = CliRunner()
    result = runner.invoke(cli, ["report", str(report), "--preset", "cw_g2"])

    assert result.exit_code == EXIT_ACCEPTANCE
    assert "✗ dip" in result.output


def test_report_without_expectations(tmp_path):
    report = tmp_path / "report.json"
    report.write_text("{}")

    runner = CliRunner()
    result = runner.invoke(cli, ["report", str(report)])

    assert result.exit_code == 0
    assert "nothing to compare" in result.output


def test_parse_expectation():
    assert parse_expectation("dip=0.79:0.85") == ("dip", (0.79, 0.85))
    name, (low, high) = parse_expectation("tau_f=4.5+-0.15")
    assert name == "tau_f"
    assert (low, high) == pytest.approx((4.35, 4.65))


def test_report_bad_expectation(tmp_path):
    report = tmp_path / "report.json"
    report.write_text("{}")

    runner = CliRunner()
    result = runner.invoke(cli, ["report", str(report), "--expect", "dip"])

    assert result.exit_code != 0
    assert "name=low:high" in result.output


def test_verbose_flag():
    runner = CliRunner()
    result = runner.invoke(cli, ["--verbose", "report", str(Path("missing.json"))])

    assert result.exit_code == 1
