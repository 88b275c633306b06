"""Command line interface for simulations, correlation, fits and reports."""

import json
import sys
from pathlib import Path

import click
import numpy as np

from .artifacts import ArtifactWriter, read_histogram, read_points
from .config import ExperimentConfig, ExperimentKind, load_preset, preset_names
from .correlator import (
    DEFAULT_CW_BIN_PS,
    DEFAULT_CW_TAU_MAX_PS,
    DEFAULT_LATERAL_PEAKS,
    full_correlation_histogram,
    peak_areas,
    start_stop_histogram,
)
from .estimators import (
    fit_antibunching,
    fit_brightest_spot,
    fit_lateral_peak_decay,
    fit_lorentzian,
    fit_saturation,
)
from .exceptions import AcceptanceError, ConfigurationError, ZplSourceError
from .logger import setup_logger
from .runner import compare_report, run_experiment
from .sil_optics import SilSystem, diffraction_resolution
from .timetags import read_tags, split_channels

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3


def handle_cli_error(func):
    """Decorator to handle CLI errors gracefully."""

    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except FileNotFoundError as e:
            click.echo(f"Error: File not found - {e.filename}", err=True)
            click.echo(
                "Please make sure the file exists and the path is correct.", err=True
            )
            sys.exit(EXIT_ERROR)
        except ConfigurationError as e:
            click.echo(f"Configuration error: {str(e)}", err=True)
            if e.config_key:
                click.echo(f"Check the '{e.config_key}' configuration.", err=True)
            sys.exit(EXIT_CONFIG)
        except AcceptanceError as e:
            click.echo(f"Acceptance failed: {str(e)}", err=True)
            for row in e.rows:
                if not row.passed:
                    click.echo(f"  {row.name}: {row.note or row.measured}", err=True)
            sys.exit(EXIT_ACCEPTANCE)
        except ZplSourceError as e:
            click.echo(f"Error: {str(e)}", err=True)
            sys.exit(EXIT_ERROR)
        except click.ClickException:
            raise
        except Exception as e:
            click.echo(f"Unexpected error: {str(e)}", err=True)
            click.echo("If this persists, please report this issue.", err=True)
            sys.exit(EXIT_ERROR)

    return wrapper


@click.group(help="zplsource - simulate and analyse a single-molecule photon source")
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
def cli(verbose):
    """zplsource CLI entry point."""
    setup_logger(verbose)


def load_experiment(config_path, preset, seed) -> ExperimentConfig:
    """Config from a file or a preset, with the seed override applied."""
    if config_path and preset:
        raise ConfigurationError("Use either --config or --preset, not both", "preset")
    if not config_path and not preset:
        raise ConfigurationError(
            f"Specify --config or --preset ({', '.join(preset_names())})", "config"
        )
    config = (
        ExperimentConfig.from_file(config_path) if config_path else load_preset(preset)
    )
    return config.with_seed(seed) if seed is not None else config


def format_comparison(rows) -> list[str]:
    lines = [f"{'quantity':<26} {'measured':>12} {'range':>23} {'margin':>10}"]
    for row in rows:
        measured = "missing" if row.measured is None else f"{row.measured:.5g}"
        margin = "" if row.margin is None else f"{row.margin:+.3g}"
        mark = "✓" if row.passed else "✗"
        span = f"[{row.low:.5g}, {row.high:.5g}]"
        lines.append(f"{mark} {row.name:<24} {measured:>12} {span:>23} {margin:>10}")
    return lines


def _finish(rows) -> None:
    for line in format_comparison(rows):
        click.echo(line)
    failed = [row for row in rows if not row.passed]
    if failed:
        raise AcceptanceError(
            f"{len(failed)} of {len(rows)} quantities outside their range", rows
        )


def experiment_options(func):
    for option in reversed(
        [
            click.option("--config", "config_path", help="Path to an experiment TOML"),
            click.option("--preset", help="Name of a bundled experiment config"),
            click.option("--seed", type=int, help="Override the configured seed"),
            click.option("--out", "output_dir", help="Output directory"),
        ]
    ):
        func = option(func)
    return func


def _run(config: ExperimentConfig, output_dir) -> None:
    click.echo(f"Running {config.kind.value} with seed {config.seed}")
    result = run_experiment(config, output_dir)
    for name, value in result.report.items():
        click.echo(f"• {name:<28} {value}")
    click.echo(f"✓ Wrote artifacts to: {result.manifest.parent}")
    if result.comparison:
        _finish(result.comparison)


@cli.command(name="simulate")
@experiment_options
@handle_cli_error
def simulate(config_path, preset, seed, output_dir):
    """Run one experiment end to end."""
    _run(load_experiment(config_path, preset, seed), output_dir)


@cli.command(name="scan")
@experiment_options
@handle_cli_error
def scan(config_path, preset, seed, output_dir):
    """Synthesize and fit a confocal image through the SIL."""
    if not config_path and not preset:
        preset = ExperimentKind.CONFOCAL_SCAN.value
    config = load_experiment(config_path, preset, seed)
    if config.kind is not ExperimentKind.CONFOCAL_SCAN:
        raise ConfigurationError(
            f"scan needs a confocal_scan config, got {config.kind.value}", "kind"
        )
    _run(config, output_dir)


@cli.command(name="correlate")
@click.argument("tags")
@click.option(
    "--mode",
    type=click.Choice(["start_stop", "full"]),
    default="start_stop",
    help="Histogram definition",
)
@click.option("--bin-width", type=int, default=DEFAULT_CW_BIN_PS, help="Bin (ps)")
@click.option(
    "--tau-max", type=int, default=DEFAULT_CW_TAU_MAX_PS, help="Delay range (ps)"
)
@click.option("--workers", type=int, default=1, help="Threads for full mode")
@click.option("--out", "output_dir", default="./correlation", help="Output directory")
@handle_cli_error
def correlate(tags, mode, bin_width, tau_max, workers, output_dir):
    """Histogram the channel-0/channel-1 delays of a ZPLT tag file."""
    stream = read_tags(tags)
    a, b = split_channels(stream)
    click.echo(f"Correlating {len(a)} x {len(b)} tags from {tags}")
    if mode == "full":
        hist = full_correlation_histogram(
            a, b, bin_width, (-tau_max, tau_max), workers=workers
        )
    else:
        hist = start_stop_histogram(a, b, bin_width, tau_max)
    hist.metadata.update(source=str(tags))
    csv_path, _ = ArtifactWriter(output_dir).write_histogram(hist)
    click.echo(f"✓ Wrote histogram to: {csv_path}")


@cli.command(name="fit")
@click.argument("data")
@click.option(
    "--model",
    type=click.Choice(["antibunching", "saturation", "lorentzian", "lateral", "spot"]),
    required=True,
    help="Curve to fit",
)
@click.option("--saturation", type=float, default=0.0, help="Known P/P_sat")
@click.option("--rep-period", type=int, help="Pulse period (ps) for lateral fits")
@click.option("--window", type=int, help="Peak window (ps) for lateral fits")
@click.option("--lateral-peaks", type=int, default=DEFAULT_LATERAL_PEAKS)
@click.option("--pixel-size", type=float, default=50.0, help="Pixel size (nm)")
@click.option(
    "--spot-fwhm",
    type=float,
    help="Expected spot FWHM (nm); sets the fit window, default SIL diffraction limit",
)
@click.option("--out", "output_dir", default="./fit", help="Output directory")
@handle_cli_error
def fit(
    data,
    model,
    saturation,
    rep_period,
    window,
    lateral_peaks,
    pixel_size,
    spot_fwhm,
    output_dir,
):
    """Fit a histogram CSV, a point CSV or an image matrix."""
    if not Path(data).exists():
        raise FileNotFoundError(2, "No such file", data)
    if model == "antibunching":
        result = fit_antibunching(read_histogram(data), saturation)
    elif model == "saturation":
        result = fit_saturation(read_points(data))
    elif model == "lorentzian":
        result = fit_lorentzian(read_points(data))
    elif model == "lateral":
        if rep_period is None or window is None:
            raise ConfigurationError(
                "--rep-period and --window are required for lateral fits", "window"
            )
        hist = read_histogram(data)
        table = peak_areas(hist, rep_period, window, lateral_peaks)
        click.echo(f"Central/lateral ratio: {table.central_to_lateral_ratio:.4f}")
        result = fit_lateral_peak_decay(table, hist, rep_period)
    else:
        if spot_fwhm is None:
            sil = SilSystem()
            spot_fwhm = diffraction_resolution(sil.wavelength, sil.n_sil)
        image = np.loadtxt(data, ndmin=2)
        result = fit_brightest_spot(image, pixel_size, spot_fwhm)
    click.echo(result.to_text())
    _, record = ArtifactWriter(output_dir).write_fit(result, name=model)
    click.echo(f"✓ Wrote fit to: {record}")


def parse_expectation(value: str) -> tuple[str, tuple[float, float]]:
    """Parse ``name=low:high`` or ``name=value+-tolerance``."""
    try:
        name, bounds = value.split("=", 1)
        if "+-" in bounds:
            center, tolerance = (float(v) for v in bounds.split("+-", 1))
            return name.strip(), (center - tolerance, center + tolerance)
        low, high = (float(v) for v in bounds.split(":", 1))
        return name.strip(), (low, high)
    except ValueError:
        raise click.BadParameter(
            f"'{value}' is not name=low:high or name=value+-tolerance"
        ) from None


@cli.command(name="report")
@click.argument("report_json")
@click.option("--config", "config_path", help="Experiment TOML with an [expect] table")
@click.option("--preset", help="Bundled config whose [expect] table to use")
@click.option("--expect", "expected", multiple=True, help="name=low:high")
@handle_cli_error
def report(report_json, config_path, preset, expected):
    """Compare a fit or run report against expected ranges."""
    path = Path(report_json)
    if not path.exists():
        raise FileNotFoundError(2, "No such file", report_json)
    expectations = {}
    if config_path or preset:
        expectations.update(load_experiment(config_path, preset, None).expect)
    expectations.update(parse_expectation(v) for v in expected)
    rows = compare_report(json.loads(path.read_text()), expectations)
    if not rows:
        click.echo("No expectations given; nothing to compare.")
        return
    _finish(rows)


if __name__ == "__main__":
    cli()
