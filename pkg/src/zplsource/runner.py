"""Experiment runner: simulate, correlate, fit and write artifacts per kind."""

import math
import platform
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .artifacts import ArtifactWriter
from .config import ExperimentConfig, ExperimentKind
from .correlator import (
    beamsplit,
    full_correlation_histogram,
    peak_areas,
    start_stop_histogram,
)
from .emission_sim import (
    add_background,
    apply_detector,
    apply_spectral_filter,
    multi_photon_fraction,
    sample_wavelengths,
    simulate_cw_stream,
    simulate_pulsed_stream,
)
from .estimators import (
    fit_antibunching,
    fit_brightest_spot,
    fit_lateral_peak_decay,
    fit_lorentzian,
    fit_saturation,
)
from .logger import logger
from .photophysics import (
    SPEED_OF_LIGHT,
    ZPL_CENTER_NM,
    emission_spectrum,
    excitation_lineshape,
    lifetime_limited_linewidth,
    two_photon_per_pulse_prob,
    vibronic_linewidth,
)
from .sil_optics import (
    EfficiencyBudget,
    collection_enhancement,
    diffraction_resolution,
    effective_na,
    hemispherical_resolution,
    simulate_confocal_scan,
    weierstrass_output_na,
)
from .streams import PhotonStream, SimConfig


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for one point of a multi-point run."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for package in ("zplsource", "numpy", "scipy"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


@dataclass
class RunResult:
    """Measured quantities and the files one experiment produced."""

    kind: ExperimentKind
    report: dict
    artifacts: list[Path]
    manifest: Path
    comparison: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.comparison)


class ExperimentRunner:
    """Runs one configured experiment and writes its artifacts."""

    def __init__(
        self, config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None
    ):
        """Initialize the runner.

        Args:
            config: Validated experiment configuration
            output_dir: Overrides ``config.output_dir``
        """
        self.config = config
        self.settings = config.settings
        self.molecule = config.molecule_model()
        self.detector = config.detector_model()
        self.sil = config.sil_system()
        self.writer = ArtifactWriter(output_dir or config.output_dir)

    def _sim_config(self, seed: Optional[int] = None) -> SimConfig:
        return SimConfig(
            seed=self.config.seed if seed is None else seed,
            duration=float(self.settings["duration_s"]),
            time_resolution=int(self.settings["time_resolution_ps"]),
        )

    def _source_stream(self, emitted: PhotonStream, cfg: SimConfig) -> PhotonStream:
        """Spectral filtering and, when configured, background light."""
        stream = apply_spectral_filter(
            emitted, self.config.spectral_window(), self.molecule
        )
        ratio = self.settings.get("signal_to_background", 0.0)
        if ratio > 0:
            stream = add_background(stream, stream.rate / ratio, cfg)
        return stream

    def _hbt(self, stream: PhotonStream, cfg: SimConfig):
        a, b = beamsplit(stream, self.settings["reflectance"], cfg.seed)
        a = apply_detector(a, self.detector, cfg, channel=0)
        b = apply_detector(b, self.detector, cfg, channel=1)
        logger.info(
            f"Detected {len(a)} + {len(b)} tags ({a.rate:.4g} and {b.rate:.4g} /s)"
        )
        if self.settings.get("write_tags"):
            self.writer.write_tags(a.merge(b))
        return a, b

    def cw_g2(self) -> dict:
        power = self.settings["power_mw"]
        s = self.molecule.saturation_parameter(power)
        cfg = self._sim_config()
        emitted = simulate_cw_stream(self.molecule, power, cfg)
        logger.info(f"Simulated {len(emitted)} cw photons at s = {s:.3g}")
        a, b = self._hbt(self._source_stream(emitted, cfg), cfg)

        width, tau_max = self.settings["bin_width_ps"], self.settings["tau_max_ps"]
        if self.settings["histogram"] == "full":
            hist = full_correlation_histogram(
                a, b, width, (-tau_max, tau_max), workers=self.settings["workers"]
            )
        else:
            hist = start_stop_histogram(a, b, width, tau_max)
        hist.metadata.update(seed=cfg.seed, kind=self.config.kind.value)
        self.writer.write_histogram(hist)

        fit = fit_antibunching(hist, s)
        self.writer.write_fit(fit)
        logger.info(
            f"Antibunching fit: dip = {fit['dip']:.3f}, "
            f"tau_f = {fit['tau_f']:.3f} ns"
        )
        return {
            **fit.params,
            "saturation": s,
            "emitted": len(emitted),
            "detected_a": len(a),
            "detected_b": len(b),
            "coincidences": hist.total,
        }

    def pulsed_g2(self) -> dict:
        train = self.config.pulse_train()
        cfg = self._sim_config()
        reexcite = self.settings["reexcite"]
        emitted = simulate_pulsed_stream(self.molecule, train, cfg, reexcite=reexcite)
        logger.info(f"Simulated {len(emitted)} photons at {train.rep_rate} MHz")
        a, b = self._hbt(self._source_stream(emitted, cfg), cfg)

        period = train.period_ps
        k = self.settings["lateral_peaks"]
        tau_max = self.settings["tau_max_ps"]
        hist = full_correlation_histogram(
            a,
            b,
            self.settings["bin_width_ps"],
            (-tau_max, tau_max),
            workers=self.settings["workers"],
        )
        hist.metadata.update(seed=cfg.seed, kind=self.config.kind.value)
        self.writer.write_histogram(hist)

        table = peak_areas(hist, period, self.settings["window_ps"], k)
        self.writer.write_columns(
            "peaks",
            [
                [p.index for p in table.peaks],
                [p.center for p in table.peaks],
                [p.area for p in table.peaks],
            ],
            "index,center_ps,area",
            ["%d", "%.1f", "%d"],
        )
        fit = fit_lateral_peak_decay(table, hist, period)
        self.writer.write_fit(fit)
        logger.info(
            f"Central/lateral ratio {table.central_to_lateral_ratio:.3f}, "
            f"tau_f = {fit['tau_f']:.3f} ns"
        )
        report = {
            "central_to_lateral_ratio": table.central_to_lateral_ratio,
            "tau_f": fit["tau_f"],
            "emitted": len(emitted),
            "detected_a": len(a),
            "detected_b": len(b),
        }
        if reexcite:
            fraction, stderr = multi_photon_fraction(self.molecule, train, cfg)
            report["multi_photon_fraction"] = fraction
            report["multi_photon_stderr"] = stderr
            report["two_photon_bound"] = two_photon_per_pulse_prob(
                train.pulse_duration, self.molecule.tau_f, train.p_exc
            )
        return report

    def _detected_rate(self, power: float, index: int) -> tuple[float, float]:
        """Count rate and its Poisson error, summed over independent segments."""
        segments = self.settings["segments"]
        n = 0
        for segment in range(segments):
            cfg = self._sim_config(derive_seed(self.config.seed, index, segment))
            emitted = simulate_cw_stream(self.molecule, power, cfg)
            stream = apply_spectral_filter(
                emitted, self.config.spectral_window(), self.molecule
            )
            n += len(apply_detector(stream, self.detector, cfg))
        exposure = segments * float(self.settings["duration_s"])
        logger.debug(f"P = {power:.4g} mW: {n} counts in {exposure} s")
        return n / exposure, math.sqrt(max(n, 1)) / exposure

    def saturation_sweep(self) -> dict:
        powers = [float(p) for p in self.settings["powers_mw"]]
        points = np.array(
            [(p, *self._detected_rate(p, i)) for i, p in enumerate(powers)]
        )
        self.writer.write_points(points, "saturation", "power_mw,rate,sigma")
        fit = fit_saturation(points)
        self.writer.write_fit(fit)
        logger.info(
            f"Saturation fit: S_inf = {fit['s_inf']:.4g} /s, "
            f"P_sat = {fit['p_sat']:.3f} mW"
        )
        return dict(fit.params)

    def excitation_scan(self) -> dict:
        fwhm0 = self.settings["homogeneous_fwhm_mhz"] or lifetime_limited_linewidth(
            self.molecule.tau_f
        )
        s = self.settings["saturation"]
        detunings = [float(d) for d in self.settings["detunings_mhz"]]
        rows = []
        for i, detuning in enumerate(detunings):
            # The bare line scales the pump; the jump cycle adds the broadening
            power = self.molecule.p_sat * s * excitation_lineshape(detuning, fwhm0)
            rows.append((detuning, *self._detected_rate(power, i)))
        points = np.array(rows)
        self.writer.write_points(points, "excitation", "detuning_mhz,rate,sigma")
        fit = fit_lorentzian(points)
        self.writer.write_fit(fit)
        logger.info(f"Excitation line FWHM = {fit['fwhm']:.2f} MHz")
        return {
            **fit.params,
            "homogeneous_fwhm": fwhm0,
            "expected_fwhm": fwhm0 * math.sqrt(1.0 + s),
        }

    def confocal_scan(self) -> dict:
        dwell = self.settings["dwell_ms"]
        cfg = SimConfig(seed=self.config.seed, duration=dwell * 1e-3)
        image = simulate_confocal_scan(
            [tuple(e) for e in self.settings["emitters"]],
            self.sil,
            self.settings["background"],
            self.settings["dwell_ms"],
            cfg,
            extent_um=self.settings["extent_um"],
            pixel_size_nm=self.settings["pixel_size_nm"],
            workers=self.settings["workers"],
        )
        self.writer.write_image(image)
        budget = EfficiencyBudget.for_system(self.sil)
        self.writer.write_table(
            [{"stage": name, "transmission": t} for name, t in budget.to_rows()],
            "efficiency_budget",
        )
        resolution = diffraction_resolution(self.sil.wavelength, self.sil.n_sil)
        report = {
            "effective_na": effective_na(self.sil),
            "output_na": weierstrass_output_na(self.sil.n_sil),
            "diffraction_resolution": resolution,
            "hemispherical_resolution": hemispherical_resolution(
                self.sil.wavelength, self.sil.n_sil, self.sil.lens_na
            ),
            "collection_enhancement": collection_enhancement(self.sil),
            "total_counts": int(image.pixels.sum()),
        }
        if self.settings["fit_spot"] and self.settings["emitters"]:
            fit = fit_brightest_spot(image.pixels, image.pixel_size, resolution)
            self.writer.write_fit(fit)
            background = float(np.median(image.pixels))
            report.update(
                fwhm=fit["fwhm"],
                x0=fit["x0"],
                y0=fit["y0"],
                signal_to_background=fit["amplitude"] / max(fit["offset"], 1e-12),
                peak_to_background=float(image.pixels.max()) / max(background, 1.0),
            )
            logger.info(
                f"Spot FWHM {fit['fwhm']:.1f} nm "
                f"(diffraction limit {resolution:.1f} nm)"
            )
        return report

    def spectrum(self) -> dict:
        cfg = self._sim_config()
        emitted = simulate_cw_stream(self.molecule, self.settings["power_mw"], cfg)
        detected = apply_detector(emitted, self.detector, cfg)
        resolution = self.settings["resolution_ghz"]
        wavelengths = sample_wavelengths(detected, self.molecule, cfg, resolution)

        low, high = self.settings["range_nm"]
        step = self.settings["bin_nm"]
        edges = low + step * np.arange(int(round((high - low) / step)) + 1)
        counts, _ = np.histogram(wavelengths, bins=edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        # Density per GHz to expected counts per wavelength bin
        per_nm = SPEED_OF_LIGHT / centers**2
        model = wavelengths.shape[0] * step * per_nm * emission_spectrum(
            self.molecule, centers, resolution
        )
        self.writer.write_columns(
            "spectrum",
            [centers, counts, model],
            "wavelength_nm,counts,model",
            ["%.4f", "%d", "%.6g"],
        )
        half = self.settings["zpl_window_nm"] / 2.0
        in_zpl = np.abs(wavelengths - ZPL_CENTER_NM) <= half
        photons = max(wavelengths.shape[0], 1)
        return {
            "zpl_fraction": float(in_zpl.sum()) / photons,
            "photons": int(wavelengths.shape[0]),
            "vibronic_linewidth_ghz": vibronic_linewidth(self.molecule.vibronic_relax),
            "lifetime_limited_linewidth_mhz": lifetime_limited_linewidth(
                self.molecule.tau_f
            ),
        }

    def run(self) -> RunResult:
        kind = self.config.kind
        logger.info(f"Running {kind.value} (seed {self.config.seed})")
        report = {k: _plain(v) for k, v in getattr(self, kind.value)().items()}
        comparison = compare_report(report, self.config.expect)
        if comparison:
            self.writer.write_table([asdict(row) for row in comparison], "comparison")
        report_path = self.writer.write_record(report, "report")
        manifest = self.writer.write_manifest(
            {
                "kind": kind.value,
                "seed": self.config.seed,
                "config_hash": self.config.config_hash(),
                "config": self.config.to_dict() | {"output_dir": None},
                "versions": package_versions(),
                "artifacts": sorted(p.name for p in self.writer.written),
            }
        )
        logger.info(f"Finished {kind.value}: report at {report_path}")
        return RunResult(
            kind=kind,
            report=report,
            artifacts=list(self.writer.written),
            manifest=manifest,
            comparison=comparison,
        )


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def run_experiment(
    config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None
) -> RunResult:
    return ExperimentRunner(config, output_dir).run()


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    measured: Optional[float]
    low: float
    high: float
    passed: bool
    margin: Optional[float]
    note: str = ""


def _lookup(report: dict, name: str):
    if name in report:
        return report[name]
    params = report.get("params")
    if isinstance(params, dict):
        return params.get(name)
    return None


def compare_report(
    report: dict, expectations: dict[str, tuple[float, float]]
) -> list[ComparisonRow]:
    """Check measured quantities against expected ranges.

    The margin is the distance to the nearest bound, positive inside the
    range and negative outside. A quantity absent from the report yields a
    failing row instead of an exception.
    """
    rows = []
    for name, (low, high) in sorted(expectations.items()):
        value = _lookup(report, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            rows.append(
                ComparisonRow(name, None, low, high, False, None, "missing from report")
            )
            continue
        value = float(value)
        margin = min(value - low, high - value)
        rows.append(ComparisonRow(name, value, low, high, margin >= 0, margin))
    return rows
