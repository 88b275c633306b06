"""Experiment configuration: TOML presets, defaults and validation."""

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

from .emission_sim import DetectorModel, PulseTrain, SpectralWindow
from .exceptions import ConfigurationError, DomainError
from .photophysics import MoleculeModel
from .sil_optics import EfficiencyBudget, SilSystem, detection_efficiency_budget

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ExperimentKind(str, Enum):
    CW_G2 = "cw_g2"
    PULSED_G2 = "pulsed_g2"
    SATURATION_SWEEP = "saturation_sweep"
    EXCITATION_SCAN = "excitation_scan"
    CONFOCAL_SCAN = "confocal_scan"
    SPECTRUM = "spectrum"


# filter_nm as [low, high]; an open upper bound is inf in TOML and None after loading
ALL_PASS = [0.0, None]

MOLECULE_DEFAULTS = {
    "tau_f": 4.5,
    "p_sat": 3.5,
    "zpl_fraction": 0.33,
    "isc_yield": 0.0,
    "vibronic_relax": 4.0,
    "triplet_lifetime": 10_000.0,
}
DETECTOR_DEFAULTS = {
    "efficiency": 0.1,
    "dead_time": 0.0,
    "jitter_sigma": 0.0,
    "dark_rate": 0.0,
    "budget": [],
}
SIL_DEFAULTS = {
    "n_sil": 1.8,
    "diameter": 1.0,
    "lens_na": 0.55,
    "lens_focal": 4.5,
    "wavelength": 785.0,
}

# One settings block per experiment kind, named after the measurement
KIND_BLOCKS = {
    ExperimentKind.CW_G2: "cw",
    ExperimentKind.PULSED_G2: "pulsed",
    ExperimentKind.SATURATION_SWEEP: "sweep",
    ExperimentKind.EXCITATION_SCAN: "excitation",
    ExperimentKind.CONFOCAL_SCAN: "confocal",
    ExperimentKind.SPECTRUM: "spectrum",
}
KIND_DEFAULTS = {
    "cw": {
        "power_mw": 0.84,
        "duration_s": 0.2,
        "time_resolution_ps": 1,
        "signal_to_background": 0.0,
        "filter_nm": ALL_PASS,
        "reflectance": 0.5,
        "histogram": "start_stop",
        "bin_width_ps": 512,
        "tau_max_ps": 50_000,
        "workers": 1,
        "write_tags": False,
    },
    "pulsed": {
        "rep_rate_mhz": 16.0,
        "pulse_duration_ns": 300e-6,
        "p_exc": 1.0,
        "reexcite": False,
        "duration_s": 0.5,
        "time_resolution_ps": 1,
        "signal_to_background": 0.0,
        "filter_nm": ALL_PASS,
        "reflectance": 0.5,
        "bin_width_ps": 1_000,
        "tau_max_ps": 320_000,
        "window_ps": 50_000,
        "lateral_peaks": 4,
        "workers": 1,
        "write_tags": False,
    },
    "sweep": {
        "powers_mw": [],
        "duration_s": 0.1,
        "segments": 1,
        "time_resolution_ps": 1,
        "filter_nm": ALL_PASS,
    },
    "excitation": {
        "detunings_mhz": [],
        "saturation": 0.01,
        "homogeneous_fwhm_mhz": 0.0,
        "duration_s": 0.5,
        "segments": 1,
        "time_resolution_ps": 1,
        "filter_nm": ALL_PASS,
    },
    "confocal": {
        "emitters": [],
        "background": 0.0,
        "dwell_ms": 10.0,
        "extent_um": 5.0,
        "pixel_size_nm": 50.0,
        "workers": 1,
        "fit_spot": True,
    },
    "spectrum": {
        "power_mw": 3.5,
        "duration_s": 0.01,
        "time_resolution_ps": 1,
        "resolution_ghz": 75.0,
        "range_nm": [770.0, 830.0],
        "bin_nm": 0.05,
        "zpl_window_nm": 2.0,
    },
}
# Point list and the fewest points its fit accepts
POINT_LISTS = {"sweep": ("powers_mw", 3), "excitation": ("detunings_mhz", 5)}


def _merge_block(name: str, defaults: dict, given: Any) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigurationError(f"[{name}] must be a table", name)
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(
            f"Unknown key '{unknown[0]}' in [{name}]", f"{name}.{unknown[0]}"
        )
    merged = dict(defaults)
    for key, value in given.items():
        default = defaults[key]
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, (int, float)):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigurationError(
                f"{name}.{key} must be {type(default).__name__}, "
                f"got {type(value).__name__}",
                f"{name}.{key}",
            )
        merged[key] = value
    return merged


def _normalize_expectations(expect: Any) -> dict[str, tuple[float, float]]:
    if expect is None:
        return {}
    if not isinstance(expect, dict):
        raise ConfigurationError("[expect] must be a table", "expect")
    ranges = {}
    for name, entry in expect.items():
        key = f"expect.{name}"
        if isinstance(entry, dict) and set(entry) == {"value", "tolerance"}:
            low = entry["value"] - entry["tolerance"]
            high = entry["value"] + entry["tolerance"]
        elif isinstance(entry, list) and len(entry) == 2:
            low, high = entry
        else:
            raise ConfigurationError(
                f"{key} must be [low, high] or {{value, tolerance}}", key
            )
        if not all(isinstance(v, (int, float)) for v in (low, high)) or low > high:
            raise ConfigurationError(f"{key} is not a valid range", key)
        ranges[name] = (float(low), float(high))
    return ranges


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _filter_bounds(bounds: list, block: str) -> list:
    key = f"{block}.filter_nm"
    if len(bounds) != 2:
        raise ConfigurationError("filter_nm must be [low, high]", key)
    low, high = bounds
    if not _is_number(low) or not (high is None or _is_number(high)):
        raise ConfigurationError("filter_nm bounds must be numbers", key)
    if high is None or math.isinf(high):
        return [float(low), None]
    return [float(low), float(high)]


@dataclass
class ExperimentConfig:
    """Validated description of one experiment run."""

    kind: ExperimentKind
    seed: int
    output_dir: Path = Path("runs")
    molecule: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    sil: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    expect: dict = field(default_factory=dict)

    def __post_init__(self):
        """Validate configuration after initialization."""
        try:
            self.kind = ExperimentKind(self.kind)
        except ValueError:
            raise ConfigurationError(
                f"Unknown experiment kind '{self.kind}'", "kind"
            ) from None
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigurationError("seed must be an integer", "seed")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit int", "seed")
        self.output_dir = Path(self.output_dir)

        self.molecule = _merge_block("molecule", MOLECULE_DEFAULTS, self.molecule)
        self.detector = _merge_block("detector", DETECTOR_DEFAULTS, self.detector)
        self.sil = _merge_block("sil", SIL_DEFAULTS, self.sil)
        block = self.block_name
        self.settings = _merge_block(block, KIND_DEFAULTS[block], self.settings)
        self.expect = _normalize_expectations(self.expect)
        self._validate_settings()

    @property
    def block_name(self) -> str:
        return KIND_BLOCKS[self.kind]

    def _validate_settings(self):
        block, settings = self.block_name, self.settings
        if block in POINT_LISTS:
            key, minimum = POINT_LISTS[block]
            values = settings[key]
            if len(values) < minimum:
                raise ConfigurationError(
                    f"{block}.{key} must list at least {minimum} points, "
                    f"got {len(values)}",
                    f"{block}.{key}",
                )
            if not all(isinstance(v, (int, float)) for v in values):
                raise ConfigurationError(
                    f"{block}.{key} must contain numbers", f"{block}.{key}"
                )
        if "filter_nm" in settings:
            settings["filter_nm"] = _filter_bounds(settings["filter_nm"], block)
        if "histogram" in settings and settings["histogram"] not in (
            "start_stop",
            "full",
        ):
            raise ConfigurationError(
                "histogram must be 'start_stop' or 'full'", f"{block}.histogram"
            )
        if settings.get("signal_to_background", 0.0) < 0:
            raise ConfigurationError(
                "signal_to_background must be >= 0 (0 disables background)",
                f"{block}.signal_to_background",
            )
        if settings.get("segments", 1) < 1:
            raise ConfigurationError("segments must be >= 1", f"{block}.segments")
        if "duration_s" in settings and settings["duration_s"] <= 0:
            raise ConfigurationError(
                "duration_s must be positive", f"{block}.duration_s"
            )
        if block == "confocal":
            for i, emitter in enumerate(settings["emitters"]):
                if not isinstance(emitter, list) or len(emitter) != 3:
                    raise ConfigurationError(
                        "Each emitter must be [x_nm, y_nm, brightness]",
                        f"confocal.emitters[{i}]",
                    )

        # Build the typed models once so their domain checks surface here
        for name, build in (
            ("molecule", self.molecule_model),
            ("detector", self.detector_model),
            ("sil", self.sil_system),
            (block, self.spectral_window),
        ):
            try:
                build()
            except (DomainError, TypeError) as e:
                raise ConfigurationError(str(e), name) from e
        if block == "pulsed":
            try:
                train = self.pulse_train()
            except DomainError as e:
                raise ConfigurationError(str(e), block) from e
            needed = settings["lateral_peaks"] * train.period_ps
            needed += settings["window_ps"] / 2
            if settings["tau_max_ps"] < needed:
                raise ConfigurationError(
                    f"tau_max_ps must reach the lateral peaks ({needed:.0f} ps)",
                    "pulsed.tau_max_ps",
                )

    def molecule_model(self) -> MoleculeModel:
        params = dict(self.molecule)
        return MoleculeModel.with_zpl_fraction(params.pop("zpl_fraction"), **params)

    def efficiency_budget(self) -> Optional[EfficiencyBudget]:
        stages = self.detector["budget"]
        return EfficiencyBudget(tuple(tuple(s) for s in stages)) if stages else None

    def detector_model(self) -> DetectorModel:
        params = {k: v for k, v in self.detector.items() if k != "budget"}
        budget = self.efficiency_budget()
        if budget is not None:
            params["efficiency"] = detection_efficiency_budget(budget)
        return DetectorModel(**params)

    def sil_system(self) -> SilSystem:
        return SilSystem(**self.sil)

    def spectral_window(self) -> SpectralWindow:
        low, high = self.settings.get("filter_nm", ALL_PASS)
        if high is not None:
            return SpectralWindow(float(low), float(high))
        if low == 0:
            return SpectralWindow.all_pass()
        return SpectralWindow.long_pass(float(low))

    def pulse_train(self) -> PulseTrain:
        return PulseTrain(
            rep_rate=self.settings["rep_rate_mhz"],
            pulse_duration=self.settings["pulse_duration_ns"],
            p_exc=self.settings["p_exc"],
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seed"] = seed
        return ExperimentConfig.from_dict(data)

    def to_dict(self) -> dict:
        data = {
            "kind": self.kind.value,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "molecule": dict(self.molecule),
            "detector": dict(self.detector),
            "sil": dict(self.sil),
            self.block_name: dict(self.settings),
        }
        if self.expect:
            data["expect"] = {k: list(v) for k, v in self.expect.items()}
        return data

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything that affects results."""
        data = self.to_dict()
        data.pop("output_dir")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "kind" not in data:
            raise ConfigurationError("Missing experiment kind", "kind")
        if "seed" not in data:
            raise ConfigurationError("A seed is required", "seed")
        try:
            kind = ExperimentKind(data.pop("kind"))
        except ValueError as e:
            raise ConfigurationError(str(e), "kind") from None
        block = KIND_BLOCKS[kind]
        if block not in data:
            raise ConfigurationError(
                f"Experiment kind '{kind.value}' needs a [{block}] block", block
            )
        settings = data.pop(block)
        known = {"seed", "output_dir", "molecule", "detector", "sil", "expect"}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigurationError(f"Unexpected config entry '{extra[0]}'", extra[0])
        return cls(
            kind=kind,
            seed=data["seed"],
            output_dir=data.get("output_dir", Path("runs") / kind.value),
            molecule=data.get("molecule"),
            detector=data.get("detector"),
            sil=data.get("sil"),
            settings=settings,
            expect=data.get("expect"),
        )

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(2, "No such file", str(path))
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        return cls.from_dict(data)


def preset_names() -> list[str]:
    presets = resources.files("zplsource") / "presets"
    return sorted(
        p.name[: -len(".toml")] for p in presets.iterdir() if p.name.endswith(".toml")
    )


def load_preset(name: str) -> ExperimentConfig:
    """Load one of the configs shipped with the package."""
    preset = resources.files("zplsource") / "presets" / f"{name}.toml"
    if not preset.is_file():
        raise ConfigurationError(
            f"Unknown preset '{name}', choose from {preset_names()}", "preset"
        )
    return ExperimentConfig.from_dict(tomllib.loads(preset.read_text()))
