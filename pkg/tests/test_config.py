import json
import math

import pytest

from zplsource.config import (
    ExperimentConfig,
    ExperimentKind,
    load_preset,
    preset_names,
)
from zplsource.emission_sim import SpectralWindow
from zplsource.exceptions import ConfigurationError


def _sweep(**overrides):
    data = {
        "kind": "saturation_sweep",
        "seed": 1,
        "sweep": {"powers_mw": [0.7, 3.5, 17.5]},
    }
    data.update(overrides)
    return data


def test_presets_load():
    names = preset_names()
    assert set(names) == {kind.value for kind in ExperimentKind}
    for name in names:
        config = load_preset(name)
        assert config.kind.value == name
        assert config.expect


def test_unknown_preset():
    with pytest.raises(ConfigurationError) as excinfo:
        load_preset("nope")
    assert excinfo.value.config_key == "preset"


def test_defaults_are_merged():
    config = ExperimentConfig.from_dict(_sweep())
    assert config.settings["segments"] == 1
    assert config.molecule["tau_f"] == 4.5
    assert config.spectral_window().high_nm == math.inf
    assert str(config.output_dir) == "runs/saturation_sweep"


def test_empty_point_list_is_rejected():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(_sweep(sweep={"powers_mw": []}))
    assert excinfo.value.config_key == "sweep.powers_mw"


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(_sweep(sweep={"powers_mw": [1.0], "bogus": 1}))
    assert excinfo.value.config_key == "sweep.bogus"


def test_wrong_type_is_rejected():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(_sweep(sweep={"powers_mw": [1.0], "segments": "3"}))
    assert excinfo.value.config_key == "sweep.segments"


def test_missing_kind_block():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict({"kind": "cw_g2", "seed": 1})
    assert excinfo.value.config_key == "cw"


def test_missing_seed_and_kind():
    with pytest.raises(ConfigurationError, match="seed"):
        ExperimentConfig.from_dict({"kind": "cw_g2", "cw": {}})
    with pytest.raises(ConfigurationError, match="kind"):
        ExperimentConfig.from_dict({"seed": 1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"kind": "laser", "seed": 1})


def test_domain_errors_become_configuration_errors():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(_sweep(molecule={"tau_f": -1.0}))
    assert excinfo.value.config_key == "molecule"

    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(
            {"kind": "pulsed_g2", "seed": 1, "pulsed": {"pulse_duration_ns": 100.0}}
        )
    assert excinfo.value.config_key == "pulsed"


def test_expectations_are_normalized():
    config = ExperimentConfig.from_dict(
        _sweep(expect={"p_sat": {"value": 3.5, "tolerance": 0.1}, "s_inf": [1, 2]})
    )
    assert config.expect["p_sat"] == pytest.approx((3.4, 3.6))
    assert config.expect["s_inf"] == (1.0, 2.0)

    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(_sweep(expect={"p_sat": [3.6, 3.4]}))
    assert excinfo.value.config_key == "expect.p_sat"


def test_budget_overrides_efficiency():
    config = ExperimentConfig.from_dict(
        _sweep(detector={"efficiency": 0.9, "budget": [["a", 0.5], ["b", 0.2]]})
    )
    assert config.detector_model().efficiency == pytest.approx(0.1)


def test_seed_override_and_hash():
    config = load_preset("cw_g2")
    reseeded = config.with_seed(7)
    assert reseeded.seed == 7
    assert reseeded.settings == config.settings
    assert reseeded.config_hash() != config.config_hash()

    moved = ExperimentConfig.from_dict({**config.to_dict(), "output_dir": "/tmp/x"})
    assert moved.config_hash() == config.config_hash()


def test_from_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'kind = "excitation_scan"\n'
        "seed = 3\n"
        "[excitation]\n"
        "detunings_mhz = [-100.0, -50.0, 0.0, 50.0, 100.0]\n"
        "filter_nm = [790.0, inf]\n"
    )
    config = ExperimentConfig.from_file(path)
    assert config.kind is ExperimentKind.EXCITATION_SCAN
    assert config.spectral_window() == SpectralWindow.long_pass(790.0)
    assert config.settings["filter_nm"] == [790.0, None]


def test_from_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.from_file(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("kind = \n")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(broken)


def test_sweep_needs_three_powers():
    with pytest.raises(ConfigurationError, match="at least 3") as excinfo:
        ExperimentConfig.from_dict(_sweep(sweep={"powers_mw": [1.0, 2.0]}))
    assert excinfo.value.config_key == "sweep.powers_mw"


def test_excitation_scan_needs_five_detunings():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(
            {
                "kind": "excitation_scan",
                "seed": 1,
                "excitation": {"detunings_mhz": [-50.0, 0.0, 50.0, 100.0]},
            }
        )
    assert excinfo.value.config_key == "excitation.detunings_mhz"


def test_open_filter_bound_serializes_as_null():
    config = load_preset("excitation_scan")
    data = config.to_dict()

    assert data["excitation"]["filter_nm"] == [790.0, None]
    assert "Infinity" not in json.dumps(data, allow_nan=False)
    reloaded = ExperimentConfig.from_dict(data)
    assert reloaded.spectral_window() == SpectralWindow.long_pass(790.0)
    assert reloaded.config_hash() == config.config_hash()


def test_default_filter_passes_everything():
    config = ExperimentConfig.from_dict(_sweep())
    assert config.settings["filter_nm"] == [0.0, None]
    assert config.spectral_window() == SpectralWindow.all_pass()


def test_filter_bounds_must_be_numbers():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(
            _sweep(sweep={"powers_mw": [0.7, 3.5, 17.5], "filter_nm": ["a", 800.0]})
        )
    assert excinfo.value.config_key == "sweep.filter_nm"


def test_pulsed_range_must_reach_lateral_peaks():
    with pytest.raises(ConfigurationError) as excinfo:
        ExperimentConfig.from_dict(
            {"kind": "pulsed_g2", "seed": 1, "pulsed": {"tau_max_ps": 200_000}}
        )
    assert excinfo.value.config_key == "pulsed.tau_max_ps"
    config = ExperimentConfig.from_dict({"kind": "pulsed_g2", "seed": 1, "pulsed": {}})
    assert config.settings["tau_max_ps"] == 320_000
