"""Closed-form photophysics of a single dibenzoterrylene (DBT) molecule.

All functions are pure and accept scalars or numpy arrays. Units follow the
rest of the package: times in ns (vibronic relaxation in ps), powers in mW,
optical frequencies in MHz/GHz and wavelengths in nm.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import voigt_profile

from .exceptions import DomainError

ArrayLike = Union[float, np.ndarray, Sequence[float]]

SPEED_OF_LIGHT = 299_792_458.0  # m/s
ZPL_CENTER_NM = 785.0
RED_SHIFTED_CENTER_NM = 810.0
SPECTROMETER_RESOLUTION_GHZ = 75.0


def _scalar_or_array(values: np.ndarray):
    return float(values) if values.ndim == 0 else values


def nm_to_ghz(wavelength_nm: ArrayLike) -> ArrayLike:
    """Optical frequency (GHz) of a vacuum wavelength (nm)."""
    wavelength = np.asarray(wavelength_nm, dtype=float)
    return _scalar_or_array(SPEED_OF_LIGHT / wavelength)


@dataclass(frozen=True)
class SpectralLine:
    """One emission line: center (nm), branching weight, FWHM (GHz)."""

    center: float
    weight: float
    fwhm: float
    is_zpl: bool = False

    def __post_init__(self):
        if self.center <= 0:
            raise DomainError(f"Line center must be positive, got {self.center}")
        if not 0.0 <= self.weight <= 1.0:
            raise DomainError(f"Line weight must lie in [0, 1], got {self.weight}")
        if self.fwhm <= 0:
            raise DomainError(f"Line FWHM must be positive, got {self.fwhm}")


def default_lines(zpl_fraction: float = 0.33) -> tuple[SpectralLine, ...]:
    """ZPL plus one aggregate red-shifted pseudo-line for all vibronic lines."""
    return (
        SpectralLine(ZPL_CENTER_NM, zpl_fraction, 0.037, is_zpl=True),
        SpectralLine(RED_SHIFTED_CENTER_NM, 1.0 - zpl_fraction, 1000.0),
    )


@dataclass(frozen=True)
class MoleculeModel:
    """Photophysical parameters of a single molecule.

    Args:
        tau_f: Excited-state lifetime in ns
        p_sat: Saturation power in mW
        zpl_fraction: Branching of the emission into the zero-phonon line
        isc_yield: Intersystem-crossing probability per excitation cycle
        vibronic_relax: Vibronic relaxation time in ps
        lines: Emission lines; weights sum to one
        triplet_lifetime: Dark-state dwell in ns, used only when isc_yield > 0
    """

    tau_f: float = 4.5
    p_sat: float = 3.5
    zpl_fraction: float = 0.33
    isc_yield: float = 0.0
    vibronic_relax: float = 4.0
    lines: tuple[SpectralLine, ...] = field(default_factory=default_lines)
    triplet_lifetime: float = 10_000.0

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        if self.tau_f <= 0:
            raise DomainError(f"tau_f must be positive, got {self.tau_f}")
        if self.p_sat <= 0:
            raise DomainError(f"p_sat must be positive, got {self.p_sat}")
        if not 0.0 < self.zpl_fraction <= 1.0:
            raise DomainError(
                f"zpl_fraction must lie in (0, 1], got {self.zpl_fraction}"
            )
        if self.isc_yield < 0:
            raise DomainError(f"isc_yield must be >= 0, got {self.isc_yield}")
        if self.vibronic_relax <= 0:
            raise DomainError(
                f"vibronic_relax must be positive, got {self.vibronic_relax}"
            )
        if self.triplet_lifetime <= 0:
            raise DomainError(
                f"triplet_lifetime must be positive, got {self.triplet_lifetime}"
            )
        # The two-level reduction needs vibronic relaxation far faster than decay
        if self.vibronic_relax * 1e-3 / self.tau_f >= 1e-2:
            raise DomainError(
                "vibronic_relax must be at least 100x shorter than tau_f "
                f"({self.vibronic_relax} ps vs {self.tau_f} ns)"
            )
        if not self.lines:
            raise DomainError("A molecule needs at least one spectral line")
        total = math.fsum(line.weight for line in self.lines)
        if abs(total - 1.0) > 1e-9:
            raise DomainError(f"Line weights must sum to 1, got {total}")
        zpl = [line for line in self.lines if line.is_zpl]
        if len(zpl) != 1:
            raise DomainError("Exactly one spectral line must be flagged as ZPL")
        if abs(zpl[0].weight - self.zpl_fraction) > 1e-9:
            raise DomainError(
                f"ZPL line weight {zpl[0].weight} differs from "
                f"zpl_fraction {self.zpl_fraction}"
            )

    @classmethod
    def with_zpl_fraction(cls, zpl_fraction: float, **kwargs) -> "MoleculeModel":
        """Build a model whose default line set matches ``zpl_fraction``."""
        return cls(
            zpl_fraction=zpl_fraction, lines=default_lines(zpl_fraction), **kwargs
        )

    @property
    def line_weights(self) -> np.ndarray:
        return np.array([line.weight for line in self.lines])

    @property
    def line_centers(self) -> np.ndarray:
        return np.array([line.center for line in self.lines])

    @property
    def zpl_index(self) -> int:
        return next(i for i, line in enumerate(self.lines) if line.is_zpl)

    def saturation_parameter(self, power: float) -> float:
        return power / self.p_sat


@dataclass(frozen=True)
class SaturationCurve:
    """Saturation law parameters: S_inf (counts/s) and P_sat (mW)."""

    s_inf: float
    p_sat: float

    def __post_init__(self):
        if self.s_inf <= 0:
            raise DomainError(f"s_inf must be positive, got {self.s_inf}")
        if self.p_sat <= 0:
            raise DomainError(f"p_sat must be positive, got {self.p_sat}")


def saturation_signal(power: ArrayLike, curve: SaturationCurve) -> ArrayLike:
    """Detected count rate S = S_inf (P/P_sat) / (1 + P/P_sat)."""
    power = np.asarray(power, dtype=float)
    if np.any(power < 0):
        raise DomainError("Excitation power must be non-negative")
    with np.errstate(invalid="ignore"):
        s = power / curve.p_sat
        signal = np.where(np.isinf(s), curve.s_inf, curve.s_inf * s / (1.0 + s))
    return _scalar_or_array(signal)


def analytic_g2_cw(
    tau: ArrayLike, dip: float, tau_f: float, s: float, c_inf: float = 1.0
) -> ArrayLike:
    """cw coincidence curve C(tau) = C_inf {1 - b exp[-(|tau|/tau_f)(1 + s)]}."""
    if not 0.0 <= dip <= 1.0:
        raise DomainError(f"Dip must lie in [0, 1], got {dip}")
    if tau_f <= 0:
        raise DomainError(f"tau_f must be positive, got {tau_f}")
    if s < 0:
        raise DomainError(f"Saturation parameter must be >= 0, got {s}")
    tau = np.asarray(tau, dtype=float)
    curve = c_inf * (1.0 - dip * np.exp(-np.abs(tau) * (1.0 + s) / tau_f))
    return _scalar_or_array(curve)


def antibunching_rise_time(tau_f: float, s: float) -> float:
    """Effective 1/e rise time tau_f / (1 + s) of the cw dip."""
    return tau_f / (1.0 + s)


def excitation_lineshape(
    detuning: ArrayLike, fwhm0: float, s: float = 0.0
) -> ArrayLike:
    """Peak-normalized, power-broadened Lorentzian excitation profile.

    Args:
        detuning: Laser detuning from the line center in MHz
        fwhm0: Homogeneous (s -> 0) linewidth in MHz
        s: Saturation parameter P/P_sat

    Returns:
        Relative excitation rate in (0, 1]
    """
    if fwhm0 <= 0:
        raise DomainError(f"fwhm0 must be positive, got {fwhm0}")
    if s < 0:
        raise DomainError(f"Saturation parameter must be >= 0, got {s}")
    width = fwhm0 * math.sqrt(1.0 + s)
    x = 2.0 * np.asarray(detuning, dtype=float) / width
    return _scalar_or_array(1.0 / (1.0 + x * x))


def lifetime_limited_linewidth(tau_f: float) -> float:
    """Fourier-limited FWHM 1/(2 pi tau_f), in MHz for tau_f in ns."""
    if tau_f <= 0:
        raise DomainError(f"tau_f must be positive, got {tau_f}")
    return 1e3 / (2.0 * math.pi * tau_f)


def vibronic_linewidth(vibronic_relax: float) -> float:
    """Width (GHz) of the vibronic excitation line set by relaxation time (ps)."""
    if vibronic_relax <= 0:
        raise DomainError(f"vibronic_relax must be positive, got {vibronic_relax}")
    return 1e3 / (2.0 * math.pi * vibronic_relax)


def pump_rate_from_power(power: ArrayLike, molecule: MoleculeModel) -> ArrayLike:
    """Ground-to-excited jump rate k_exc = (P/P_sat)/tau_f in 1/ns."""
    power = np.asarray(power, dtype=float)
    if np.any(power < 0):
        raise DomainError("Excitation power must be non-negative")
    return _scalar_or_array(power / molecule.p_sat / molecule.tau_f)


def steady_state_emission_rate(power: ArrayLike, molecule: MoleculeModel) -> ArrayLike:
    """Mean photon emission rate (1/ns) of the two-state jump cycle.

    The cycle alternates a ground dwell of mean 1/k_exc with an excited dwell
    of mean tau_f, so the rate is k_exc * gamma / (k_exc + gamma).
    """
    k_exc = np.asarray(pump_rate_from_power(power, molecule), dtype=float)
    gamma = 1.0 / molecule.tau_f
    return _scalar_or_array(k_exc * gamma / (k_exc + gamma))


def two_photon_per_pulse_prob(
    pulse_duration: float, tau_f: float, p_exc: float
) -> float:
    """Probability that one excitation pulse yields two or more photons.

    The pulse is a top-hat of length T with a constant pump rate
    k = -ln(1 - p_exc)/T. A second photon needs excitation, decay and
    re-excitation all inside the pulse.
    """
    if pulse_duration <= 0:
        raise DomainError(f"pulse_duration must be positive, got {pulse_duration}")
    if tau_f <= 0:
        raise DomainError(f"tau_f must be positive, got {tau_f}")
    if not 0.0 <= p_exc <= 1.0:
        raise DomainError(f"p_exc must lie in [0, 1], got {p_exc}")

    t = pulse_duration
    gamma = 1.0 / tau_f
    if p_exc == 0.0:
        return 0.0
    if p_exc == 1.0:
        # Instantaneous excitation and re-excitation: only the decay matters
        return -math.expm1(-gamma * t)

    k = -math.log1p(-p_exc) / t
    a = k - gamma
    gamma_kt = 1.0 - math.exp(-k * t) * (1.0 + k * t)
    if abs(a * t) < 1e-6:
        inner = t * t / 2.0 * (1.0 - 2.0 * a * t / 3.0)
    else:
        inner = -(math.expm1(-a * t) + a * t * math.exp(-a * t)) / (a * a)
    prob = gamma_kt - k * k * math.exp(-gamma * t) * inner
    return min(max(prob, 0.0), 1.0)


def emission_spectrum(
    molecule: MoleculeModel,
    wavelengths: ArrayLike,
    resolution_ghz: float = SPECTROMETER_RESOLUTION_GHZ,
) -> np.ndarray:
    """Spectral density (per GHz) seen through a spectrometer.

    Each line is a Lorentzian in frequency convolved with a Gaussian
    instrument response of FWHM ``resolution_ghz``.
    """
    if resolution_ghz <= 0:
        raise DomainError(f"resolution_ghz must be positive, got {resolution_ghz}")
    freq = np.asarray(nm_to_ghz(wavelengths), dtype=float)
    sigma = resolution_ghz / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    density = np.zeros_like(freq)
    for line in molecule.lines:
        center = nm_to_ghz(line.center)
        density += line.weight * voigt_profile(freq - center, sigma, line.fwhm / 2.0)
    return density
