"""Quantum-jump Monte Carlo of a single emitter and its detection chain."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import CapacityError, DomainError
from .logger import logger
from .photophysics import (
    SPECTROMETER_RESOLUTION_GHZ,
    SPEED_OF_LIGHT,
    MoleculeModel,
    nm_to_ghz,
    pump_rate_from_power,
)
from .streams import NO_LINE, Origin, PhotonStream, SimConfig


@dataclass(frozen=True)
class PulseTrain:
    """Pulsed excitation: repetition rate (MHz), pulse length (ns), p_exc."""

    rep_rate: float = 16.0
    pulse_duration: float = 300e-6
    p_exc: float = 1.0
    n_pulses: Optional[int] = None

    def __post_init__(self):
        if self.rep_rate <= 0:
            raise DomainError(f"rep_rate must be positive, got {self.rep_rate}")
        if not 0 < self.pulse_duration < self.period_ns:
            raise DomainError(
                f"pulse_duration must lie in (0, {self.period_ns}) ns, "
                f"got {self.pulse_duration}"
            )
        if not 0.0 <= self.p_exc <= 1.0:
            raise DomainError(f"p_exc must lie in [0, 1], got {self.p_exc}")
        if self.n_pulses is not None and self.n_pulses < 0:
            raise DomainError(f"n_pulses must be >= 0, got {self.n_pulses}")

    @property
    def period_ns(self) -> float:
        return 1e3 / self.rep_rate

    @property
    def period_ps(self) -> int:
        return int(round(1e6 / self.rep_rate))

    def pulses_within(self, duration_ns: float) -> int:
        available = int(math.ceil(duration_ns / self.period_ns))
        return available if self.n_pulses is None else min(self.n_pulses, available)


@dataclass(frozen=True)
class DetectorModel:
    """APD model: efficiency, dead time (ns), jitter sigma (ps), dark rate (1/s)."""

    efficiency: float = 0.1
    dead_time: float = 0.0
    jitter_sigma: float = 0.0
    dark_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise DomainError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if self.dead_time < 0:
            raise DomainError(f"dead_time must be >= 0, got {self.dead_time}")
        if self.jitter_sigma < 0:
            raise DomainError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if self.dark_rate < 0:
            raise DomainError(f"dark_rate must be >= 0, got {self.dark_rate}")

    @classmethod
    def ideal(cls) -> "DetectorModel":
        return cls(efficiency=1.0)


@dataclass(frozen=True)
class SpectralWindow:
    """Ideal top-hat transmission window [low_nm, high_nm]."""

    low_nm: float
    high_nm: float = math.inf

    def __post_init__(self):
        if not self.high_nm > self.low_nm:
            raise DomainError(
                f"Empty spectral window [{self.low_nm}, {self.high_nm}] nm"
            )

    @classmethod
    def band_pass(cls, center: float, width: float) -> "SpectralWindow":
        if width <= 0:
            raise DomainError(f"Band-pass width must be positive, got {width}")
        return cls(center - width / 2.0, center + width / 2.0)

    @classmethod
    def long_pass(cls, cutoff: float) -> "SpectralWindow":
        return cls(cutoff, math.inf)

    @classmethod
    def all_pass(cls) -> "SpectralWindow":
        return cls(0.0, math.inf)

    def transmits(self, wavelengths: np.ndarray) -> np.ndarray:
        wavelengths = np.asarray(wavelengths, dtype=float)
        return (wavelengths >= self.low_nm) & (wavelengths <= self.high_nm)


def _origins_for_lines(molecule: MoleculeModel, lines: np.ndarray) -> np.ndarray:
    return np.where(
        lines == molecule.zpl_index, Origin.ZPL, Origin.RED_SHIFTED
    ).astype(np.uint8)


def _draw_lines(molecule: MoleculeModel, n: int, cfg: SimConfig, stage: str):
    rng = cfg.rng(stage)
    lines = rng.choice(len(molecule.lines), size=n, p=molecule.line_weights)
    return lines.astype(np.int16)


def _check_capacity(expected: float, cfg: SimConfig) -> None:
    if expected > cfg.max_tags:
        raise CapacityError(expected, cfg.max_tags)


def simulate_cw_stream(
    molecule: MoleculeModel, power: float, cfg: SimConfig
) -> PhotonStream:
    """Emission of a cw-pumped molecule as a time-tagged photon stream.

    Each cycle is a ground dwell ~ Exp(1/k_exc) followed by an excited dwell
    ~ Exp(tau_f) ending in one photon. With a non-zero ISC yield a decay may
    instead shelve the molecule in the triplet, emitting nothing.
    """
    k_exc = pump_rate_from_power(power, molecule)
    if k_exc == 0:
        return PhotonStream.empty(cfg.duration_ps, cfg.time_resolution)

    duration_ns = cfg.duration * 1e9
    mean_cycle = 1.0 / k_exc + molecule.tau_f
    mean_cycle += molecule.isc_yield * molecule.triplet_lifetime
    expected = duration_ns / mean_cycle
    _check_capacity(expected, cfg)

    rng = cfg.rng("cw-emission")
    chunk = int(expected * 1.02 + 6.0 * math.sqrt(expected) + 64)
    pieces = []
    start = 0.0
    while start < duration_ns:
        ground = rng.exponential(1.0 / k_exc, chunk)
        excited = rng.exponential(molecule.tau_f, chunk)
        cycle = ground + excited
        emits = np.ones(chunk, dtype=bool)
        if molecule.isc_yield > 0:
            shelved = rng.random(chunk) < molecule.isc_yield
            cycle = cycle + np.where(
                shelved, rng.exponential(molecule.triplet_lifetime, chunk), 0.0
            )
            emits = ~shelved
        ends = start + np.cumsum(cycle)
        decays = ends - cycle + ground + excited
        pieces.append(decays[emits & (decays < duration_ns)])
        start = ends[-1]
        logger.debug(f"cw chunk of {chunk} cycles reached {start:.4g} ns")

    times = cfg.quantize(np.concatenate(pieces))
    times = times[times < cfg.duration_ps]
    lines = _draw_lines(molecule, times.shape[0], cfg, "cw-lines")
    logger.debug(f"Simulated {times.shape[0]} cw photons at P = {power} mW")
    return PhotonStream(
        times=times,
        origins=_origins_for_lines(molecule, lines),
        lines=lines,
        channels=np.zeros(times.shape[0], np.uint8),
        duration_ps=cfg.duration_ps,
        resolution_ps=cfg.time_resolution,
    )


def _pulse_emissions(
    molecule: MoleculeModel,
    train: PulseTrain,
    n_pulses: int,
    rng: np.random.Generator,
    reexcite: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Emission delays (ns after the pulse) and the pulse each belongs to."""
    draws = rng.random(n_pulses)
    pulses = np.flatnonzero(draws < train.p_exc)
    if not reexcite:
        return rng.exponential(molecule.tau_f, pulses.shape[0]), pulses

    # Constant pump rate inside a top-hat pulse; excitation times are drawn
    # from the exponential truncated to the pulse, re-using the uniform draw.
    width = train.pulse_duration
    if train.p_exc == 1.0:
        pump = math.inf
        excite_at = np.zeros(pulses.shape[0])
    else:
        pump = -math.log1p(-train.p_exc) / width
        excite_at = -np.log1p(-draws[pulses]) / pump

    delays, owners = [], []
    active, t = pulses, excite_at
    while active.size:
        decay = t + rng.exponential(molecule.tau_f, active.shape[0])
        delays.append(decay)
        owners.append(active)
        inside = decay < width
        active, decay = active[inside], decay[inside]
        if math.isinf(pump):
            t = decay
        else:
            t = decay + rng.exponential(1.0 / pump, active.shape[0])
            again = t < width
            active, t = active[again], t[again]
    if not delays:
        return np.empty(0), np.empty(0, np.int64)
    return np.concatenate(delays), np.concatenate(owners)


def simulate_pulsed_stream(
    molecule: MoleculeModel,
    train: PulseTrain,
    cfg: SimConfig,
    reexcite: bool = False,
) -> PhotonStream:
    """Triggered emission under a pulse train.

    By default each pulse excites the molecule at most once (with probability
    ``p_exc``); ``reexcite=True`` lets a decay inside the pulse be followed by
    another excitation.
    """
    duration_ns = cfg.duration * 1e9
    n_pulses = train.pulses_within(duration_ns)
    _check_capacity(n_pulses * train.p_exc, cfg)
    if n_pulses == 0 or train.p_exc == 0:
        return PhotonStream.empty(cfg.duration_ps, cfg.time_resolution)

    rng = cfg.rng("pulsed-emission")
    delays, pulses = _pulse_emissions(molecule, train, n_pulses, rng, reexcite)
    times = cfg.quantize(pulses * train.period_ns + delays)
    keep = times < cfg.duration_ps
    times = times[keep]
    lines = _draw_lines(molecule, times.shape[0], cfg, "pulsed-lines")
    logger.debug(f"Simulated {times.shape[0]} photons from {n_pulses} pulses")
    return PhotonStream.from_unsorted(
        times=times,
        origins=_origins_for_lines(molecule, lines),
        lines=lines,
        duration_ps=cfg.duration_ps,
        resolution_ps=cfg.time_resolution,
    )


def multi_photon_fraction(
    molecule: MoleculeModel, train: PulseTrain, cfg: SimConfig
) -> tuple[float, float]:
    """Monte Carlo fraction of pulses emitting two or more photons.

    Returns:
        The fraction and its binomial standard error
    """
    n_pulses = train.pulses_within(cfg.duration * 1e9)
    if n_pulses == 0:
        raise DomainError("The pulse train has no pulse inside the duration")
    rng = cfg.rng("pulsed-emission")
    _, pulses = _pulse_emissions(molecule, train, n_pulses, rng, reexcite=True)
    per_pulse = np.bincount(pulses, minlength=n_pulses)
    fraction = float(np.count_nonzero(per_pulse >= 2)) / n_pulses
    return fraction, math.sqrt(fraction * (1.0 - fraction) / n_pulses)


def apply_spectral_filter(
    stream: PhotonStream, window: SpectralWindow, molecule: MoleculeModel
) -> PhotonStream:
    """Keep photons whose emission line center lies inside ``window``.

    Tags without a line (background, dark counts) are passed unchanged.
    """
    line_passes = window.transmits(molecule.line_centers)
    labelled = stream.lines != NO_LINE
    keep = ~labelled
    keep[labelled] = line_passes[stream.lines[labelled]]
    logger.debug(f"Spectral filter kept {int(keep.sum())} of {len(stream)} tags")
    return stream.select(keep)


def _uniform_tags(n: int, duration_ps: int, resolution: int, rng) -> np.ndarray:
    ticks = rng.integers(0, max(duration_ps // resolution, 1), n)
    return np.sort(ticks.astype(np.int64) * resolution)


def add_background(
    stream: PhotonStream, rate: float, cfg: SimConfig
) -> PhotonStream:
    """Merge a homogeneous Poisson background of ``rate`` counts/s."""
    if rate < 0:
        raise DomainError(f"Background rate must be >= 0, got {rate}")
    if rate == 0:
        return stream
    _check_capacity(rate * stream.duration, cfg)
    rng = cfg.rng("background")
    n = int(rng.poisson(rate * stream.duration))
    times = _uniform_tags(n, stream.duration_ps, stream.resolution_ps, rng)
    background = PhotonStream(
        times=times,
        origins=np.full(n, Origin.BACKGROUND, np.uint8),
        lines=np.full(n, NO_LINE, np.int16),
        channels=np.zeros(n, np.uint8),
        duration_ps=stream.duration_ps,
        resolution_ps=stream.resolution_ps,
    )
    logger.debug(f"Added {n} background tags at {rate:.4g} counts/s")
    return stream.merge(background)


def dead_time_mask(times: np.ndarray, dead_ps: int) -> np.ndarray:
    """Non-paralyzable dead time: keep a tag only if it arrives at least
    ``dead_ps`` after the previously kept one.

    The scan jumps over runs of tags already separated by the dead time, so
    the Python loop only visits tags that actually fall inside a dead window.
    """
    n = times.shape[0]
    keep = np.zeros(n, dtype=bool)
    if n == 0 or dead_ps <= 0:
        keep[:] = True
        return keep
    following = np.searchsorted(times, times + dead_ps, side="left")
    crowded = np.flatnonzero(following != np.arange(1, n + 1))
    i = 0
    while i < n:
        k = np.searchsorted(crowded, i)
        if k == crowded.shape[0]:
            keep[i:] = True
            break
        j = crowded[k]
        keep[i : j + 1] = True
        i = following[j]
    return keep


def apply_detector(
    stream: PhotonStream, det: DetectorModel, cfg: SimConfig, channel: int = 0
) -> PhotonStream:
    """Efficiency thinning, timing jitter, dark counts and dead time.

    Each ``channel`` draws from its own generator, so the two detectors of
    an HBT setup are independent.
    """
    rng = cfg.rng("detector", channel)
    detected = stream.select(rng.random(len(stream)) < det.efficiency)

    times = detected.times
    if det.jitter_sigma > 0 and len(detected):
        shifted = times + np.rint(rng.normal(0.0, det.jitter_sigma, times.shape[0]))
        shifted = np.clip(shifted, 0, stream.duration_ps - 1).astype(np.int64)
        times = (shifted // stream.resolution_ps) * stream.resolution_ps
    detected = PhotonStream.from_unsorted(
        times=times,
        origins=detected.origins,
        lines=detected.lines,
        channels=detected.channels,
        duration_ps=stream.duration_ps,
        resolution_ps=stream.resolution_ps,
    )

    if det.dark_rate > 0:
        n_dark = int(rng.poisson(det.dark_rate * stream.duration))
        dark = PhotonStream(
            times=_uniform_tags(n_dark, stream.duration_ps, stream.resolution_ps, rng),
            origins=np.full(n_dark, Origin.DARK, np.uint8),
            lines=np.full(n_dark, NO_LINE, np.int16),
            channels=np.full(n_dark, channel, np.uint8),
            duration_ps=stream.duration_ps,
            resolution_ps=stream.resolution_ps,
        )
        detected = detected.merge(dark)

    dead_ps = int(round(det.dead_time * 1e3))
    output = detected.select(dead_time_mask(detected.times, dead_ps))
    logger.debug(
        f"Detector kept {len(output)} of {len(stream)} tags "
        f"(efficiency {det.efficiency}, dead time {det.dead_time} ns)"
    )
    return output


def sample_wavelengths(
    stream: PhotonStream,
    molecule: MoleculeModel,
    cfg: SimConfig,
    resolution_ghz: float = SPECTROMETER_RESOLUTION_GHZ,
) -> np.ndarray:
    """Wavelength (nm) of each line-labelled photon as a spectrometer sees it.

    Frequencies are drawn from the line's Lorentzian and blurred by a
    Gaussian instrument response of FWHM ``resolution_ghz``.
    """
    if resolution_ghz <= 0:
        raise DomainError(f"resolution_ghz must be positive, got {resolution_ghz}")
    lines = stream.lines[stream.lines != NO_LINE]
    rng = cfg.rng("spectrometer")
    centers = np.asarray(nm_to_ghz(molecule.line_centers))[lines]
    half_widths = np.array([line.fwhm / 2.0 for line in molecule.lines])[lines]
    sigma = resolution_ghz / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    freq = centers + half_widths * rng.standard_cauchy(lines.shape[0])
    freq += rng.normal(0.0, sigma, lines.shape[0])
    freq = freq[freq > 0]
    return SPEED_OF_LIGHT / freq
