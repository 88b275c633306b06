"""Hanbury-Brown and Twiss chain: beamsplitter and coincidence histograms."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .exceptions import ContractViolationError, DomainError, InsufficientDataError
from .logger import logger
from .streams import PhotonStream

TagSource = Union[PhotonStream, np.ndarray]

DEFAULT_CW_BIN_PS = 512
DEFAULT_CW_TAU_MAX_PS = 100_000
DEFAULT_PULSED_BIN_PS = 1_000
DEFAULT_PULSED_TAU_MAX_PS = 320_000
DEFAULT_LATERAL_PEAKS = 4


class HistogramMode(str, Enum):
    START_STOP = "start_stop"
    FULL = "full"


@dataclass(frozen=True, eq=False)
class CoincidenceHistogram:
    """Binned delay counts over [tau_min, tau_max) in ps.

    Bin ``i`` covers ``[tau_min + i*bin_width, tau_min + (i+1)*bin_width)``.
    The correlators lay two-sided ranges on bins centred at multiples of
    ``bin_width``, so ``tau_min`` may sit on a half-integer.
    """

    bin_width: int
    tau_min: float
    tau_max: float
    counts: np.ndarray
    n_starts: int
    mode: HistogramMode
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bin_width < 1:
            raise DomainError(f"bin_width must be >= 1 ps, got {self.bin_width}")
        if self.tau_max <= self.tau_min:
            raise DomainError("tau_max must exceed tau_min")
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (n_bins(self.tau_min, self.tau_max, self.bin_width),):
            raise DomainError("counts length does not match the histogram range")
        if np.any(counts < 0):
            raise DomainError("Histogram counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "mode", HistogramMode(self.mode))

    @property
    def bin_edges(self) -> np.ndarray:
        return self.tau_min + self.bin_width * np.arange(self.counts.shape[0] + 1)

    @property
    def bin_centers(self) -> np.ndarray:
        """Bin centers in ps."""
        return self.bin_edges[:-1] + self.bin_width / 2.0

    @property
    def whole_bins(self) -> np.ndarray:
        """Mask of the bins that lie entirely below ``tau_max``."""
        return self.bin_edges[1:] <= self.tau_max

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mirrored(self) -> "CoincidenceHistogram":
        """Histogram of negated delays (swaps the roles of the two channels)."""
        return CoincidenceHistogram(
            bin_width=self.bin_width,
            tau_min=-self.tau_max,
            tau_max=-self.tau_min,
            counts=self.counts[::-1].copy(),
            n_starts=self.n_starts,
            mode=self.mode,
            metadata=dict(self.metadata),
        )


def n_bins(tau_min: float, tau_max: float, bin_width: int) -> int:
    return int(math.ceil((tau_max - tau_min) / bin_width))


def centered_index(delays, bin_width: int):
    """Index j of the bin ``[(j - 1/2), (j + 1/2)) * bin_width`` holding each delay.

    Rounding mirrors for negative delays, so ``-d`` always lands in bin ``-j``.
    """
    delays = np.asarray(delays, dtype=np.int64)
    return np.sign(delays) * ((2 * np.abs(delays) + bin_width) // (2 * bin_width))


def _require_sorted(tags: TagSource, name: str) -> np.ndarray:
    raw = tags.times if isinstance(tags, PhotonStream) else tags
    times = np.asarray(raw, dtype=np.int64)
    if times.size > 1 and np.any(times[1:] < times[:-1]):
        raise ContractViolationError(f"{name} time tags are not sorted")
    return times


def beamsplit(
    stream: PhotonStream, reflectance: float, seed: int
) -> tuple[PhotonStream, PhotonStream]:
    """Route each tag to channel A (prob. ``reflectance``) or channel B."""
    if not 0.0 <= reflectance <= 1.0:
        raise DomainError(f"reflectance must lie in [0, 1], got {reflectance}")
    rng = np.random.default_rng([seed, 0x4842])
    to_a = rng.random(len(stream)) < reflectance
    return stream.select(to_a).with_channel(0), stream.select(~to_a).with_channel(1)


def _first_stop_delays(starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    nxt = np.searchsorted(stops, starts, side="right")
    valid = nxt < stops.shape[0]
    return stops[nxt[valid]] - starts[valid]


def _tag_rate(tags: TagSource, times: np.ndarray) -> Optional[float]:
    if isinstance(tags, PhotonStream) and tags.duration > 0:
        return times.shape[0] / tags.duration
    return None


def _count_centered(delays: np.ndarray, bin_width: int, j_min: int, size: int):
    index = centered_index(delays, bin_width) - j_min
    index = index[(index >= 0) & (index < size)]
    return np.bincount(index, minlength=size).astype(np.int64)


def start_stop_histogram(
    starts: TagSource,
    stops: TagSource,
    bin_width: int = DEFAULT_CW_BIN_PS,
    tau_max: int = DEFAULT_CW_TAU_MAX_PS,
    symmetric: bool = True,
) -> CoincidenceHistogram:
    """Delay from each start to the first later stop.

    One-sided histograms start at 0 with ``tau_max`` rounded up to a whole
    bin; a delay equal to the rounded ``tau_max`` falls in the last bin.
    With ``symmetric`` the stop-to-start delays are added on the negative
    axis and both sides share bins centred at multiples of ``bin_width``,
    running out to the bin that holds ``tau_max``.

    For tag streams the metadata key ``stop_rate_hz`` holds the stop-channel
    rates of the negative and the positive delay side; the first-stop
    histogram falls off as ``exp(-rate * |tau|)``.
    """
    if bin_width < 1:
        raise DomainError(f"bin_width must be >= 1 ps, got {bin_width}")
    if tau_max < 1:
        raise DomainError(f"tau_max must be >= 1 ps, got {tau_max}")
    a = _require_sorted(starts, "start")
    b = _require_sorted(stops, "stop")

    forward = _first_stop_delays(a, b)
    n_starts = a.shape[0]
    if symmetric:
        j_max = int(centered_index(tau_max, bin_width))
        size = 2 * j_max + 1
        counts = _count_centered(forward, bin_width, -j_max, size)
        counts += _count_centered(-_first_stop_delays(b, a), bin_width, -j_max, size)
        n_starts += b.shape[0]
        tau_lo, tau_hi = (-j_max - 0.5) * bin_width, (j_max + 0.5) * bin_width
    else:
        size = n_bins(0, tau_max, bin_width)
        tau_lo, tau_hi = 0, size * bin_width
        forward = forward[forward <= tau_hi]
        index = np.minimum(forward // bin_width, size - 1)
        counts = np.bincount(index, minlength=size).astype(np.int64)

    metadata = {}
    stop_rate = _tag_rate(stops, b)
    if stop_rate is not None:
        backward_rate = _tag_rate(starts, a) if symmetric else None
        metadata["stop_rate_hz"] = [backward_rate or stop_rate, stop_rate]
        if stop_rate * tau_max * 1e-12 > 0.05:
            logger.warning(
                f"Stop rate {stop_rate:.3g}/s over {tau_max} ps: first-stop "
                "histogram deviates from g2 by more than 5 %"
            )
    return CoincidenceHistogram(
        bin_width=bin_width,
        tau_min=tau_lo,
        tau_max=tau_hi,
        counts=counts,
        n_starts=n_starts,
        mode=HistogramMode.START_STOP,
        metadata=metadata,
    )


def _pair_counts(
    a: np.ndarray, b: np.ndarray, j_min: int, j_max: int, bin_width: int
) -> np.ndarray:
    """Pairs whose delay b - a falls in centred bins j_min..j_max, each once."""
    size = j_max - j_min + 1
    lo = ((2 * j_min - 1) * bin_width) // 2
    hi = -((-(2 * j_max + 1) * bin_width) // 2)
    first = np.searchsorted(b, a + lo, side="left")
    last = np.searchsorted(b, a + hi, side="right")
    counts = np.zeros(size, dtype=np.int64)
    active = np.flatnonzero(last > first)
    offset = 0
    while active.size:
        delays = b[first[active] + offset] - a[active]
        counts += _count_centered(delays, bin_width, j_min, size)
        offset += 1
        active = active[last[active] - first[active] > offset]
    return counts


def full_correlation_histogram(
    a: TagSource,
    b: TagSource,
    bin_width: int = DEFAULT_CW_BIN_PS,
    tau_range: tuple[int, int] = (-DEFAULT_CW_TAU_MAX_PS, DEFAULT_CW_TAU_MAX_PS),
    workers: int = 1,
) -> CoincidenceHistogram:
    """Histogram of every delay t_b - t_a inside ``tau_range``.

    Bins are centred at multiples of ``bin_width`` and the range grows to
    the whole bins holding its two ends, so swapping ``a`` and ``b`` gives
    the mirrored histogram exactly. The start stream may be partitioned
    over ``workers`` threads; partial histograms are summed, so the result
    does not depend on the split.
    """
    lo, hi = (int(v) for v in tau_range)
    if bin_width < 1:
        raise DomainError(f"bin_width must be >= 1 ps, got {bin_width}")
    if hi <= lo:
        raise DomainError(f"Empty delay range {tau_range}")
    ta = _require_sorted(a, "first")
    tb = _require_sorted(b, "second")
    j_min = int(centered_index(lo, bin_width))
    j_max = int(centered_index(hi, bin_width))
    if workers <= 1 or ta.shape[0] < 2 * workers:
        counts = _pair_counts(ta, tb, j_min, j_max, bin_width)
    else:
        parts = np.array_split(ta, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = pool.map(
                lambda part: _pair_counts(part, tb, j_min, j_max, bin_width), parts
            )
            counts = np.sum(list(partials), axis=0)
    logger.debug(f"Full correlation: {int(counts.sum())} pairs in {counts.size} bins")
    return CoincidenceHistogram(
        bin_width=bin_width,
        tau_min=(j_min - 0.5) * bin_width,
        tau_max=(j_max + 0.5) * bin_width,
        counts=counts,
        n_starts=int(ta.shape[0]),
        mode=HistogramMode.FULL,
    )


@dataclass(frozen=True)
class Peak:
    index: int
    area: int
    center: float


@dataclass(frozen=True)
class PeakTable:
    """Integrated coincidence peaks of a pulsed histogram."""

    peaks: tuple[Peak, ...]
    central_to_lateral_ratio: float
    window: int
    rep_period: int

    def __post_init__(self):
        if any(p.area < 0 for p in self.peaks):
            raise DomainError("Peak areas must be non-negative")
        if self.central_to_lateral_ratio < 0:
            raise DomainError("Peak area ratio must be non-negative")

    def area(self, index: int) -> int:
        for peak in self.peaks:
            if peak.index == index:
                return peak.area
        raise KeyError(index)

    @property
    def central(self) -> Optional[Peak]:
        return next((p for p in self.peaks if p.index == 0), None)

    def lateral(self, k: Optional[int] = None) -> list[Peak]:
        return [
            p for p in self.peaks if p.index != 0 and (k is None or abs(p.index) <= k)
        ]


def peak_areas(
    hist: CoincidenceHistogram,
    rep_period: int,
    window: int,
    k: int = DEFAULT_LATERAL_PEAKS,
) -> PeakTable:
    """Integrate the counts within +-window/2 of every multiple of the period.

    A bin belongs to a peak when its center falls inside the window. The
    ratio compares the zero-delay peak with the mean of the lateral peaks
    1 <= |index| <= k.
    """
    if rep_period <= 0:
        raise DomainError(f"rep_period must be positive, got {rep_period}")
    if window <= 0:
        raise DomainError(f"window must be positive, got {window}")
    if window >= rep_period:
        raise DomainError(
            f"window {window} ps overlaps adjacent peaks (period {rep_period} ps)"
        )
    centers = hist.bin_centers
    first = int(math.ceil((hist.tau_min + window / 2.0) / rep_period))
    last = int(math.floor((hist.tau_max - window / 2.0) / rep_period))
    peaks = []
    for index in range(first, last + 1):
        nominal = index * rep_period
        inside = np.abs(centers - nominal) <= window / 2.0
        peaks.append(Peak(index, int(hist.counts[inside].sum()), float(nominal)))

    lateral = [p.area for p in peaks if 1 <= abs(p.index) <= k]
    central = next((p.area for p in peaks if p.index == 0), None)
    if central is None or not lateral:
        raise InsufficientDataError(
            "Histogram range must contain the central peak and a lateral peak"
        )
    lateral_mean = float(np.mean(lateral))
    if lateral_mean == 0:
        raise InsufficientDataError("Lateral peaks contain no coincidences")
    return PeakTable(
        peaks=tuple(peaks),
        central_to_lateral_ratio=central / lateral_mean,
        window=window,
        rep_period=rep_period,
    )
