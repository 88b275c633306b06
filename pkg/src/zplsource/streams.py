"""Time-tagged photon streams and simulation settings."""

import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from .exceptions import DomainError

PS_PER_SECOND = 10**12
NO_LINE = -1


class Origin(IntEnum):
    """Physical source of a time tag."""

    ZPL = 0
    RED_SHIFTED = 1
    BACKGROUND = 2
    DARK = 3


@dataclass(frozen=True)
class SimConfig:
    """Seed, acquisition length (s) and tag quantization (ps per tick)."""

    seed: int
    duration: float
    time_resolution: int = 1
    max_tags: int = 100_000_000

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise DomainError(f"Seed must be an unsigned 64-bit int, got {self.seed}")
        if self.duration <= 0:
            raise DomainError(f"Duration must be positive, got {self.duration}")
        if self.time_resolution < 1:
            raise DomainError(
                f"time_resolution must be >= 1 ps, got {self.time_resolution}"
            )
        if self.max_tags <= 0:
            raise DomainError(f"max_tags must be positive, got {self.max_tags}")

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration * PS_PER_SECOND))

    def rng(self, purpose: str, *extra: int) -> np.random.Generator:
        """Independent generator for one named stage of a simulation.

        Stages draw from distinct streams so that, for instance, adding a
        background does not change the emission times for the same seed.
        """
        key = [self.seed, zlib.crc32(purpose.encode()), *extra]
        return np.random.default_rng(key)

    def quantize(self, times_ns: np.ndarray) -> np.ndarray:
        """Floor continuous times (ns) onto the integer-picosecond tick grid."""
        ticks = np.floor(np.asarray(times_ns) * 1e3 / self.time_resolution)
        return ticks.astype(np.int64) * self.time_resolution


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class PhotonStream:
    """Ordered integer-picosecond time tags with per-tag labels.

    Args:
        times: Tag times in ps, nondecreasing, in [0, duration_ps)
        origins: ``Origin`` value per tag
        lines: Index into the molecule's spectral lines, or -1
        channels: Detector channel per tag
        duration_ps: Acquisition length the tags were drawn over
    """

    times: np.ndarray
    origins: np.ndarray
    lines: np.ndarray
    channels: np.ndarray
    duration_ps: int
    resolution_ps: int = 1

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        n = times.shape[0]
        origins = np.asarray(self.origins, dtype=np.uint8)
        lines = np.asarray(self.lines, dtype=np.int16)
        channels = np.asarray(self.channels, dtype=np.uint8)
        if times.ndim != 1 or not (
            origins.shape == lines.shape == channels.shape == (n,)
        ):
            raise DomainError("Tag label arrays must match the time array length")
        if self.duration_ps <= 0:
            raise DomainError(f"duration_ps must be positive, got {self.duration_ps}")
        if n:
            if np.any(np.diff(times) < 0):
                raise DomainError("Tag times must be nondecreasing")
            if times[0] < 0 or times[-1] >= self.duration_ps:
                raise DomainError("Tag times must lie in [0, duration)")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "origins", _frozen(origins))
        object.__setattr__(self, "lines", _frozen(lines))
        object.__setattr__(self, "channels", _frozen(channels))

    @classmethod
    def empty(cls, duration_ps: int, resolution_ps: int = 1) -> "PhotonStream":
        return cls(
            times=np.empty(0, np.int64),
            origins=np.empty(0, np.uint8),
            lines=np.empty(0, np.int16),
            channels=np.empty(0, np.uint8),
            duration_ps=duration_ps,
            resolution_ps=resolution_ps,
        )

    @classmethod
    def from_unsorted(
        cls,
        times: np.ndarray,
        origins: np.ndarray,
        lines: np.ndarray,
        duration_ps: int,
        channels: Optional[np.ndarray] = None,
        resolution_ps: int = 1,
    ) -> "PhotonStream":
        """Build a stream, stably sorting tags by time."""
        times = np.asarray(times, dtype=np.int64)
        if channels is None:
            channels = np.zeros(times.shape[0], np.uint8)
        order = np.argsort(times, kind="stable")
        return cls(
            times=times[order],
            origins=np.asarray(origins)[order],
            lines=np.asarray(lines)[order],
            channels=np.asarray(channels)[order],
            duration_ps=duration_ps,
            resolution_ps=resolution_ps,
        )

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def duration(self) -> float:
        """Acquisition length in seconds."""
        return self.duration_ps / PS_PER_SECOND

    @property
    def rate(self) -> float:
        """Mean tag rate in counts/s."""
        return len(self) / self.duration

    def select(self, mask: np.ndarray) -> "PhotonStream":
        """Sub-stream of the tags where ``mask`` is true (order preserved)."""
        return PhotonStream(
            times=self.times[mask],
            origins=self.origins[mask],
            lines=self.lines[mask],
            channels=self.channels[mask],
            duration_ps=self.duration_ps,
            resolution_ps=self.resolution_ps,
        )

    def with_channel(self, channel: int) -> "PhotonStream":
        return PhotonStream(
            times=self.times,
            origins=self.origins,
            lines=self.lines,
            channels=np.full(len(self), channel, np.uint8),
            duration_ps=self.duration_ps,
            resolution_ps=self.resolution_ps,
        )

    def merge(self, other: "PhotonStream") -> "PhotonStream":
        """Time-ordered union; ties keep ``self`` tags first."""
        return PhotonStream.from_unsorted(
            times=np.concatenate([self.times, other.times]),
            origins=np.concatenate([self.origins, other.origins]),
            lines=np.concatenate([self.lines, other.lines]),
            channels=np.concatenate([self.channels, other.channels]),
            duration_ps=max(self.duration_ps, other.duration_ps),
            resolution_ps=min(self.resolution_ps, other.resolution_ps),
        )

    def count_by_origin(self) -> dict[Origin, int]:
        counts = np.bincount(self.origins, minlength=len(Origin))
        return {origin: int(counts[origin]) for origin in Origin}

    def same_as(self, other: "PhotonStream") -> bool:
        """Bit-identical comparison of every tag and label."""
        return (
            self.duration_ps == other.duration_ps
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.origins, other.origins)
            and np.array_equal(self.lines, other.lines)
            and np.array_equal(self.channels, other.channels)
        )
