"""ZPLT time-tag files.

Layout (little endian): a 16-byte header ``magic "ZPLT" | version u16 |
resolution_ps u32 | channel_count u16 | reserved u32`` followed by 10-byte
records ``time_ps u64 | channel u8 | origin u8``. The reserved word stores
the acquisition duration in microseconds (0 when unknown).
"""

import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import TagFormatError
from .logger import logger
from .streams import NO_LINE, Origin, PhotonStream

MAGIC = b"ZPLT"
VERSION = 1
HEADER = struct.Struct("<4sHIHI")
RECORD = np.dtype([("time_ps", "<u8"), ("channel", "u1"), ("origin", "u1")])


def write_tags(stream: PhotonStream, path: Union[str, Path]) -> Path:
    """Write ``stream`` as a ZPLT file."""
    path = Path(path)
    channel_count = int(stream.channels.max()) + 1 if len(stream) else 1
    duration_us = min(stream.duration_ps // 10**6, 2**32 - 1)
    records = np.empty(len(stream), dtype=RECORD)
    records["time_ps"] = stream.times
    records["channel"] = stream.channels
    records["origin"] = stream.origins
    with open(path, "wb") as f:
        f.write(
            HEADER.pack(
                MAGIC, VERSION, stream.resolution_ps, channel_count, duration_us
            )
        )
        f.write(records.tobytes())
    logger.debug(f"Wrote {len(stream)} tags to {path}")
    return path


def read_header(path: Union[str, Path]) -> dict:
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise TagFormatError(f"{path}: file shorter than the ZPLT header")
    magic, version, resolution, channels, duration_us = HEADER.unpack(raw)
    if magic != MAGIC:
        raise TagFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TagFormatError(f"{path}: unsupported version {version}")
    return {
        "version": version,
        "resolution_ps": resolution,
        "channel_count": channels,
        "duration_ps": duration_us * 10**6,
    }


def read_tags(
    path: Union[str, Path], duration_ps: Optional[int] = None
) -> PhotonStream:
    """Read a ZPLT file back into a stream (line labels are not stored)."""
    header = read_header(path)
    payload = Path(path).read_bytes()[HEADER.size :]
    if len(payload) % RECORD.itemsize:
        raise TagFormatError(f"{path}: truncated record section")
    records = np.frombuffer(payload, dtype=RECORD)
    times = records["time_ps"].astype(np.int64)
    if np.any(records["origin"] > max(Origin)):
        raise TagFormatError(f"{path}: unknown origin code")
    if duration_ps is None:
        duration_ps = header["duration_ps"]
    if times.size and duration_ps <= times[-1]:
        duration_ps = int(times[-1]) + header["resolution_ps"]
    return PhotonStream(
        times=times,
        origins=records["origin"],
        lines=np.full(times.shape[0], NO_LINE, np.int16),
        channels=records["channel"],
        duration_ps=max(int(duration_ps), 1),
        resolution_ps=header["resolution_ps"],
    )


def export_csv(stream: PhotonStream, path: Union[str, Path]) -> Path:
    """Debug export with columns ``time_ps,channel,origin``."""
    path = Path(path)
    table = np.column_stack([stream.times, stream.channels, stream.origins])
    np.savetxt(
        path, table, fmt="%d", delimiter=",", header="time_ps,channel,origin",
        comments="",
    )
    return path


def split_channels(stream: PhotonStream) -> tuple[PhotonStream, PhotonStream]:
    """Channel-0 and channel-1 sub-streams of a two-detector recording."""
    return stream.select(stream.channels == 0), stream.select(stream.channels == 1)
