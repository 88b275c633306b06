"""Run artifacts: histogram, point, fit, image and manifest files."""

import json
from collections.abc import Sequence
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .correlator import CoincidenceHistogram, HistogramMode
from .estimators import FitResult
from .exceptions import InsufficientDataError
from .logger import logger
from .sil_optics import ScanImage
from .streams import PhotonStream
from .timetags import write_tags

PGM_MAXVAL = 65535


def _dump_json(data: dict, path: Path) -> Path:
    text = json.dumps(data, indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


class ArtifactWriter:
    """Writes every numeric output of a run below one directory."""

    def __init__(self, output_dir: Union[str, Path]):
        """Initialize the writer.

        Args:
            output_dir: Directory for output files, created if missing
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def _path(self, name: str) -> Path:
        path = self.output_dir / name
        self.written.append(path)
        return path

    def write_columns(
        self, name: str, columns: Sequence[np.ndarray], header: str, fmt
    ) -> Path:
        """Plot-ready CSV with one named column per array."""
        path = self._path(f"{name}.csv")
        table = np.column_stack([np.asarray(c) for c in columns]) if columns else []
        np.savetxt(path, table, fmt=fmt, delimiter=",", header=header, comments="")
        return path

    def write_histogram(
        self, hist: CoincidenceHistogram, name: str = "histogram"
    ) -> tuple[Path, Path]:
        """Histogram CSV ``tau_ps,counts`` (bin centers) plus a JSON sidecar."""
        csv_path = self.write_columns(
            name, [hist.bin_centers, hist.counts], "tau_ps,counts", ["%.1f", "%d"]
        )
        sidecar = _dump_json(
            {
                "bin_width_ps": hist.bin_width,
                "tau_min_ps": hist.tau_min,
                "tau_max_ps": hist.tau_max,
                "n_starts": hist.n_starts,
                "mode": hist.mode.value,
                "metadata": hist.metadata,
            },
            self._path(f"{name}.json"),
        )
        return csv_path, sidecar

    def write_points(self, points: np.ndarray, name: str, header: str) -> Path:
        points = np.asarray(points, dtype=float)
        return self.write_columns(name, list(points.T), header, "%.10g")

    def write_fit(self, fit: FitResult, name: str = "fit") -> tuple[Path, Path]:
        text = self._path(f"{name}.txt")
        text.write_text(fit.to_text() + "\n")
        record = _dump_json(fit.to_record(), self._path(f"{name}.json"))
        return text, record

    def write_image(self, image: ScanImage, name: str = "scan") -> tuple[Path, Path]:
        """Image as a plain-text matrix and as a 16-bit binary PGM."""
        text = self._path(f"{name}.txt")
        np.savetxt(text, image.pixels, fmt="%d")
        pgm = self._path(f"{name}.pgm")
        rows, cols = image.shape
        data = np.clip(image.pixels, 0, PGM_MAXVAL).astype(">u2")
        with open(pgm, "wb") as f:
            f.write(f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii"))
            f.write(data.tobytes())
        return text, pgm

    def write_tags(self, stream: PhotonStream, name: str = "tags") -> Path:
        return write_tags(stream, self._path(f"{name}.zplt"))

    def write_record(self, data: dict, name: str) -> Path:
        return _dump_json(data, self._path(f"{name}.json"))

    def write_table(self, rows: list[dict], name: str) -> Path:
        """CSV of homogeneous records (e.g. comparison or budget rows)."""
        path = self._path(f"{name}.csv")
        fields = list(rows[0]) if rows else []
        lines = [",".join(fields)]
        lines += [",".join(str(row[f]) for f in fields) for row in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    def write_manifest(self, manifest: dict) -> Path:
        path = _dump_json(manifest, self.output_dir / "manifest.json")
        logger.info(f"Wrote {len(self.written)} artifacts to {self.output_dir}")
        return path


def read_histogram(path: Union[str, Path]) -> CoincidenceHistogram:
    """Load a histogram CSV; range and mode come from its sidecar if present."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "No such file", str(path))
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[0] < 2 or table.shape[1] != 2:
        raise InsufficientDataError(f"{path}: expected tau_ps,counts rows")
    centers, counts = table[:, 0], table[:, 1].astype(np.int64)
    sidecar = path.with_suffix(".json")
    meta: Optional[dict] = None
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    if meta is None:
        width = int(round(centers[1] - centers[0]))
        tau_min = float(centers[0]) - width / 2.0
        meta = {
            "bin_width_ps": width,
            "tau_min_ps": tau_min,
            "tau_max_ps": tau_min + width * counts.shape[0],
            "n_starts": 0,
            "mode": HistogramMode.FULL.value,
            "metadata": {},
        }
    return CoincidenceHistogram(
        bin_width=meta["bin_width_ps"],
        tau_min=meta["tau_min_ps"],
        tau_max=meta["tau_max_ps"],
        counts=counts,
        n_starts=meta["n_starts"],
        mode=meta["mode"],
        metadata={**meta.get("metadata", {}), "source": str(path)},
    )


def read_points(path: Union[str, Path]) -> np.ndarray:
    """(x, y, sigma) rows from a point CSV; a missing sigma column is Poisson."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "No such file", str(path))
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] == 2:
        sigma = np.sqrt(np.maximum(table[:, 1], 1.0))
        table = np.column_stack([table, sigma])
    if table.shape[1] != 3:
        raise InsufficientDataError(f"{path}: expected x,y[,sigma] columns")
    return table
