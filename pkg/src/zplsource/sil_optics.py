"""Weierstrass solid-immersion-lens objective and confocal imaging."""

import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import ConsistencyError, DomainError
from .logger import logger
from .streams import SimConfig

FIELD_OF_VIEW_UM = 35.0
DEFAULT_EXTENT_UM = 5.0
DEFAULT_PIXEL_NM = 50.0
AIRY_FACTOR = 0.61
REFERENCE_OBJECTIVE_NA = 0.95
# Exit rays closer than this cosine to the dome tangent use the closed form
GRAZING_COS = 1e-4


@dataclass(frozen=True)
class SilSystem:
    """SIL index, diameter (mm), collection lens NA and focal (mm), wavelength (nm)."""

    n_sil: float = 1.8
    diameter: float = 1.0
    lens_na: float = 0.55
    lens_focal: float = 4.5
    wavelength: float = 785.0

    def __post_init__(self):
        if self.n_sil <= 1:
            raise DomainError(f"n_sil must exceed 1, got {self.n_sil}")
        if not 0 < self.lens_na < 1:
            raise DomainError(f"lens_na must lie in (0, 1), got {self.lens_na}")
        if self.wavelength <= 0:
            raise DomainError(f"wavelength must be positive, got {self.wavelength}")
        if self.diameter <= 0 or self.lens_focal <= 0:
            raise DomainError("diameter and lens_focal must be positive")

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    @property
    def thickness(self) -> float:
        """Apex height above the flat face through the aplanatic point (mm)."""
        return self.radius * (1.0 + 1.0 / self.n_sil)

    @property
    def aplanatic_depth(self) -> float:
        """Distance of the aplanatic point below the sphere center (mm)."""
        return self.radius / self.n_sil


def weierstrass_output_na(n_sil: float) -> float:
    """NA of the beam leaving the SIL from a source at the aplanatic point."""
    if n_sil <= 1:
        raise DomainError(f"n_sil must exceed 1, got {n_sil}")
    return 1.0 / n_sil


def effective_na(sys: SilSystem) -> float:
    """Object-side NA: the n^2 aplanatic gain, capped by half-space capture."""
    return min(sys.n_sil**2 * sys.lens_na, sys.n_sil)


def diffraction_resolution(wavelength: float, n_sil: float) -> float:
    """0.61 * wavelength / n_sil, in the units of ``wavelength``."""
    if wavelength <= 0 or n_sil <= 0:
        raise DomainError("wavelength and n_sil must be positive")
    return AIRY_FACTOR * wavelength / n_sil


def hemispherical_resolution(wavelength: float, n_sil: float, lens_na: float) -> float:
    """Resolution of a hemispherical SIL, which gains only n in NA."""
    if wavelength <= 0 or n_sil <= 0 or not 0 < lens_na < 1:
        raise DomainError("wavelength, n_sil and lens_na must be physical")
    return AIRY_FACTOR * wavelength / (n_sil * lens_na)


def _intersect_sphere(radius: float, origin: np.ndarray, direction: np.ndarray):
    # Sphere centered at the origin; the source is inside, so take the + root
    b = float(origin @ direction)
    c = float(origin @ origin) - radius**2
    disc = b * b - c
    if disc < 0:
        return None
    t = -b + math.sqrt(disc)
    if t <= 0:
        return None
    return origin + t * direction


def _refract(incident: np.ndarray, normal: np.ndarray, n1: float, n2: float):
    cos_i = -float(normal @ incident)
    eta = n1 / n2
    k = 1.0 - eta**2 * (1.0 - cos_i**2)
    if k < -(GRAZING_COS**2):
        return None
    out = eta * incident + (eta * cos_i - math.sqrt(max(k, 0.0))) * normal
    return out / np.linalg.norm(out)


def trace_meridional_ray(sys: SilSystem, source_angle: float) -> float:
    """Exit angle (rad, from the axis) of a ray leaving the aplanatic point.

    The ray starts on the axis ``r / n_sil`` below the sphere center, at
    ``source_angle`` from the axis, and is refracted into air at the dome.

    Raises:
        ConsistencyError: If the ray misses the dome or is totally reflected
    """
    if abs(source_angle) > math.pi / 2:
        raise DomainError(f"|source_angle| must be <= pi/2, got {source_angle}")
    # (x, z) plane, z along the optical axis toward the dome
    origin = np.array([0.0, -sys.aplanatic_depth])
    direction = np.array([math.sin(source_angle), math.cos(source_angle)])
    hit = _intersect_sphere(sys.radius, origin, direction)
    if hit is None:
        raise ConsistencyError(f"Ray at {source_angle} rad misses the SIL dome")
    inward = -hit / np.linalg.norm(hit)
    exit_dir = _refract(direction, inward, sys.n_sil, 1.0)
    if exit_dir is None:
        raise ConsistencyError(
            f"Total internal reflection at {source_angle} rad from the aplanatic point"
        )
    if abs(float(exit_dir @ inward)) < GRAZING_COS:
        # Near the critical angle the refracted direction loses about half the
        # digits of the hit point; the aplanatic sine relation is exact there
        return math.asin(math.sin(source_angle) / sys.n_sil)
    return math.atan2(exit_dir[0], exit_dir[1])


@dataclass(frozen=True)
class EfficiencyBudget:
    """Ordered (stage, transmission) pairs of the detection path."""

    stages: tuple[tuple[str, float], ...]

    def __post_init__(self):
        stages = tuple((str(name), float(t)) for name, t in self.stages)
        for name, transmission in stages:
            if not 0.0 <= transmission <= 1.0:
                raise DomainError(
                    f"Stage '{name}' transmission must lie in [0, 1], "
                    f"got {transmission}"
                )
        object.__setattr__(self, "stages", stages)

    @property
    def overall(self) -> float:
        return math.prod(t for _, t in self.stages)

    @classmethod
    def default(cls) -> "EfficiencyBudget":
        return cls(
            (
                ("half-space collection", 0.5),
                ("optics and filters", 0.4),
                ("APD quantum efficiency", 0.6),
            )
        )

    @classmethod
    def for_system(
        cls, sys: SilSystem, optics: float = 0.4, detector: float = 0.6
    ) -> "EfficiencyBudget":
        """Budget whose collection stage follows from the SIL geometry."""
        return cls(
            (
                ("SIL collection", collection_fraction(effective_na(sys), sys.n_sil)),
                ("optics and filters", optics),
                ("APD quantum efficiency", detector),
            )
        )

    def to_rows(self) -> list[tuple[str, float]]:
        return [*self.stages, ("overall", self.overall)]


def detection_efficiency_budget(stages: EfficiencyBudget) -> float:
    return stages.overall


def collection_fraction(na: float, n_medium: float) -> float:
    """Share of an isotropic emitter's photons inside the cone of ``na``."""
    if na < 0 or n_medium <= 0 or na > n_medium:
        raise DomainError(f"NA {na} is not reachable in a medium of index {n_medium}")
    return (1.0 - math.cos(math.asin(na / n_medium))) / 2.0


def collection_enhancement(
    sys: SilSystem, reference_na: float = REFERENCE_OBJECTIVE_NA
) -> float:
    """SIL collection relative to a dry objective behind a planar interface."""
    reference = collection_fraction(reference_na, sys.n_sil)
    return collection_fraction(effective_na(sys), sys.n_sil) / reference


@dataclass(frozen=True, eq=False)
class ScanImage:
    """Confocal count image; ``pixels[row, col]`` with row along y."""

    pixels: np.ndarray
    pixel_size: float
    extent: tuple[float, float]

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise DomainError("Scan pixels must form a 2-D array")
        if np.any(pixels < 0):
            raise DomainError("Scan counts must be non-negative")
        if self.pixel_size <= 0:
            raise DomainError(f"pixel_size must be positive, got {self.pixel_size}")
        if max(self.extent) > FIELD_OF_VIEW_UM:
            raise DomainError(
                f"Scan extent {self.extent} um exceeds the "
                f"{FIELD_OF_VIEW_UM} um field of view"
            )
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _psf_row(
    y: float, xs: np.ndarray, emitters: np.ndarray, sigma: float, pixel: float
) -> np.ndarray:
    """Expected emitter counts along one pixel row (per second of dwell)."""
    dx = xs[:, None] - emitters[None, :, 0]
    dy = y - emitters[None, :, 1]
    # Gaussian sampled at pixel centers, normalized to unit sum over the plane
    weight = pixel**2 / (2.0 * math.pi * sigma**2)
    spot = weight * np.exp(-(dx * dx + dy * dy) / (2.0 * sigma**2))
    return spot @ emitters[:, 2]


def simulate_confocal_scan(
    emitters: Sequence[tuple[float, float, float]],
    sys: SilSystem,
    background: float,
    dwell: float,
    cfg: SimConfig,
    extent_um: float = DEFAULT_EXTENT_UM,
    pixel_size_nm: float = DEFAULT_PIXEL_NM,
    workers: int = 1,
) -> ScanImage:
    """Poisson image of point emitters seen through the SIL.

    Args:
        emitters: (x nm, y nm, brightness counts/s) per emitter
        background: Mean background counts per pixel
        dwell: Dwell time per pixel (ms)
        workers: Threads over pixel rows; each row has its own seed, so the
            image does not depend on scheduling
    """
    if extent_um <= 0 or extent_um > FIELD_OF_VIEW_UM:
        raise DomainError(
            f"Scan extent must lie in (0, {FIELD_OF_VIEW_UM}] um, got {extent_um}"
        )
    if pixel_size_nm <= 0:
        raise DomainError(f"pixel_size_nm must be positive, got {pixel_size_nm}")
    if background < 0 or dwell < 0:
        raise DomainError("background and dwell must be non-negative")
    table = np.asarray(emitters, dtype=float).reshape(-1, 3)
    if np.any(table[:, 2] < 0):
        raise DomainError("Emitter brightness must be non-negative")

    side = int(math.floor(extent_um * 1e3 / pixel_size_nm + 1e-9))
    if side < 1:
        raise DomainError("Scan extent is smaller than one pixel")
    span = side * pixel_size_nm
    outside = (table[:, :2] < 0).any(axis=1) | (table[:, :2] > span).any(axis=1)
    for x, y, _ in table[outside]:
        logger.warning(
            f"Emitter at ({x:.0f}, {y:.0f}) nm lies outside the {extent_um} um scan"
        )

    fwhm = diffraction_resolution(sys.wavelength, sys.n_sil)
    sigma = fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    centers = (np.arange(side) + 0.5) * pixel_size_nm
    dwell_s = dwell * 1e-3

    def render_row(row: int) -> np.ndarray:
        mean = np.full(side, float(background))
        if table.shape[0]:
            mean += dwell_s * _psf_row(
                centers[row], centers, table, sigma, pixel_size_nm
            )
        return cfg.rng("confocal", row).poisson(mean)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(render_row, range(side)))
    else:
        rows = [render_row(row) for row in range(side)]
    pixels = np.vstack(rows).astype(np.int64)
    logger.debug(
        f"Confocal scan {side}x{side} px, PSF FWHM {fwhm:.1f} nm, "
        f"{int(pixels.sum())} counts"
    )
    return ScanImage(pixels=pixels, pixel_size=pixel_size_nm, extent=(span / 1e3,) * 2)
