"""Weighted nonlinear least-squares fits of every measured curve.

Each model supplies its value, an analytic Jacobian, a parameter domain and
a deterministic data-driven starting point; ``fit_model`` drives the damped
least-squares engine and turns the outcome into a ``FitResult``.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid

from .correlator import CoincidenceHistogram, HistogramMode, PeakTable
from .exceptions import (
    FitConvergenceError,
    InsufficientDataError,
    SpotNotFoundError,
    UnresolvableError,
)
from .logger import logger
from .optimizer import damped_least_squares

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
FOUR_LN2 = 4.0 * math.log(2.0)


@dataclass
class FitResult:
    """Fitted parameters with 1-sigma errors and fit diagnostics."""

    params: dict
    std_errors: dict
    reduced_chi2: float
    n_iterations: int
    converged: bool
    gradient_norm: float = 0.0
    trajectory: list = field(default_factory=list, repr=False)
    costs: list = field(default_factory=list, repr=False)

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def to_record(self) -> dict:
        return {
            "params": {k: float(v) for k, v in self.params.items()},
            "std_errors": {k: float(v) for k, v in self.std_errors.items()},
            "reduced_chi2": float(self.reduced_chi2),
            "n_iterations": int(self.n_iterations),
            "converged": bool(self.converged),
        }

    def to_text(self) -> str:
        lines = [
            f"{name} = {value:.6g} ± {self.std_errors.get(name, 0.0):.3g}"
            for name, value in self.params.items()
        ]
        lines.append(f"reduced_chi2 = {self.reduced_chi2:.4g}")
        lines.append(f"iterations = {self.n_iterations}")
        lines.append(f"converged = {str(self.converged).lower()}")
        return "\n".join(lines)


class CurveModel:
    """Base class for a fittable model y = f(x; p).

    Subclasses define ``names`` and the bounds; ``lower``/``upper`` default
    to unbounded and ``strict`` marks lower bounds that are excluded.
    """

    names: tuple[str, ...] = ()

    def bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(self.names)
        return np.full(n, -np.inf), np.full(n, np.inf), np.zeros(n, dtype=bool)

    def evaluate(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_domain(self, p: np.ndarray) -> bool:
        lower, upper, strict = self.bounds()
        p = np.asarray(p, dtype=float)
        inside = np.all(p >= lower) and np.all(p <= upper)
        return bool(inside and np.all(p[strict] > lower[strict]))


class SaturationModel(CurveModel):
    """S(P) = s_inf * P / (P + p_sat)."""

    names = ("s_inf", "p_sat")

    def bounds(self):
        return np.zeros(2), np.full(2, np.inf), np.ones(2, dtype=bool)

    def evaluate(self, x, p):
        s_inf, p_sat = p
        return s_inf * x / (x + p_sat)

    def jacobian(self, x, p):
        s_inf, p_sat = p
        denom = x + p_sat
        return np.column_stack([x / denom, -s_inf * x / denom**2])


class AntibunchingModel(CurveModel):
    """C(tau) = c_inf * (1 - dip * exp(-|tau| (1 + s) / tau_f)), tau in ns.

    ``stop_rates`` (per ns, negative then positive delays) multiply the curve
    by the first-stop envelope ``exp(-rate * |tau|)`` of a start-stop
    histogram; they are known, not fitted.
    """

    names = ("c_inf", "dip", "tau_f")

    def __init__(self, s: float, stop_rates: tuple[float, float] = (0.0, 0.0)):
        self.s = s
        self.stop_rates = stop_rates

    def bounds(self):
        lower = np.array([-np.inf, 0.0, 0.0])
        upper = np.array([np.inf, 1.0, np.inf])
        return lower, upper, np.array([False, False, True])

    def envelope(self, x):
        rate = np.where(x < 0, self.stop_rates[0], self.stop_rates[1])
        return np.exp(-rate * np.abs(x))

    def evaluate(self, x, p):
        c_inf, dip, tau_f = p
        curve = 1.0 - dip * np.exp(-np.abs(x) * (1.0 + self.s) / tau_f)
        return c_inf * curve * self.envelope(x)

    def jacobian(self, x, p):
        c_inf, dip, tau_f = p
        rate = (1.0 + self.s) / tau_f
        decay = np.exp(-np.abs(x) * rate)
        jac = np.column_stack(
            [
                1.0 - dip * decay,
                -c_inf * decay,
                -c_inf * dip * decay * np.abs(x) * rate / tau_f,
            ]
        )
        return jac * self.envelope(x)[:, None]


class LorentzianModel(CurveModel):
    """offset + amplitude / (1 + (2 (x - center) / fwhm)^2)."""

    names = ("center", "fwhm", "amplitude", "offset")

    def bounds(self):
        lower = np.array([-np.inf, 0.0, -np.inf, -np.inf])
        return lower, np.full(4, np.inf), np.array([False, True, False, False])

    def evaluate(self, x, p):
        center, fwhm, amplitude, offset = p
        u = 2.0 * (x - center) / fwhm
        return offset + amplitude / (1.0 + u * u)

    def jacobian(self, x, p):
        center, fwhm, amplitude, offset = p
        u = 2.0 * (x - center) / fwhm
        shape = 1.0 / (1.0 + u * u)
        return np.column_stack(
            [
                amplitude * 4.0 * u * shape**2 / fwhm,
                amplitude * 2.0 * u * u * shape**2 / fwhm,
                shape,
                np.ones_like(x),
            ]
        )


def _laplace_cdf(t: np.ndarray, tau: float) -> np.ndarray:
    """Antiderivative of exp(-|t|/tau) that vanishes at t = 0."""
    return np.sign(t) * tau * -np.expm1(-np.abs(t) / tau)


def _laplace_cdf_dtau(t: np.ndarray, tau: float) -> np.ndarray:
    a = np.abs(t) / tau
    return np.sign(t) * (-np.expm1(-a) - a * np.exp(-a))


class LateralPeakModel(CurveModel):
    """Bin-averaged two-sided exponentials sharing one lifetime.

    ``x`` rows are (bin start, bin end, peak slot) with times in ns relative
    to the nominal peak center. Parameters: tau_f, offset, then one
    amplitude per peak.
    """

    def __init__(self, n_peaks: int):
        self.n_peaks = n_peaks
        self.names = ("tau_f", "offset") + tuple(
            f"amplitude_{i}" for i in range(n_peaks)
        )

    def bounds(self):
        n = len(self.names)
        strict = np.zeros(n, dtype=bool)
        strict[0] = True
        return np.zeros(n), np.full(n, np.inf), strict

    def _profile(self, x, tau):
        width = x[:, 1] - x[:, 0]
        return (_laplace_cdf(x[:, 1], tau) - _laplace_cdf(x[:, 0], tau)) / width

    def evaluate(self, x, p):
        tau, offset = p[0], p[1]
        slots = x[:, 2].astype(int)
        return offset + p[2:][slots] * self._profile(x, tau)

    def jacobian(self, x, p):
        tau = p[0]
        slots = x[:, 2].astype(int)
        width = x[:, 1] - x[:, 0]
        profile = self._profile(x, tau)
        jac = np.zeros((x.shape[0], len(self.names)))
        jac[:, 0] = p[2:][slots] * (
            _laplace_cdf_dtau(x[:, 1], tau) - _laplace_cdf_dtau(x[:, 0], tau)
        ) / width
        jac[:, 1] = 1.0
        jac[np.arange(x.shape[0]), 2 + slots] = profile
        return jac


class GaussianSpotModel(CurveModel):
    """offset + amplitude * exp(-4 ln2 r^2 / fwhm^2) on (x, y) in nm."""

    names = ("x0", "y0", "fwhm", "amplitude", "offset")

    def bounds(self):
        lower = np.array([-np.inf, -np.inf, 0.0, -np.inf, -np.inf])
        strict = np.array([False, False, True, False, False])
        return lower, np.full(5, np.inf), strict

    def evaluate(self, x, p):
        x0, y0, fwhm, amplitude, offset = p
        r2 = (x[:, 0] - x0) ** 2 + (x[:, 1] - y0) ** 2
        return offset + amplitude * np.exp(-FOUR_LN2 * r2 / fwhm**2)

    def jacobian(self, x, p):
        x0, y0, fwhm, amplitude, offset = p
        dx, dy = x[:, 0] - x0, x[:, 1] - y0
        spot = np.exp(-FOUR_LN2 * (dx * dx + dy * dy) / fwhm**2)
        scale = amplitude * spot * 2.0 * FOUR_LN2 / fwhm**2
        return np.column_stack(
            [
                scale * dx,
                scale * dy,
                scale * (dx * dx + dy * dy) / fwhm,
                spot,
                np.ones_like(dx),
            ]
        )


def poisson_sigma(counts: np.ndarray) -> np.ndarray:
    """Poisson errors with zero-count bins treated as variance 1."""
    return np.sqrt(np.maximum(np.asarray(counts, dtype=float), 1.0))


def fit_model(
    model: CurveModel,
    x: np.ndarray,
    y: np.ndarray,
    sigma: np.ndarray,
    p0: Sequence[float],
) -> FitResult:
    """Weighted least-squares fit of ``model`` starting at ``p0``.

    Raises:
        FitConvergenceError: If the optimizer stops without converging
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    lower, upper, strict = model.bounds()

    result = damped_least_squares(
        residuals=lambda p: (model.evaluate(x, p) - y) / sigma,
        jacobian=lambda p: model.jacobian(x, p) / sigma[:, None],
        x0=np.asarray(p0, dtype=float),
        lower=lower,
        upper=upper,
        strict_lower=strict,
        in_domain=model.in_domain,
    )
    params = dict(zip(model.names, (float(v) for v in result.x)))
    if not result.converged:
        raise FitConvergenceError(
            f"{type(model).__name__} fit did not converge: {result.message}",
            last_params=params,
            n_iterations=result.n_iterations,
        )

    dof = max(y.shape[0] - len(model.names), 1)
    reduced_chi2 = 2.0 * result.cost / dof
    errors = np.sqrt(np.clip(np.diag(result.covariance), 0.0, None))
    if reduced_chi2 > 10:
        logger.warning(
            f"{type(model).__name__} fit converged with reduced chi2 "
            f"{reduced_chi2:.3g}"
        )
    logger.debug(f"{type(model).__name__} fit: {params} ({result.message})")
    return FitResult(
        params=params,
        std_errors=dict(zip(model.names, (float(e) for e in errors))),
        reduced_chi2=reduced_chi2,
        n_iterations=result.n_iterations,
        converged=True,
        gradient_norm=result.gradient_norm,
        trajectory=result.trajectory,
        costs=result.costs,
    )


def _point_table(points, n_min: int, what: str) -> np.ndarray:
    table = np.asarray(points, dtype=float)
    if table.ndim != 2 or table.shape[1] != 3:
        raise InsufficientDataError(f"{what} points must be (x, y, sigma) triples")
    if table.shape[0] < n_min:
        raise InsufficientDataError(
            f"{what} fit needs at least {n_min} points, got {table.shape[0]}"
        )
    if np.any(table[:, 2] <= 0):
        raise InsufficientDataError(f"{what} point uncertainties must be positive")
    # Sorting makes the fit exactly independent of the input order
    return table[np.lexsort((table[:, 2], table[:, 1], table[:, 0]))]


def fit_saturation(points) -> FitResult:
    """Fit the saturation law to (power mW, rate counts/s, sigma) points."""
    table = _point_table(points, 3, "Saturation")
    power, rate, sigma = table.T
    s_inf0 = 1.2 * rate.max()
    # Power at half the largest measured rate on the monotone envelope
    p_sat0 = float(np.interp(0.5 * rate.max(), np.maximum.accumulate(rate), power))
    if not power.min() < p_sat0 < power.max():
        raise InsufficientDataError(
            "Saturation data must span powers below and above saturation"
        )
    return fit_model(SaturationModel(), power, rate, sigma, [s_inf0, p_sat0])


def fit_antibunching_curve(
    tau_ns: np.ndarray,
    counts: np.ndarray,
    s: float,
    sigma: Optional[np.ndarray] = None,
    bin_width_ns: Optional[float] = None,
    stop_rates: tuple[float, float] = (0.0, 0.0),
) -> FitResult:
    """Fit the cw antibunching curve to coincidence counts versus delay (ns).

    ``stop_rates`` (per ns) describe the first-stop envelope of a start-stop
    histogram, see ``AntibunchingModel``.
    """
    tau_ns = np.asarray(tau_ns, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if sigma is None:
        sigma = poisson_sigma(counts)
    order = np.lexsort((counts, tau_ns))
    tau_ns, counts, sigma = tau_ns[order], counts[order], np.asarray(sigma)[order]
    if tau_ns.shape[0] < 4:
        raise InsufficientDataError("Antibunching fit needs at least 4 bins")
    model = AntibunchingModel(s, stop_rates)
    flat = counts / model.envelope(tau_ns)

    distance = np.abs(tau_ns)
    tail = flat[distance >= 0.75 * distance.max()]
    c_inf0 = float(tail.mean())
    if c_inf0 <= 0:
        raise InsufficientDataError("Histogram has no coincidences in its tails")
    nearest = np.argsort(distance, kind="stable")
    dip0 = float(np.clip(1.0 - flat[nearest[:3]].min() / c_inf0, 0.0, 1.0))
    target = c_inf0 * (1.0 - dip0 / math.e)
    crossed = nearest[flat[nearest] >= target]
    step = bin_width_ns or float(np.min(np.diff(np.unique(tau_ns))))
    rise0 = max(float(distance[crossed[0]]) if crossed.size else step, step)
    tau_f0 = rise0 * (1.0 + s)

    if tau_ns.min() > -5.0 * rise0 or tau_ns.max() < 5.0 * rise0:
        raise InsufficientDataError(
            f"Histogram must span +-{5.0 * rise0:.3g} ns around zero delay"
        )
    return fit_model(model, tau_ns, counts, sigma, [c_inf0, dip0, tau_f0])


def fit_antibunching(hist: CoincidenceHistogram, s: float) -> FitResult:
    """Poisson-weighted cw antibunching fit; delays are reported in ns.

    A partial bin at the end of the range is left out of the fit. Start-stop
    histograms carrying ``stop_rate_hz`` are fitted with their first-stop
    envelope.
    """
    whole = hist.whole_bins
    rates = hist.metadata.get("stop_rate_hz")
    if hist.mode is HistogramMode.START_STOP and rates:
        stop_rates = (rates[0] * 1e-9, rates[1] * 1e-9)
    else:
        stop_rates = (0.0, 0.0)
    return fit_antibunching_curve(
        hist.bin_centers[whole] / 1e3,
        hist.counts[whole],
        s,
        bin_width_ns=hist.bin_width / 1e3,
        stop_rates=stop_rates,
    )


def fit_lorentzian(points) -> FitResult:
    """Fit a Lorentzian line to (detuning MHz, rate, sigma) points."""
    table = _point_table(points, 5, "Lorentzian")
    x, y, sigma = table.T
    offset0 = float(y.min())
    excess = y - offset0
    amplitude0 = float(excess.max())
    if amplitude0 <= 0:
        raise InsufficientDataError("Excitation scan shows no line")
    center0 = float(np.sum(x * excess) / np.sum(excess))
    # Area of a Lorentzian is pi/2 * amplitude * fwhm
    fwhm0 = 2.0 * float(trapezoid(excess, x)) / (math.pi * amplitude0)
    if fwhm0 <= 0 or np.ptp(x) < 2.0 * fwhm0:
        raise InsufficientDataError("Scan must span at least twice the line FWHM")
    return fit_model(
        LorentzianModel(), x, y, sigma, [center0, fwhm0, amplitude0, offset0]
    )


def fit_lateral_peak_decay(
    table: PeakTable,
    hist: CoincidenceHistogram,
    rep_period: int,
    min_counts: int = 100,
) -> FitResult:
    """Pooled lifetime from the exponential flanks of the lateral peaks."""
    lateral = [p for p in table.lateral() if p.area >= min_counts]
    if len(lateral) < 2:
        raise InsufficientDataError(
            f"Need two lateral peaks with >= {min_counts} counts, got {len(lateral)}"
        )
    edges = hist.bin_edges
    centers = hist.bin_centers
    rows, values = [], []
    for slot, peak in enumerate(lateral):
        nominal = peak.index * rep_period
        inside = (np.abs(centers - nominal) <= table.window / 2.0) & hist.whole_bins
        start = (edges[:-1][inside] - nominal) / 1e3
        stop = (edges[1:][inside] - nominal) / 1e3
        rows.append(np.column_stack([start, stop, np.full(start.shape[0], slot)]))
        values.append(hist.counts[inside])
    x = np.concatenate(rows)
    y = np.concatenate(values).astype(float)

    bin_ns = hist.bin_width / 1e3
    offset0 = float(np.percentile(y, 5))
    excess = np.clip(y - offset0, 0.0, None)
    mid = 0.5 * (x[:, 0] + x[:, 1])
    tau0 = float(np.sum(np.abs(mid) * excess) / max(excess.sum(), 1e-300))
    if tau0 < bin_ns / 4.0:
        raise UnresolvableError(
            f"Peak width ({tau0:.3g} ns) is not resolved by {bin_ns:.3g} ns bins"
        )
    amplitudes0 = [
        max(float(values[slot].max()) - offset0, 1.0) for slot in range(len(lateral))
    ]
    model = LateralPeakModel(len(lateral))
    fit = fit_model(
        model, x, y, poisson_sigma(y), [tau0, max(offset0, 0.0), *amplitudes0]
    )
    if fit["tau_f"] < bin_ns / 4.0:
        raise UnresolvableError(
            f"Fitted lifetime {fit['tau_f']:.3g} ns is below the bin resolution"
        )
    return fit


def fit_gaussian_spot(image: np.ndarray, pixel_size: float) -> FitResult:
    """Symmetric 2-D Gaussian plus constant fitted to a count image.

    Coordinates are pixel centers in nm, ``(x, y) = ((col + 0.5), (row + 0.5))
    * pixel_size``.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or min(image.shape) < 3:
        raise InsufficientDataError("Spot fit needs a 2-D image of at least 3x3")
    background = float(np.median(image))
    noise = math.sqrt(max(background, 1.0))
    threshold = background + 3.0 * noise
    maxima = (image == ndimage.maximum_filter(image, size=3)) & (image > threshold)
    if not maxima.any():
        raise SpotNotFoundError("No local maximum above background + 3 sigma")
    peak = float(image.max())

    rows, cols = np.indices(image.shape)
    xs = (cols.ravel() + 0.5) * pixel_size
    ys = (rows.ravel() + 0.5) * pixel_size
    # Centroid and second moments of the region above half maximum
    bright = (image - background >= 0.5 * (peak - background)).ravel()
    if bright.sum() < 2:
        raise UnresolvableError("Spot is narrower than one pixel")
    weights = (image.ravel() - background)[bright]
    x0 = float(np.sum(xs[bright] * weights) / weights.sum())
    y0 = float(np.sum(ys[bright] * weights) / weights.sum())
    r2 = (xs[bright] - x0) ** 2 + (ys[bright] - y0) ** 2
    # Uniform disk of radius R has <r^2> = R^2 / 2 and R = FWHM / 2
    fwhm0 = 2.0 * math.sqrt(2.0 * float(r2.mean()))
    if fwhm0 < pixel_size:
        raise UnresolvableError("Spot is narrower than one pixel")

    coords = np.column_stack([xs, ys])
    counts = image.ravel()
    fit = fit_model(
        GaussianSpotModel(),
        coords,
        counts,
        poisson_sigma(counts),
        [x0, y0, fwhm0, peak - background, background],
    )
    if fit["fwhm"] < pixel_size:
        raise UnresolvableError(
            f"Fitted FWHM {fit['fwhm']:.3g} nm is below the pixel size"
        )
    return fit


def crop_brightest(pixels: np.ndarray, fwhm: float, pixel_size: float):
    """Window of about two FWHM around the brightest pixel, and its origin."""
    half = max(int(math.ceil(2.0 * fwhm / pixel_size)), 2)
    row, col = np.unravel_index(int(np.argmax(pixels)), pixels.shape)
    row0, col0 = max(row - half, 0), max(col - half, 0)
    return pixels[row0 : row + half + 1, col0 : col + half + 1], (row0, col0)


def fit_brightest_spot(
    image: np.ndarray, pixel_size: float, fwhm_hint: float
) -> FitResult:
    """Spot fit restricted to the window around the brightest pixel.

    ``x0`` and ``y0`` are returned in the coordinates of the whole image, so
    other emitters in the field do not pull the fit.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InsufficientDataError("Spot fit needs a 2-D image")
    crop, (row0, col0) = crop_brightest(image, fwhm_hint, pixel_size)
    fit = fit_gaussian_spot(crop, pixel_size)
    fit.params["x0"] += col0 * pixel_size
    fit.params["y0"] += row0 * pixel_size
    return fit
