from unittest.mock import patch

import numpy as np
import pytest

from zplsource.correlator import CoincidenceHistogram, HistogramMode, peak_areas
from zplsource.estimators import (
    AntibunchingModel,
    FitResult,
    GaussianSpotModel,
    LateralPeakModel,
    LorentzianModel,
    SaturationModel,
    crop_brightest,
    fit_antibunching,
    fit_antibunching_curve,
    fit_brightest_spot,
    fit_gaussian_spot,
    fit_lateral_peak_decay,
    fit_lorentzian,
    fit_model,
    fit_saturation,
    poisson_sigma,
)
from zplsource.exceptions import (
    FitConvergenceError,
    InsufficientDataError,
    SpotNotFoundError,
    UnresolvableError,
)
from zplsource.optimizer import OptimizerResult
from zplsource.photophysics import analytic_g2_cw


def _points(x, y):
    return np.column_stack([x, y, poisson_sigma(y)])


def _saturation_points():
    power = np.array([0.5, 1.0, 2.0, 3.5, 7.0, 14.0, 28.0])
    return _points(power, 180e3 * power / (power + 3.5))


@pytest.mark.parametrize(
    "model, x, p",
    [
        (SaturationModel(), np.array([0.5, 2.0, 10.0]), [1e5, 3.5]),
        (AntibunchingModel(0.3), np.linspace(-20, 20, 9), [100.0, 0.7, 4.0]),
        (
            AntibunchingModel(0.3, stop_rates=(0.01, 0.02)),
            np.linspace(-20, 20, 9),
            [100.0, 0.7, 4.0],
        ),
        (LorentzianModel(), np.linspace(-50, 50, 7), [3.0, 30.0, 100.0, 10.0]),
        (
            LateralPeakModel(2),
            np.array([[-1, 0, 0], [0, 1, 0], [2, 3, 1], [-5, -4, 1]], float),
            [4.5, 10.0, 100.0, 200.0],
        ),
        (
            GaussianSpotModel(),
            np.column_stack(
                [np.repeat([50.0, 150.0, 250.0], 3), np.tile([50.0, 150.0, 250.0], 3)]
            ),
            [100.0, 120.0, 200.0, 50.0, 5.0],
        ),
    ],
)
def test_jacobian_matches_finite_differences(model, x, p):
    p = np.array(p)
    numeric = np.empty((x.shape[0], p.shape[0]))
    for j in range(p.shape[0]):
        step = 1e-6 * max(abs(p[j]), 1.0)
        up, down = p.copy(), p.copy()
        up[j] += step
        down[j] -= step
        numeric[:, j] = (model.evaluate(x, up) - model.evaluate(x, down)) / (2 * step)
    analytic = model.jacobian(x, p)
    np.testing.assert_allclose(
        analytic, numeric, rtol=1e-5, atol=1e-7 * np.abs(numeric).max()
    )


def test_fit_saturation_recovers_parameters():
    fit = fit_saturation(_saturation_points())
    assert fit["s_inf"] == pytest.approx(180e3, rel=1e-6)
    assert fit["p_sat"] == pytest.approx(3.5, rel=1e-6)
    assert fit.converged
    assert fit.reduced_chi2 < 1e-6


def test_fit_saturation_is_order_independent():
    points = _saturation_points()
    shuffled = points[np.random.default_rng(1).permutation(points.shape[0])]
    assert fit_saturation(shuffled).params == fit_saturation(points).params


def test_fit_saturation_needs_three_points():
    with pytest.raises(InsufficientDataError):
        fit_saturation(_saturation_points()[:2])


def test_fit_saturation_needs_points_below_saturation():
    power = np.array([50.0, 100.0, 200.0])
    with pytest.raises(InsufficientDataError):
        fit_saturation(_points(power, 180e3 * power / (power + 3.5)))


def test_fit_antibunching_curve_recovers_parameters():
    tau = np.arange(-50.0, 50.5, 0.5)
    counts = analytic_g2_cw(tau, dip=0.82, tau_f=4.5, s=0.24, c_inf=1000.0)
    fit = fit_antibunching_curve(tau, counts, s=0.24)
    assert fit["c_inf"] == pytest.approx(1000.0, rel=1e-6)
    assert fit["dip"] == pytest.approx(0.82, rel=1e-6)
    assert fit["tau_f"] == pytest.approx(4.5, rel=1e-6)


def test_fit_antibunching_reads_histogram_in_ns():
    width = 500
    centers = np.arange(-50_000, 50_000, width) + width / 2
    expected = analytic_g2_cw(centers / 1e3, 0.82, 4.5, 0.24, c_inf=5000.0)
    hist = CoincidenceHistogram(
        width, -50_000, 50_000, np.rint(expected), 0, "full"
    )
    fit = fit_antibunching(hist, 0.24)
    assert fit["tau_f"] == pytest.approx(4.5, rel=0.01)
    assert fit["dip"] == pytest.approx(0.82, abs=0.01)


def test_fit_antibunching_needs_a_wide_histogram():
    tau = np.arange(-5.0, 5.5, 0.5)
    counts = analytic_g2_cw(tau, dip=0.82, tau_f=4.5, s=0.24, c_inf=1000.0)
    with pytest.raises(InsufficientDataError):
        fit_antibunching_curve(tau, counts, s=0.24)


def test_fit_lorentzian_recovers_parameters():
    detuning = np.arange(-100.0, 101.0, 10.0)
    model = LorentzianModel()
    rate = model.evaluate(detuning, [0.5, 35.4, 1000.0, 20.0])
    fit = fit_lorentzian(_points(detuning, rate))
    assert fit["center"] == pytest.approx(0.5, abs=1e-6)
    assert fit["fwhm"] == pytest.approx(35.4, rel=1e-6)
    assert fit["amplitude"] == pytest.approx(1000.0, rel=1e-6)


def test_fit_lorentzian_errors():
    with pytest.raises(InsufficientDataError):
        fit_lorentzian(_points(np.arange(4.0), np.ones(4)))
    with pytest.raises(InsufficientDataError, match="no line"):
        fit_lorentzian(_points(np.arange(8.0), np.full(8, 7.0)))


def _pulsed_histogram(tau_ns=4.5, amplitude=1e5, offset=50.0):
    period, width, edge = 62_500, 1_000, 281_000
    edges = np.arange(-edge, edge + 1, width)
    start, stop = edges[:-1], edges[1:]
    nominal = np.rint(0.5 * (start + stop) / period) * period
    a = (start - nominal) / 1e3
    b = (stop - nominal) / 1e3

    def cdf(t):
        return np.sign(t) * tau_ns * -np.expm1(-np.abs(t) / tau_ns)

    scale = np.where(nominal == 0, 0.2 * amplitude, amplitude)
    counts = offset + scale * (cdf(b) - cdf(a)) / (b - a)
    return CoincidenceHistogram(width, -edge, edge, np.rint(counts), 0, "full")


def test_fit_lateral_peak_decay_recovers_lifetime():
    hist = _pulsed_histogram()
    table = peak_areas(hist, 62_500, 50_000)
    assert table.central_to_lateral_ratio == pytest.approx(0.2, abs=0.02)
    fit = fit_lateral_peak_decay(table, hist, 62_500)
    assert fit["tau_f"] == pytest.approx(4.5, rel=1e-3)
    assert fit["offset"] == pytest.approx(50.0, abs=1.0)


def test_fit_lateral_peak_decay_needs_two_peaks():
    hist = _pulsed_histogram()
    table = peak_areas(hist, 62_500, 50_000)
    with pytest.raises(InsufficientDataError):
        fit_lateral_peak_decay(table, hist, 62_500, min_counts=10**9)


def _spot_image(fwhm=260.0, size=21, pixel=50.0):
    rows, cols = np.indices((size, size))
    coords = (np.column_stack([cols.ravel(), rows.ravel()]) + 0.5) * pixel
    values = GaussianSpotModel().evaluate(coords, [512.0, 498.0, fwhm, 500.0, 5.0])
    return values.reshape(size, size)


def test_fit_gaussian_spot_recovers_parameters():
    fit = fit_gaussian_spot(_spot_image(), 50.0)
    assert fit["x0"] == pytest.approx(512.0, abs=1e-4)
    assert fit["y0"] == pytest.approx(498.0, abs=1e-4)
    assert fit["fwhm"] == pytest.approx(260.0, rel=1e-6)
    assert fit["offset"] == pytest.approx(5.0, rel=1e-6)


def test_fit_gaussian_spot_errors():
    with pytest.raises(InsufficientDataError):
        fit_gaussian_spot(np.ones((2, 2)), 50.0)
    with pytest.raises(SpotNotFoundError):
        fit_gaussian_spot(np.full((9, 9), 5.0), 50.0)
    single = np.full((9, 9), 5.0)
    single[4, 4] = 500.0
    with pytest.raises(UnresolvableError):
        fit_gaussian_spot(single, 50.0)


def _two_spot_image(pixel=50.0):
    rows, cols = np.indices((60, 60))
    coords = (np.column_stack([cols.ravel(), rows.ravel()]) + 0.5) * pixel
    model = GaussianSpotModel()
    bright = model.evaluate(coords, [2010.0, 990.0, 260.0, 1000.0, 10.0])
    dim = model.evaluate(coords, [700.0, 2200.0, 260.0, 400.0, 0.0])
    return (bright + dim).reshape(60, 60)


def test_fit_brightest_spot_reports_image_coordinates():
    fit = fit_brightest_spot(_two_spot_image(), 50.0, 260.0)
    assert fit["x0"] == pytest.approx(2010.0, abs=1e-3)
    assert fit["y0"] == pytest.approx(990.0, abs=1e-3)
    assert fit["fwhm"] == pytest.approx(260.0, rel=1e-5)


def test_crop_brightest_clips_at_image_edge():
    image = np.zeros((30, 30))
    image[1, 28] = 1.0
    crop, origin = crop_brightest(image, 100.0, 50.0)
    assert origin == (0, 24)
    assert crop.shape == (6, 6)


def test_fit_model_raises_when_not_converged():
    stalled = OptimizerResult(
        x=np.array([1.0, 2.0]),
        covariance=np.eye(2),
        cost=1.0,
        n_iterations=200,
        converged=False,
        gradient_norm=0.1,
        message="iteration limit reached",
    )
    with patch("zplsource.estimators.damped_least_squares", return_value=stalled):
        with pytest.raises(FitConvergenceError) as excinfo:
            fit_model(SaturationModel(), [1.0, 2.0, 3.0], [1, 2, 3], np.ones(3), [1, 1])

    assert excinfo.value.last_params == {"s_inf": 1.0, "p_sat": 2.0}
    assert excinfo.value.n_iterations == 200


def test_fit_result_text_and_record():
    fit = FitResult(
        params={"tau_f": 4.5},
        std_errors={"tau_f": 0.1},
        reduced_chi2=1.02,
        n_iterations=7,
        converged=True,
    )
    assert fit.to_text().splitlines() == [
        "tau_f = 4.5 ± 0.1",
        "reduced_chi2 = 1.02",
        "iterations = 7",
        "converged = true",
    ]
    assert fit.to_record()["params"] == {"tau_f": 4.5}


def test_fit_saturation_is_scale_equivariant():
    points = _saturation_points()
    base = fit_saturation(points)
    rates = fit_saturation(points * [1.0, 10.0, 10.0])
    powers = fit_saturation(points * [2.0, 1.0, 1.0])

    assert rates["s_inf"] == pytest.approx(10.0 * base["s_inf"], rel=1e-5)
    assert rates["p_sat"] == pytest.approx(base["p_sat"], rel=1e-5)
    assert powers["p_sat"] == pytest.approx(2.0 * base["p_sat"], rel=1e-5)
    assert powers["s_inf"] == pytest.approx(base["s_inf"], rel=1e-5)


def test_fit_saturation_errors_cover_truth():
    rng = np.random.default_rng(2010)
    power = np.geomspace(0.3, 30.0, 12)
    truth = 180e3 * power / (power + 3.5)
    sigma = 0.05 * truth
    covered = {"s_inf": 0, "p_sat": 0}
    for _ in range(100):
        rate = truth + sigma * rng.standard_normal(power.shape[0])
        fit = fit_saturation(np.column_stack([power, rate, sigma]))
        for name, value in (("s_inf", 180e3), ("p_sat", 3.5)):
            if abs(fit[name] - value) <= 2.0 * fit.std_errors[name]:
                covered[name] += 1

    assert covered["s_inf"] >= 90
    assert covered["p_sat"] >= 90


def _centred_histogram(counts_at, width=512, half_bins=98, **kwargs):
    centers = width * np.arange(-half_bins, half_bins + 1)
    return CoincidenceHistogram(
        width,
        (-half_bins - 0.5) * width,
        (half_bins + 0.5) * width,
        counts_at(centers),
        0,
        kwargs.pop("mode", HistogramMode.FULL),
        **kwargs,
    )


def test_fit_antibunching_on_poisson_counts():
    rng = np.random.default_rng(17)
    hist = _centred_histogram(
        lambda c: rng.poisson(analytic_g2_cw(c / 1e3, 0.82, 4.5, 0.24, 20_000.0))
    )
    fit = fit_antibunching(hist, 0.24)

    assert abs(fit["tau_f"] - 4.5) < 0.1
    assert fit["dip"] == pytest.approx(0.82, abs=0.02)
    assert 0.6 < fit.reduced_chi2 < 1.4
    model = AntibunchingModel(0.24)
    assert all(model.in_domain(p) for p in fit.trajectory)


def test_fit_antibunching_ignores_partial_last_bin():
    width = 512
    centers = -50_176 + width / 2 + width * np.arange(196)
    expected = np.rint(analytic_g2_cw(centers / 1e3, 0.82, 4.5, 0.24, 5000.0))
    partial = expected.copy()
    partial[-1] = np.rint(0.3 * partial[-1])
    hist = CoincidenceHistogram(width, -50_176, 50_000, partial, 0, "full")
    whole = CoincidenceHistogram(width, -50_176, 49_664, expected[:-1], 0, "full")

    assert not hist.whole_bins[-1]
    assert fit_antibunching(hist, 0.24).params == fit_antibunching(whole, 0.24).params


def test_fit_antibunching_corrects_first_stop_envelope():
    rates = [4e6, 6e6]

    def counts_at(centers):
        tau = centers / 1e3
        envelope = np.exp(-np.where(tau < 0, 4e-3, 6e-3) * np.abs(tau))
        return np.rint(analytic_g2_cw(tau, 0.82, 4.5, 0.24, 5000.0) * envelope)

    hist = _centred_histogram(
        counts_at, mode=HistogramMode.START_STOP, metadata={"stop_rate_hz": rates}
    )
    fit = fit_antibunching(hist, 0.24)
    assert fit["dip"] == pytest.approx(0.82, abs=0.01)
    assert fit["tau_f"] == pytest.approx(4.5, rel=0.01)


def test_fit_lateral_peak_decay_without_background():
    hist = _pulsed_histogram(offset=0.0)
    table = peak_areas(hist, 62_500, 50_000)
    fit = fit_lateral_peak_decay(table, hist, 62_500)
    assert fit.converged
    assert fit["offset"] == 0.0
    assert fit["tau_f"] == pytest.approx(4.5, rel=1e-3)


def test_fit_lateral_peak_decay_rejects_unresolved_lifetime():
    period, tau_ns = 62_000, 0.02
    centers = 1000 * np.arange(-320, 321)
    nominal = np.rint(centers / period) * period
    start = (centers - 500 - nominal) / 1e3
    stop = (centers + 500 - nominal) / 1e3

    def cdf(t):
        return np.sign(t) * tau_ns * -np.expm1(-np.abs(t) / tau_ns)

    counts = 50.0 + 1e5 * (cdf(stop) - cdf(start))
    hist = CoincidenceHistogram(1000, -320_500, 320_500, np.rint(counts), 0, "full")
    table = peak_areas(hist, period, 50_000)
    with pytest.raises(UnresolvableError):
        fit_lateral_peak_decay(table, hist, period)
