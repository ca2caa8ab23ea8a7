import math

import numpy as np
import pytest

from app.brw.analysis import (
    ScanKind,
    TailKind,
    binomial_ci,
    chernoff_tail_bound,
    conjecture_ratio,
    extrapolation_residuals,
    fit_tail,
    log_survival_fit,
    naive_tail_estimate,
    scan_x_dependence,
    survival_points,
    tail_bound_constants,
    top_decades_range,
)
from app.brw.errors import DomainError, TailFitError
from app.brw.mgf import BoundCertificate, mgf_recursion
from app.brw.model import Family, Regime, calibrate


@pytest.fixture(scope="module")
def exponential_samples():
    return np.random.default_rng(13).exponential(0.5, 200_000)


@pytest.fixture(scope="module")
def pareto_samples():
    return np.random.default_rng(17).pareto(1.5, 200_000) + 1.0


def test_binomial_ci_contains_the_proportion():
    lo, hi = binomial_ci(30, 100)
    assert lo < 0.3 < hi
    assert binomial_ci(0, 0) == (0.0, 1.0)
    zero_lo, zero_hi = binomial_ci(0, 50)
    assert zero_lo == pytest.approx(0.0, abs=1e-12) and zero_hi > 0
    with pytest.raises(ValueError, match="hits must lie"):
        binomial_ci(5, 3)


def test_naive_tail_estimate():
    frame = naive_tail_estimate([1.0, 2.0, 3.0, 4.0], [0.5, 2.0, 10.0])
    assert frame["hits"].tolist() == [4, 2, 0]
    assert frame["estimate"].tolist() == [1.0, 0.5, 0.0]
    assert (frame["ci_low"] <= frame["estimate"]).all()


def test_exponential_tail_fit(exponential_samples):
    fit = fit_tail(exponential_samples, "exponential", bootstrap=30)
    assert fit.kind is TailKind.EXPONENTIAL
    assert fit.rate_or_index == pytest.approx(2.0, rel=0.1)
    assert fit.r_squared > 0.95
    assert fit.model_comparison > 0
    lo, hi = fit.bootstrap_ci
    assert lo <= fit.rate_or_index <= hi


def test_power_tail_fit(pareto_samples):
    fit = fit_tail(pareto_samples, TailKind.POWER, bootstrap=30)
    assert fit.rate_or_index == pytest.approx(1.5, rel=0.1)
    assert fit.loglog_index == pytest.approx(1.5, rel=0.2)
    assert fit.model_comparison < 0
    assert fit.points >= 100


def test_fit_survival_uses_fitted_constants(exponential_samples):
    fit = fit_tail(exponential_samples, "exponential", bootstrap=0)
    assert fit.bootstrap_ci is None
    assert fit.survival(1.0) == pytest.approx(fit.prefactor * math.exp(-fit.rate_or_index))


def test_fit_tail_rejects_small_samples():
    with pytest.raises(TailFitError, match="Need at least"):
        fit_tail(np.ones(50), "exponential")


def test_fit_tail_rejects_bad_quantile_range(exponential_samples):
    with pytest.raises(ValueError, match="quantile_range"):
        fit_tail(exponential_samples, "exponential", quantile_range=(0.99, 0.9))


def test_top_decades_range():
    lo, hi = top_decades_range(np.arange(100_000, dtype=float))
    assert lo == pytest.approx(0.9)
    assert hi == pytest.approx(0.999)
    with pytest.raises(TailFitError, match="cannot resolve"):
        top_decades_range(np.arange(1000, dtype=float))


def test_additive_scan_detects_fast_decay():
    xs = np.arange(6, dtype=float)
    p = 0.3 * np.exp(-1.5 * xs)
    result = scan_x_dependence(xs, p, 0.01 * p, ScanKind.ADDITIVE, y0=1.0)
    assert result.slope == pytest.approx(-1.5, abs=1e-6)
    assert result.bound_check
    assert not result.inconclusive


def test_derivative_scan_normalizes_by_renewal():
    xs = np.arange(6, dtype=float)
    renewal = xs + 1.0
    wiggle = 1.0 + 0.01 * (-1.0) ** np.arange(6)
    p = 0.2 * renewal * np.exp(-xs) * wiggle
    result = scan_x_dependence(xs, p, 0.02 * p, "derivative", renewal_values=renewal)
    assert abs(result.slope) < 0.05
    assert result.bound_check


def test_scan_validates_inputs():
    with pytest.raises(ValueError, match="four or more"):
        scan_x_dependence([0, 1, 2], [0.1, 0.1, 0.1], [0.01] * 3)
    with pytest.raises(DomainError, match="positive"):
        scan_x_dependence([0, 1, 2, 3], [0.1, 0.0, 0.1, 0.1], [0.01] * 4)
    with pytest.raises(ValueError, match="R\\(x\\)"):
        scan_x_dependence([0, 1, 2, 3], [0.1] * 4, [0.01] * 4, ScanKind.DERIVATIVE)


def test_conjecture_ratio():
    ratio, se = conjecture_ratio(0.1 * math.exp(-2.0), 0.001, 0.1, 0.001, 2.0, 1.0)
    assert ratio == pytest.approx(1.0)
    assert se > 0
    with pytest.raises(DomainError):
        conjecture_ratio(0.1, 0.01, 0.0, 0.0, 1.0, 1.0)


def test_tail_bound_constants():
    model = calibrate(Family.LATTICE_BINARY, {"a": 1.0}, Regime.SUBCRITICAL)
    cert = BoundCertificate(K=2.0, theta_bar=0.1, rho=1.5, holds=True, generations=10)
    bound = tail_bound_constants(cert, model)
    assert bound.C == pytest.approx(math.exp(0.1 + 2.0 * 0.1 ** 1.5))
    assert bound.c == pytest.approx(0.1 * (model.kappa - model.gamma) / (2 * model.kappa))
    assert bound.exponential(0.0, 0.0) == 1.0
    assert bound.chernoff(1.0, 100.0) < 1e-3
    with pytest.raises(DomainError, match="holds"):
        tail_bound_constants(cert.model_copy(update={"holds": False}), model)


def test_chernoff_tail_bound_decreases_in_y():
    model = calibrate(Family.LATTICE_BINARY, {"a": 1.0}, Regime.SUBCRITICAL)
    table = mgf_recursion(model, n_max=10)
    near, _ = chernoff_tail_bound(table, 1.0, 1.0)
    far, theta = chernoff_tail_bound(table, 1.0, 10.0)
    assert far <= near <= 1.0
    assert theta > 0


def test_extrapolation_residuals(exponential_samples):
    fit = fit_tail(exponential_samples, "exponential", bootstrap=0)
    ys = [5.0, 6.0]
    exact = [float(fit.survival(y)) for y in ys]
    residuals = extrapolation_residuals(fit, ys, exact, [e * 0.1 for e in exact])
    assert residuals == pytest.approx([0.0, 0.0], abs=1e-9)
    assert extrapolation_residuals(fit, [5.0], [0.0], [0.1]) == [math.inf]


def test_log_survival_fit_slopes():
    rng = np.random.default_rng(21)
    slope, r2, points = log_survival_fit(rng.exponential(1.0, 50_000))
    assert slope == pytest.approx(-1.0, rel=0.1)
    assert r2 > 0.95
    counts = rng.geometric(0.3, 50_000) - 1
    slope, _, points = log_survival_fit(counts, discrete=True)
    assert slope == pytest.approx(math.log(0.7), rel=0.1)
    assert points >= 3


def test_survival_points_are_plot_ready():
    frame = survival_points(np.arange(1000, dtype=float), levels=10)
    assert list(frame.columns) == ["y", "survival"]
    assert frame["survival"].max() == pytest.approx(1.0)
    assert survival_points([]).empty
