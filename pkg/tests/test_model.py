import math

import numpy as np
import pytest

from app.brw.errors import CalibrationError, DomainError
from app.brw.model import (
    Family,
    ModelSpec,
    Regime,
    biggins_derivative,
    biggins_transform,
    calibrate,
    mc_biggins_transform,
    model_hash,
    moment_diagnostics,
    sample_offspring,
)

LN2 = math.log(2.0)


def test_gaussian_boundary_calibration():
    model = calibrate(Family.GAUSSIAN_BINARY, {}, Regime.BOUNDARY)
    assert model.displacement_params["sigma2"] == pytest.approx(2 * LN2)
    assert model.mu == pytest.approx(2 * LN2)
    assert biggins_transform(model, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert biggins_derivative(model, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert biggins_transform(model, 0.0) == pytest.approx(LN2)
    assert model.kappa is None and model.gamma is None


def test_lattice_boundary_calibration():
    model = calibrate("lattice", {}, "boundary")
    assert model.a == pytest.approx(math.acosh(2.0))
    assert model.p == pytest.approx((2 + math.sqrt(3)) / 4)
    assert biggins_transform(model, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert biggins_derivative(model, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_subcritical_kappa_and_defaults():
    model = calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 1.0}, Regime.SUBCRITICAL)
    assert model.kappa == pytest.approx(2 * LN2)
    assert biggins_transform(model, model.kappa) == pytest.approx(0.0, abs=1e-10)
    assert biggins_derivative(model, 1.0) < 0
    assert model.gamma == pytest.approx((1 + model.kappa) / 2)
    assert model.rho == pytest.approx(model.gamma)


def test_lattice_subcritical_kappa_is_root():
    model = calibrate(Family.LATTICE_BINARY, {"a": 1.0}, Regime.SUBCRITICAL)
    assert 1.0 < model.kappa < math.inf
    assert biggins_transform(model, model.kappa) == pytest.approx(0.0, abs=1e-10)
    assert 1.0 < model.rho <= min(model.gamma, 2.0)


def test_lattice_subcritical_at_ln2_has_infinite_kappa():
    model = calibrate(Family.LATTICE_BINARY, {"a": LN2}, Regime.SUBCRITICAL)
    assert model.p == 1.0
    assert math.isinf(model.kappa)
    assert model.gamma == 2.0


def test_calibration_rejects_sigma2_above_boundary():
    with pytest.raises(CalibrationError, match="0 < sigma2 < 2 ln 2") as info:
        calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 2.0}, Regime.SUBCRITICAL)
    assert "phi_prime_1" in info.value.residuals


def test_calibration_rejects_boundary_sigma2_mismatch():
    with pytest.raises(CalibrationError, match="forces sigma2"):
        calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 1.0}, Regime.BOUNDARY)


def test_calibration_rejects_lattice_step_below_ln2():
    with pytest.raises(CalibrationError, match="ln 2 <= a"):
        calibrate(Family.LATTICE_BINARY, {"a": 0.5}, Regime.SUBCRITICAL)


def test_calibration_rejects_bad_gamma():
    with pytest.raises(CalibrationError, match="gamma"):
        calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 1.0}, Regime.SUBCRITICAL, gamma=3.0)


def test_model_spec_rejects_uncalibrated_parameters():
    with pytest.raises(ValueError, match="Phi\\(1\\)"):
        ModelSpec(
            family=Family.GAUSSIAN_BINARY,
            displacement_params={"mu": 1.0, "sigma2": 1.0},
            regime=Regime.BOUNDARY,
        )


def test_transform_rejects_infinite_theta():
    model = calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)
    with pytest.raises(DomainError):
        biggins_transform(model, math.inf)


def test_monte_carlo_transform_matches_closed_form():
    model = calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 1.0}, Regime.SUBCRITICAL)
    rng = np.random.default_rng(7)
    estimate, se = mc_biggins_transform(model, 0.5, 200_000, rng)
    assert abs(estimate - biggins_transform(model, 0.5)) <= 5 * se


def test_lattice_offspring_atoms():
    model = calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)
    sample = sample_offspring(model, np.random.default_rng(1))
    assert len(sample.displacements) == 2
    assert all(abs(abs(d) - model.a) < 1e-12 for d in sample.displacements)


def test_model_hash_is_stable():
    first = calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)
    second = calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)
    other = calibrate(Family.GAUSSIAN_BINARY, {}, Regime.BOUNDARY)
    assert model_hash(first) == model_hash(second)
    assert model_hash(first) != model_hash(other)


def test_moment_diagnostics_for_bounded_offspring():
    model = calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)
    report = moment_diagnostics(model, 0.01, 20_000, np.random.default_rng(3))
    assert report.status == "finite"
    assert all(e.converged for e in report.estimates)
    assert [e.name for e in report.estimates] == [
        "exp_delta_X", "X_exp_delta_X", "exp_delta_W1_gamma",
    ]
    assert all(e.estimate >= 1.0 for e in report.estimates if e.name != "X_exp_delta_X")


def test_moment_diagnostics_rejects_negative_delta():
    model = calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)
    with pytest.raises(ValueError, match="delta cannot be negative"):
        moment_diagnostics(model, -0.1, 100, np.random.default_rng(0))
