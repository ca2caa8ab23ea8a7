import hashlib
import math
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import logsumexp

from app.brw.errors import CalibrationError, DomainError

LN2 = math.log(2.0)
CALIBRATION_TOL = 1e-12
KAPPA_TOL = 1e-10


class Family(str, Enum):
    GAUSSIAN_BINARY = "gaussian"
    LATTICE_BINARY = "lattice"


class Regime(str, Enum):
    SUBCRITICAL = "subcritical"
    BOUNDARY = "boundary"


class ModelSpec(BaseModel):
    """A calibrated offspring law: two children with iid displacements.

    ``displacement_params`` holds ``mu``/``sigma2`` for the Gaussian family and
    ``a``/``p`` (step magnitude, probability of ``+a``) for the lattice family.
    ``kappa``, ``gamma`` and ``rho`` are only defined for subcritical models.
    """

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    family: Family
    offspring_count: int = 2
    displacement_params: Dict[str, float]
    regime: Regime
    kappa: float | None = None
    gamma: float | None = None
    rho: float | None = None

    @model_validator(mode="after")
    def _check_standing_assumptions(self) -> "ModelSpec":
        if self.offspring_count != 2:
            raise ValueError("Built-in families have exactly two children")
        required = {"mu", "sigma2"} if self.family is Family.GAUSSIAN_BINARY else {"a", "p"}
        missing = required - set(self.displacement_params)
        if missing:
            raise ValueError(f"Missing displacement parameters: {sorted(missing)}")

        phi_one = biggins_transform(self, 1.0)
        if abs(phi_one) > CALIBRATION_TOL:
            raise ValueError(f"Phi(1) = {phi_one:.3e} violates the calibration constraint")
        slope = biggins_derivative(self, 1.0)
        if self.regime is Regime.BOUNDARY:
            if abs(slope) > CALIBRATION_TOL:
                raise ValueError(f"Boundary model needs Phi'(1) = 0, got {slope:.3e}")
            return self

        if slope >= 0:
            raise ValueError(f"Subcritical model needs Phi'(1) < 0, got {slope:.3e}")
        if self.kappa is None or self.gamma is None or self.rho is None:
            raise ValueError("Subcritical model needs kappa, gamma and rho")
        if math.isfinite(self.kappa) and abs(biggins_transform(self, self.kappa)) > KAPPA_TOL:
            raise ValueError("kappa is not a root of Phi")
        if not 1.0 < self.gamma < self.kappa:
            raise ValueError("gamma must lie in (1, kappa)")
        if not 1.0 < self.rho <= min(self.gamma, 2.0):
            raise ValueError("rho must lie in (1, min(gamma, 2)]")
        return self

    @property
    def mu(self) -> float:
        return self.displacement_params["mu"]

    @property
    def sigma(self) -> float:
        return math.sqrt(self.displacement_params["sigma2"])

    @property
    def a(self) -> float:
        return self.displacement_params["a"]

    @property
    def p(self) -> float:
        return self.displacement_params["p"]

    @property
    def is_lattice(self) -> bool:
        return self.family is Family.LATTICE_BINARY


class OffspringSample(BaseModel):
    """Atoms of one draw of the offspring point process, relative to the parent."""

    displacements: List[float]


def model_hash(model: ModelSpec) -> str:
    """Content hash used to key renewal tables and manifests."""
    return hashlib.sha256(model.model_dump_json().encode("utf-8")).hexdigest()[:16]


def biggins_transform(model: ModelSpec, theta: float) -> float:
    """Evaluate Phi(theta) = ln E[sum over children of exp(-theta V)] in closed form.

    Args:
        model: Calibrated (or being-calibrated) model.
        theta: Real argument. Both built-in families are finite on all of R.

    Returns:
        Phi(theta); ``inf`` on floating overflow.

    Raises:
        DomainError: If theta is not a finite real.
    """
    if not math.isfinite(theta):
        raise DomainError("theta must be a finite real")
    params = model.displacement_params
    if model.family is Family.GAUSSIAN_BINARY:
        return LN2 + 0.5 * theta * theta * params["sigma2"] - theta * params["mu"]
    a, p = params["a"], params["p"]
    value = LN2 + logsumexp([-theta * a, theta * a], b=[p, 1.0 - p])
    return float(value)


def biggins_derivative(model: ModelSpec, theta: float) -> float:
    """Phi'(theta)."""
    if not math.isfinite(theta):
        raise DomainError("theta must be a finite real")
    params = model.displacement_params
    if model.family is Family.GAUSSIAN_BINARY:
        return theta * params["sigma2"] - params["mu"]
    a, p = params["a"], params["p"]
    down = p * math.exp(-theta * a)
    up = (1.0 - p) * math.exp(theta * a)
    return a * (up - down) / (up + down)


def _gaussian_calibration(
    free_params: Dict[str, float], target_regime: Regime
) -> Tuple[Dict[str, float], float | None]:
    boundary_sigma2 = 2.0 * LN2
    sigma2 = free_params.get("sigma2")
    if target_regime is Regime.BOUNDARY:
        if sigma2 is not None and abs(sigma2 - boundary_sigma2) > CALIBRATION_TOL:
            raise CalibrationError(
                "Boundary Gaussian model forces sigma2 = 2 ln 2",
                residuals={"phi_prime_1": sigma2 / 2.0 - LN2},
            )
        sigma2 = boundary_sigma2
        return {"mu": LN2 + sigma2 / 2.0, "sigma2": sigma2}, None

    if sigma2 is None:
        raise CalibrationError("Subcritical Gaussian model needs sigma2")
    if not 0.0 < sigma2 < boundary_sigma2:
        raise CalibrationError(
            "Subcritical Gaussian model needs 0 < sigma2 < 2 ln 2",
            residuals={"phi_prime_1": sigma2 / 2.0 - LN2},
        )
    # Roots of sigma2 theta^2 / 2 - mu theta + ln 2 multiply to 2 ln 2 / sigma2.
    return {"mu": LN2 + sigma2 / 2.0, "sigma2": sigma2}, boundary_sigma2 / sigma2


def _lattice_calibration(
    free_params: Dict[str, float], target_regime: Regime
) -> Tuple[Dict[str, float], float | None]:
    boundary_a = math.acosh(2.0)
    if target_regime is Regime.BOUNDARY:
        a = free_params.get("a", boundary_a)
        if abs(a - boundary_a) > CALIBRATION_TOL:
            raise CalibrationError(
                "Boundary lattice model forces a = arccosh(2)",
                residuals={"a": a - boundary_a},
            )
        return {"a": boundary_a, "p": (2.0 + math.sqrt(3.0)) / 4.0}, None

    a = free_params.get("a")
    if a is None:
        raise CalibrationError("Subcritical lattice model needs the step magnitude a")
    if not LN2 <= a < boundary_a:
        raise CalibrationError(
            "Subcritical lattice model needs ln 2 <= a < arccosh(2)",
            residuals={"a_low": a - LN2, "a_high": a - boundary_a},
        )
    ea = math.exp(a)
    p = (ea - 0.5) / (ea - 1.0 / ea)
    if p >= 1.0:
        return {"a": a, "p": 1.0}, math.inf
    # e^{theta a} solves (1-p) t^2 - t/2 + p = 0; the roots multiply to p/(1-p).
    kappa = math.log(p / ((1.0 - p) * ea)) / a
    return {"a": a, "p": p}, kappa


def calibrate(
    family: Family,
    free_params: Dict[str, float],
    target_regime: Regime,
    gamma: float | None = None,
    rho: float | None = None,
) -> ModelSpec:
    """Solve Phi(1) = 0 (and Phi'(1) = 0 for the boundary case) analytically.

    Args:
        family: Offspring family.
        free_params: ``sigma2`` for Gaussian, ``a`` for lattice subcritical models.
        target_regime: Regime the calibrated model must be in.
        gamma: Exponent in (1, kappa); defaults to (1 + kappa) / 2, or 2 if kappa is infinite.
        rho: Exponent in (1, min(gamma, 2)]; defaults to min(gamma, 2).

    Returns:
        A validated ModelSpec.

    Raises:
        CalibrationError: If the constraints are infeasible for the given parameters.
    """
    family = Family(family)
    target_regime = Regime(target_regime)
    if family is Family.GAUSSIAN_BINARY:
        params, kappa = _gaussian_calibration(free_params, target_regime)
    else:
        params, kappa = _lattice_calibration(free_params, target_regime)

    if target_regime is Regime.SUBCRITICAL:
        if gamma is None:
            gamma = 2.0 if math.isinf(kappa) else (1.0 + kappa) / 2.0
        if rho is None:
            rho = min(gamma, 2.0)
        if not 1.0 < gamma < kappa:
            raise CalibrationError("gamma must lie in (1, kappa)", {"gamma": gamma, "kappa": kappa})
        if not 1.0 < rho <= min(gamma, 2.0):
            raise CalibrationError("rho must lie in (1, min(gamma, 2)]", {"rho": rho})
    else:
        gamma = rho = None

    try:
        return ModelSpec(
            family=family,
            displacement_params=params,
            regime=target_regime,
            kappa=kappa,
            gamma=gamma,
            rho=rho,
        )
    except ValueError as e:
        raise CalibrationError(f"Calibration failed: {e}") from e


def sample_displacements(
    model: ModelSpec, rng: np.random.Generator, size: int | Tuple[int, ...]
) -> np.ndarray:
    """Draw iid per-child displacements from the original (untilted) law."""
    params = model.displacement_params
    if model.family is Family.GAUSSIAN_BINARY:
        return rng.normal(params["mu"], math.sqrt(params["sigma2"]), size)
    a = params["a"]
    return np.where(rng.random(size) < params["p"], a, -a)


def sample_offspring(model: ModelSpec, rng: np.random.Generator) -> OffspringSample:
    """One iid draw of the offspring point process."""
    draws = sample_displacements(model, rng, model.offspring_count)
    return OffspringSample(displacements=draws.tolist())


def mc_biggins_transform(
    model: ModelSpec, theta: float, samples: int, rng: np.random.Generator
) -> Tuple[float, float]:
    """Monte Carlo Phi(theta) with a delta-method standard error."""
    if samples < 2:
        raise ValueError("Need at least two samples")
    draws = sample_displacements(model, rng, (samples, model.offspring_count))
    totals = np.exp(-theta * draws).sum(axis=1)
    mean = totals.mean()
    se = totals.std(ddof=1) / math.sqrt(samples)
    return float(math.log(mean)), float(se / mean)


class MomentEstimate(BaseModel):
    name: str
    estimate: float
    se: float
    max_term_share: float
    converged: bool


class MomentReport(BaseModel):
    delta: float
    samples: int
    status: str
    estimates: List[MomentEstimate]


def _moment_estimate(name: str, values: np.ndarray) -> MomentEstimate:
    n = values.size
    estimate = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    total = float(values.sum())
    share = float(values.max() / total) if total > 0 else 0.0
    half = float(values[: n // 2].mean()) if n >= 2 else estimate
    # A finite moment gives a running mean that settles; a divergent one keeps jumping.
    settled = abs(estimate - half) <= 3.0 * se * math.sqrt(2.0) + 1e-9 * abs(estimate)
    converged = bool(np.isfinite(estimate) and settled and share <= 0.5)
    return MomentEstimate(
        name=name, estimate=estimate, se=se, max_term_share=share, converged=converged
    )


def moment_diagnostics(
    model: ModelSpec, delta: float, samples: int, rng: np.random.Generator
) -> MomentReport:
    """Monte Carlo checks of the exponential-moment conditions on the offspring law.

    Estimates E[exp(delta X)], E[X exp(delta X)] with
    X = sum (1 + V_+) exp(-V), and E[exp(delta W_1(gamma))] with
    W_1(gamma) = sum exp(-gamma V) (gamma = 1 for boundary models).

    Raises:
        ValueError: If delta is negative or samples < 2.
    """
    if delta < 0:
        raise ValueError("delta cannot be negative")
    if samples < 2:
        raise ValueError("Need at least two samples")
    draws = sample_displacements(model, rng, (samples, model.offspring_count))
    x_total = ((1.0 + np.maximum(draws, 0.0)) * np.exp(-draws)).sum(axis=1)
    gamma = model.gamma if model.gamma is not None else 1.0
    w_gamma = np.exp(-gamma * draws).sum(axis=1)

    with np.errstate(over="ignore"):
        estimates = [
            _moment_estimate("exp_delta_X", np.exp(delta * x_total)),
            _moment_estimate("X_exp_delta_X", x_total * np.exp(delta * x_total)),
            _moment_estimate("exp_delta_W1_gamma", np.exp(delta * w_gamma)),
        ]
    status = "finite" if all(e.converged for e in estimates) else "inconclusive"
    return MomentReport(delta=delta, samples=samples, status=status, estimates=estimates)
