"""Tail-model fitting and the statistical helpers shared by the simulators."""

import logging
import math
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.formula.api as smf
from pydantic import BaseModel, ConfigDict
from scipy import stats

from app.brw.errors import DomainError, TailFitError
from app.brw.mgf import BoundCertificate, MgfTable
from app.brw.model import ModelSpec

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 100
MAX_REGRESSION_POINTS = 5000


def binomial_ci(hits: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    if not 0 <= hits <= trials:
        raise ValueError("hits must lie in [0, trials]")
    ci = stats.binomtest(int(hits), int(trials)).proportion_ci(
        confidence_level=confidence, method="wilson"
    )
    return float(ci.low), float(ci.high)


def naive_tail_estimate(values: Sequence[float], y_grid: Sequence[float]) -> pd.DataFrame:
    """Plain Monte Carlo P(value > y) per y, with binomial SE and Wilson CI."""
    arr = np.sort(np.asarray(values, dtype=float))
    n = arr.size
    rows = []
    for y in y_grid:
        hits = int(n - np.searchsorted(arr, y, side="right"))
        p = hits / n if n else 0.0
        lo, hi = binomial_ci(hits, n)
        rows.append({
            "y": float(y), "estimate": p,
            "SE": math.sqrt(p * (1.0 - p) / n) if n else 0.0,
            "hits": hits, "ci_low": lo, "ci_high": hi,
        })
    return pd.DataFrame(rows, columns=["y", "estimate", "SE", "hits", "ci_low", "ci_high"])


class TailKind(str, Enum):
    EXPONENTIAL = "exponential"
    POWER = "power"


class TailFit(BaseModel):
    """Fitted tail ``C e^{-c y}`` (exponential) or ``c / y^kappa`` (power).

    ``model_comparison`` is the log-likelihood of an Exponential excess fit
    minus that of a Pareto fit above ``fit_range[0]``; positive values favor
    the exponential tail.
    """

    model_config = ConfigDict(protected_namespaces=())

    kind: TailKind
    rate_or_index: float
    prefactor: float
    fit_range: Tuple[float, float]
    r_squared: float
    bootstrap_ci: Tuple[float, float] | None = None
    model_comparison: float | None = None
    points: int
    loglog_index: float | None = None

    def survival(self, y: float | np.ndarray) -> float | np.ndarray:
        if self.kind is TailKind.EXPONENTIAL:
            return self.prefactor * np.exp(-self.rate_or_index * np.asarray(y))
        return self.prefactor * np.asarray(y, dtype=float) ** (-self.rate_or_index)


def _empirical_survival(sorted_values: np.ndarray, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """(y, P(X >= y)) at the order statistics inside [lo, hi], thinned for regression."""
    n = sorted_values.size
    idx = np.flatnonzero((sorted_values >= lo) & (sorted_values <= hi))
    if idx.size > MAX_REGRESSION_POINTS:
        idx = idx[np.linspace(0, idx.size - 1, MAX_REGRESSION_POINTS).astype(int)]
    return sorted_values[idx], (n - idx) / n


def _linear_fit(x: np.ndarray, y: np.ndarray) -> Tuple[float, float, float]:
    """(slope, intercept, R^2) of y on x by ordinary least squares."""
    result = smf.ols("y ~ x", data=pd.DataFrame({"x": x, "y": y})).fit()
    r2 = float(result.rsquared) if np.isfinite(result.rsquared) else 1.0
    return float(result.params["x"]), float(result.params["Intercept"]), min(max(r2, 0.0), 1.0)


def _exponential_rate(sorted_values: np.ndarray, lo: float, hi: float) -> Tuple[float, float, float]:
    y, surv = _empirical_survival(sorted_values, lo, hi)
    slope, intercept, r2 = _linear_fit(y, np.log(surv))
    return -slope, math.exp(intercept), r2


def _hill_index(sorted_values: np.ndarray, k: int) -> Tuple[float, float]:
    """Hill index from the top k order statistics, and the threshold X_(k+1)."""
    top = sorted_values[-k:]
    threshold = sorted_values[-k - 1]
    return 1.0 / float(np.mean(np.log(top / threshold))), float(threshold)


def _compare_exponential_pareto(sorted_values: np.ndarray, threshold: float) -> float | None:
    excess = sorted_values[sorted_values > threshold]
    if threshold <= 0 or excess.size < 2:
        return None
    scale = float(np.mean(excess - threshold))
    alpha = excess.size / float(np.sum(np.log(excess / threshold)))
    ll_exp = stats.expon.logpdf(excess, loc=threshold, scale=scale).sum()
    ll_par = stats.pareto.logpdf(excess, b=alpha, scale=threshold).sum()
    return float(ll_exp - ll_par)


def fit_tail(
    samples: Sequence[float],
    kind: TailKind | str,
    quantile_range: Tuple[float, float] = (0.99, 0.9999),
    bootstrap: int = 200,
    rng: np.random.Generator | None = None,
    min_samples: int = 10_000,
) -> TailFit:
    """Fit an exponential or power-law upper tail.

    Exponential fits regress ln S(y) on y over the empirical quantile range.
    Power fits use the Hill estimator on the top ``N (1 - q_lo)`` order
    statistics, with a log-log regression of the survival function as a
    cross-check. The bootstrap resamples replicas and refits the rate or
    index.

    Args:
        samples: Replica values (non-finite entries are dropped).
        kind: ``"exponential"`` or ``"power"``.
        quantile_range: (q_lo, q_hi) inside (0.5, 1).
        bootstrap: Number of resamples for the 95% CI (0 disables it).
        rng: Generator for the bootstrap.
        min_samples: Smallest accepted sample size.

    Raises:
        TailFitError: If there are too few samples overall or in the fit range,
            or the fitted tail does not decay.
    """
    kind = TailKind(kind)
    q_lo, q_hi = quantile_range
    if not 0.5 < q_lo < q_hi < 1.0:
        raise ValueError("quantile_range must satisfy 0.5 < q_lo < q_hi < 1")
    arr = np.asarray(samples, dtype=float)
    arr = np.sort(arr[np.isfinite(arr)])
    if kind is TailKind.POWER:
        arr = arr[arr > 0]
    if arr.size < min_samples:
        raise TailFitError(f"Need at least {min_samples} samples, got {arr.size}")

    lo, hi = (float(v) for v in np.quantile(arr, [q_lo, q_hi]))
    inside = int(np.count_nonzero((arr >= lo) & (arr <= hi)))
    if not lo < hi or inside < MIN_FIT_POINTS:
        raise TailFitError(f"Only {inside} samples in the fit range [{lo:.4g}, {hi:.4g}]")

    n = arr.size
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind is TailKind.EXPONENTIAL:
        rate, prefactor, r2 = _exponential_rate(arr, lo, hi)
        if rate <= 0:
            raise TailFitError("Fitted survival function does not decay")
        loglog = None

        def refit(resampled: np.ndarray) -> float:
            r_lo, r_hi = np.quantile(resampled, [q_lo, q_hi])
            return _exponential_rate(resampled, r_lo, r_hi)[0]
    else:
        k = max(int(round(n * (1.0 - q_lo))), 2)
        index, threshold = _hill_index(arr, k)
        prefactor = (k / n) * threshold ** index
        y, surv = _empirical_survival(arr, lo, hi)
        slope, _, r2 = _linear_fit(np.log(y), np.log(surv))
        loglog = -slope

        def refit(resampled: np.ndarray) -> float:
            return _hill_index(resampled, k)[0]

    estimate = rate if kind is TailKind.EXPONENTIAL else index
    ci = None
    if bootstrap > 0:
        draws = [refit(np.sort(arr[rng.integers(0, n, n)])) for _ in range(bootstrap)]
        ci = (float(np.quantile(draws, 0.025)), float(np.quantile(draws, 0.975)))

    comparison = _compare_exponential_pareto(arr, lo)
    fit = TailFit(
        kind=kind, rate_or_index=float(estimate), prefactor=float(prefactor),
        fit_range=(lo, hi), r_squared=r2, bootstrap_ci=ci,
        model_comparison=comparison, points=inside, loglog_index=loglog,
    )
    logger.info(
        f"{kind.value} tail fit on [{lo:.4g}, {hi:.4g}]: {estimate:.4f}, R^2 = {r2:.4f}"
    )
    return fit


def top_decades_range(samples: Sequence[float], decades: int = 2, min_points: int = MIN_FIT_POINTS) -> Tuple[float, float]:
    """Quantile range covering the top ``decades`` resolvable decades of the survival function.

    The deepest usable survival level keeps ``min_points`` samples above it.
    """
    n = np.count_nonzero(np.isfinite(np.asarray(samples, dtype=float)))
    s_min = min_points / n if n else 1.0
    s_max = s_min * 10.0 ** decades
    if s_max >= 0.5:
        raise TailFitError(f"{n} samples cannot resolve {decades} decades of survival")
    return 1.0 - s_max, 1.0 - s_min


class ScanKind(str, Enum):
    ADDITIVE = "additive"
    DERIVATIVE = "derivative"


class XScanResult(BaseModel):
    kind: ScanKind
    y0: float | None = None
    slope: float
    slope_ci: Tuple[float, float]
    intercept: float
    r_squared: float
    inconclusive: bool
    bound_check: bool


def scan_x_dependence(
    xs: Sequence[float],
    estimates: Sequence[float],
    ses: Sequence[float],
    kind: ScanKind | str = ScanKind.ADDITIVE,
    renewal_values: Sequence[float] | None = None,
    y0: float | None = None,
) -> XScanResult:
    """Weighted regression of ln P(. > y0) on x.

    Additive scans fit ln P directly and pass when the upper 95% bound of the
    slope is at most -1. Derivative scans fit ln[P / (R(x) e^{-x})] and pass
    when the slope is not significantly positive. Weights are the inverse
    delta-method variances (se / P)^2.

    The scan is inconclusive when the 95% intervals of ln P at the smallest
    and largest x overlap.
    """
    kind = ScanKind(kind)
    x = np.asarray(xs, dtype=float)
    p = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if x.size < 4:
        raise ValueError("Need estimates at four or more x values")
    if not (x.size == p.size == se.size):
        raise ValueError("xs, estimates and ses must have equal length")
    if np.any(p <= 0):
        raise DomainError("Tail estimates must be positive to take logarithms")

    response = np.log(p)
    if kind is ScanKind.DERIVATIVE:
        if renewal_values is None:
            raise ValueError("Derivative scans need R(x) at every x")
        response = response - np.log(np.asarray(renewal_values, dtype=float)) + x
    log_se = se / p
    weights = 1.0 / np.maximum(log_se, 1e-12) ** 2

    frame = pd.DataFrame({"x": x, "response": response})
    result = smf.wls("response ~ x", data=frame, weights=weights).fit()
    slope = float(result.params["x"])
    ci_lo, ci_hi = (float(v) for v in result.conf_int(alpha=0.05).loc["x"])
    if not (np.isfinite(ci_lo) and np.isfinite(ci_hi)):
        ci_lo = ci_hi = slope
    r2 = float(result.rsquared) if np.isfinite(result.rsquared) else 1.0

    first, last = np.argmin(x), np.argmax(x)
    band = 1.96 * log_se
    inconclusive = bool(
        response[first] - band[first] <= response[last] + band[last]
        and response[last] - band[last] <= response[first] + band[first]
    )
    bound_check = ci_hi <= -1.0 if kind is ScanKind.ADDITIVE else ci_lo <= 0.0
    if inconclusive:
        logger.warning("x-scan inconclusive: end-point intervals overlap")
    return XScanResult(
        kind=kind, y0=y0, slope=slope, slope_ci=(ci_lo, ci_hi),
        intercept=float(result.params["Intercept"]), r_squared=min(max(r2, 0.0), 1.0),
        inconclusive=inconclusive, bound_check=bool(bound_check),
    )


def conjecture_ratio(
    p_x: float, se_x: float, p_0: float, se_0: float, x: float, rate: float
) -> Tuple[float, float]:
    """Ratio P(M^(x) > y) / (e^{-rate x} P(M^(0) > y)) with a delta-method SE.

    Use ``rate = kappa`` for the additive martingale and ``rate = 1`` for the
    derivative martingale.
    """
    if p_0 <= 0:
        raise DomainError("The x = 0 tail estimate must be positive")
    ratio = p_x / (math.exp(-rate * x) * p_0)
    if p_x <= 0:
        return ratio, 0.0
    rel = math.sqrt((se_x / p_x) ** 2 + (se_0 / p_0) ** 2)
    return ratio, ratio * rel


class TailBound(BaseModel):
    """``P(W_n^(x) > y) <= C e^{-gamma x} e^{-c y}`` and its Chernoff form."""

    K: float
    theta_bar: float
    rho: float
    gamma: float
    kappa: float
    C: float
    c: float

    def chernoff(self, x: float, y: float) -> float:
        """exp(theta_bar e^{-x} + K theta_bar^rho e^{-rho x} - theta_bar y), capped at 1."""
        t = self.theta_bar
        exponent = t * math.exp(-x) + self.K * t ** self.rho * math.exp(-self.rho * x) - t * y
        return min(1.0, math.exp(exponent))

    def exponential(self, x: float, y: float) -> float:
        return min(1.0, self.C * math.exp(-self.gamma * x - self.c * y))


def tail_bound_constants(certificate: BoundCertificate, model: ModelSpec) -> TailBound:
    """Constants of the exponential tail bound from a certified (K, theta_bar).

    ``C = exp(theta_bar + K theta_bar^rho)`` and
    ``c = theta_bar (kappa - gamma) / (2 kappa)``; an infinite kappa gives
    ``c = theta_bar / 2``.

    Raises:
        DomainError: If the certificate does not hold or the model lacks gamma.
    """
    if not certificate.holds:
        raise DomainError("Tail bound constants need a certificate that holds")
    if model.gamma is None or model.kappa is None:
        raise DomainError("Tail bound constants need a subcritical model")
    t, k = certificate.theta_bar, certificate.K
    c_big = math.exp(t + k * t ** certificate.rho)
    if math.isinf(model.kappa):
        c_small = t / 2.0
    else:
        c_small = t * (model.kappa - model.gamma) / (2.0 * model.kappa)
    return TailBound(
        K=k, theta_bar=t, rho=certificate.rho, gamma=model.gamma, kappa=model.kappa,
        C=c_big, c=c_small,
    )


def chernoff_tail_bound(table: MgfTable, x: float, y: float, n: int | None = None) -> Tuple[float, float]:
    """min over grid theta of exp(psi_n(theta, x) - theta y); returns (bound, argmin theta)."""
    n = table.n_max if n is None else n
    best, best_theta = 1.0, 0.0
    for i, theta in enumerate(table.theta_grid):
        if table.diverged[i] or theta == 0.0:
            continue
        psi = float(np.interp(x, table.x_grid, table.psi[n, i])) if x <= table.x_grid[-1] else theta * math.exp(-x)
        value = math.exp(min(psi - theta * y, 0.0))
        if value < best:
            best, best_theta = value, float(theta)
    return best, best_theta


def survival_points(values: Sequence[float], levels: int = 40) -> pd.DataFrame:
    """Plot-ready empirical survival function on a log-spaced probability grid."""
    arr = np.sort(np.asarray(values, dtype=float))
    n = arr.size
    if n == 0:
        return pd.DataFrame(columns=["y", "survival"])
    probs = np.geomspace(1.0 / n, 1.0, levels)
    idx = np.clip((n - probs * n).astype(int), 0, n - 1)
    return pd.DataFrame({"y": arr[idx], "survival": (n - idx) / n})


def extrapolation_residuals(fit: TailFit, ys: Sequence[float], estimates: Sequence[float], ses: Sequence[float]) -> List[float]:
    """Distance of IS points from the fitted line, in units of their SE on the log scale."""
    out = []
    for y, p, se in zip(ys, estimates, ses):
        if p <= 0 or se <= 0:
            out.append(math.inf)
            continue
        predicted = math.log(float(fit.survival(y)))
        out.append(abs(math.log(p) - predicted) / (se / p))
    return out


def log_survival_fit(
    values: Sequence[float],
    quantile_range: Tuple[float, float] = (0.5, 0.99),
    discrete: bool = False,
    min_points: int = 3,
) -> Tuple[float, float, int]:
    """Slope and R^2 of ln P(X > m) against m over a quantile window.

    Integer-valued samples (local times) are evaluated at every integer in
    the window; continuous ones at their order statistics. Returns
    ``(nan, nan, points)`` when fewer than ``min_points`` levels are usable.
    """
    arr = np.sort(np.asarray(values, dtype=float))
    arr = arr[np.isfinite(arr)]
    n = arr.size
    if n == 0:
        return math.nan, math.nan, 0
    lo, hi = np.quantile(arr, quantile_range)
    if discrete:
        levels = np.arange(math.floor(lo), math.floor(hi) + 1, dtype=float)
        surv = (n - np.searchsorted(arr, levels, side="right")) / n
    else:
        levels, surv = _empirical_survival(arr, lo, hi)
    keep = surv > 0
    levels, surv = levels[keep], surv[keep]
    if levels.size < min_points or np.ptp(levels) == 0:
        return math.nan, math.nan, int(levels.size)
    slope, _, r2 = _linear_fit(levels, np.log(surv))
    return slope, r2, int(levels.size)
