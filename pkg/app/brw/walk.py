"""Associated random walk, its renewal function and the walk conditioned to stay nonnegative."""

import bisect
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from app.brw.errors import DomainError, EstimationError, SamplerError
from app.brw.model import Family, ModelSpec

logger = logging.getLogger(__name__)

LATTICE_TOL = 1e-9
DEFAULT_SPACING = 0.05
DEFAULT_U_MAX = 15.0
DEFAULT_STEP_CAP = 10**7


class StepKind(str, Enum):
    NORMAL = "normal"
    TWO_POINT = "two_point"


@dataclass(frozen=True, eq=False)
class StepLaw:
    """Law of S_1 under the many-to-one tilt.

    For ``TWO_POINT`` laws the support is ``{+span, -span}`` with
    ``P(+span) = p_up``.
    """

    kind: StepKind
    mean: float
    variance: float
    span: float | None = None
    p_up: float | None = None

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @property
    def is_lattice(self) -> bool:
        return self.kind is StepKind.TWO_POINT

    def sample(self, rng: np.random.Generator, size: int | Tuple[int, ...]) -> np.ndarray:
        if self.kind is StepKind.NORMAL:
            return rng.normal(self.mean, self.std, size)
        return np.where(rng.random(size) < self.p_up, self.span, -self.span)


def step_law(model: ModelSpec) -> StepLaw:
    """Closed-form law of the associated walk step.

    The e^{-z} tilt of N(mu, sigma2), doubled for two children, is
    N(mu - sigma2, sigma2); the lattice tilt puts mass 2 p e^{-a} on +a and
    2 (1 - p) e^{a} on -a.
    """
    if model.family is Family.GAUSSIAN_BINARY:
        sigma2 = model.displacement_params["sigma2"]
        return StepLaw(StepKind.NORMAL, mean=model.mu - sigma2, variance=sigma2)
    a, p = model.a, model.p
    p_up = 2.0 * p * math.exp(-a)
    p_down = 2.0 * (1.0 - p) * math.exp(a)
    # The two masses sum to exp(Phi(1)) = 1 up to rounding.
    p_up = p_up / (p_up + p_down)
    mean = a * (2.0 * p_up - 1.0)
    variance = a * a - mean * mean
    return StepLaw(StepKind.TWO_POINT, mean=mean, variance=variance, span=a, p_up=p_up)


@dataclass(frozen=True, eq=False)
class RenewalTable:
    """Tabulated renewal function R on ``grid`` with linear extrapolation beyond it.

    Exact tables describe a two-point walk: R is the step function
    ``sum_{j<=floor(u/span)} r^j`` with ``r = min(1, p_down / p_up)``.
    """

    grid: np.ndarray
    values: np.ndarray
    slope: float
    exact: bool
    span: float | None = None
    ratio: float = 1.0
    se: np.ndarray | None = None
    slope_ci: Tuple[float, float] | None = None
    capped: int = 0
    replicas: int = 0

    @property
    def u_max(self) -> float:
        return float(self.grid[-1])

    def evaluator(self) -> Callable[[float], float]:
        """Fast scalar R for tight simulation loops (no domain check)."""
        if self.exact:
            span, ratio = self.span, self.ratio
            if ratio == 1.0:
                return lambda u: math.floor(u / span + LATTICE_TOL) + 1.0
            return lambda u: (1.0 - ratio ** (math.floor(u / span + LATTICE_TOL) + 1)) / (1.0 - ratio)

        grid = self.grid.tolist()
        values = self.values.tolist()
        u_max, r_max, slope = grid[-1], values[-1], self.slope

        def evaluate(u: float) -> float:
            if u >= u_max:
                return r_max + slope * (u - u_max)
            i = bisect.bisect_right(grid, u)
            u0, u1 = grid[i - 1], grid[i]
            r0, r1 = values[i - 1], values[i]
            return r0 + (r1 - r0) * (u - u0) / (u1 - u0)

        return evaluate

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"u": self.grid, "R": self.values, "exact_flag": [self.exact] * self.grid.size}
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "RenewalTable":
        """Rebuild a table from its ``u,R,exact_flag`` CSV form."""
        if list(frame.columns) != ["u", "R", "exact_flag"]:
            raise ValueError("Renewal CSV must have columns u, R, exact_flag")
        grid = frame["u"].to_numpy(dtype=float)
        values = frame["R"].to_numpy(dtype=float)
        exact = bool(frame["exact_flag"].iloc[0])
        if exact:
            span = float(grid[1] - grid[0])
            increments = np.diff(values)
            ratio = float(increments[1] / increments[0]) if increments.size > 1 else 1.0
            ratio = 1.0 if abs(ratio - 1.0) < 1e-9 else ratio
            slope = 1.0 / span if ratio == 1.0 else 0.0
            return cls(grid, values, slope=slope, exact=True, span=span, ratio=ratio)
        return cls(grid, values, slope=_fit_slope(grid, values), exact=False)


def _fit_slope(grid: np.ndarray, values: np.ndarray) -> float:
    upper = grid >= grid[-1] / 2.0
    if upper.sum() < 2:
        return float((values[-1] - values[0]) / (grid[-1] - grid[0]))
    slope, _ = np.polyfit(grid[upper], values[upper], 1)
    return float(max(slope, 0.0))


def _lattice_grid(span: float, u_max: float) -> np.ndarray:
    return np.arange(int(math.floor(u_max / span + LATTICE_TOL)) + 1) * span


def exact_lattice_renewal(step: StepLaw, u_max: float) -> RenewalTable:
    """Closed-form renewal table of a two-point walk.

    Descending ladder heights of a downward skip-free walk are single down-steps,
    each one reached with probability ``r = min(1, p_down / p_up)``.
    """
    if not step.is_lattice:
        raise DomainError("Exact renewal tables exist only for two-point steps")
    grid = _lattice_grid(step.span, u_max)
    ratio = min(1.0, (1.0 - step.p_up) / step.p_up)
    ratio = 1.0 if abs(ratio - 1.0) < 1e-12 else ratio
    k = np.arange(grid.size)
    if ratio == 1.0:
        values = k + 1.0
        slope = 1.0 / step.span
    else:
        values = (1.0 - ratio ** (k + 1)) / (1.0 - ratio)
        slope = 0.0
    return RenewalTable(
        grid, values, slope=slope, exact=True, span=step.span, ratio=ratio,
        se=np.zeros(grid.size), slope_ci=(slope, slope),
    )


def _occupation_counts(
    step: StepLaw,
    grid: np.ndarray,
    replicas: int,
    rng: np.random.Generator,
    step_cap: int,
    batches: int,
    block: int,
    chunk: int,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Per-batch counts of pre-ladder visits binned by depth, plus capped replicas."""
    g = grid.size
    tol = LATTICE_TOL * (step.span if step.is_lattice else 1.0)
    u_top = grid[-1] + tol
    counts = np.zeros(batches * g)
    batch_sizes = np.bincount(np.arange(replicas) % batches, minlength=batches)
    capped = 0

    for start in range(0, replicas, chunk):
        ids = np.arange(start, min(start + chunk, replicas))
        pos = np.zeros(ids.size)
        steps = 0
        while ids.size and steps < step_cap:
            width = min(block, step_cap - steps)
            path = pos[:, None] + np.cumsum(step.sample(rng, (ids.size, width)), axis=1)
            ladder = path >= -tol
            hit = ladder.any(axis=1)
            first = np.where(hit, ladder.argmax(axis=1), width)
            depth = -path
            keep = (np.arange(width)[None, :] < first[:, None]) & (depth <= u_top)
            rows, cols = np.nonzero(keep)
            bins = np.searchsorted(grid, depth[rows, cols] - tol, side="left")
            flat = (ids[rows] % batches) * g + bins
            counts += np.bincount(flat, minlength=batches * g)
            alive = ~hit
            pos = path[alive, -1]
            ids = ids[alive]
            steps += width
        capped += ids.size

    return counts.reshape(batches, g), batch_sizes, capped


def estimate_renewal(
    step: StepLaw,
    u_max: float,
    replicas: int,
    rng: np.random.Generator,
    spacing: float = DEFAULT_SPACING,
    step_cap: int = DEFAULT_STEP_CAP,
    method: str = "auto",
    batches: int = 50,
    block: int = 256,
    chunk: int = 4096,
    cap_tolerance: float = 1e-3,
    bootstrap: int = 200,
) -> RenewalTable:
    """Tabulate R(u) = E[sum_{j < tau+} 1{S_j >= -u}] on [0, u_max].

    Args:
        step: Associated walk step law (mean must be nonnegative).
        u_max: Upper end of the table.
        replicas: Monte Carlo replicas (ignored for exact tables).
        rng: Caller-owned generator.
        spacing: Grid spacing for continuous laws; lattice grids use the span.
        step_cap: Hard cap on steps before the first weak ascending ladder epoch.
        method: ``"auto"`` (exact for lattice), ``"exact"`` or ``"monte_carlo"``.
        batches: Number of replica batches used for batch-means standard errors.
        cap_tolerance: Largest tolerated fraction of capped replicas.
        bootstrap: Batch-bootstrap resamples for the slope confidence interval.

    Returns:
        The renewal table.

    Raises:
        DomainError: If the walk has negative drift or u_max is not positive.
        EstimationError: If more than ``cap_tolerance`` of replicas hit the cap.
    """
    if step.mean < -1e-12:
        raise DomainError("Renewal estimation needs a walk with nonnegative drift")
    if u_max <= 0:
        raise DomainError("u_max must be positive")
    if method not in ("auto", "exact", "monte_carlo"):
        raise ValueError(f"Unknown renewal method: {method}")
    if method == "exact" or (method == "auto" and step.is_lattice):
        return exact_lattice_renewal(step, u_max)
    if replicas < 2 * batches:
        raise ValueError("Need at least two replicas per batch")

    if step.is_lattice:
        grid = _lattice_grid(step.span, u_max)
    else:
        grid = np.round(np.arange(0.0, u_max + spacing / 2.0, spacing), 12)

    counts, sizes, capped = _occupation_counts(
        step, grid, replicas, rng, step_cap, batches, block, chunk
    )
    if capped:
        logger.warning(f"Renewal estimation: {capped}/{replicas} replicas hit the step cap")
    if capped > cap_tolerance * replicas:
        raise EstimationError(
            f"{capped} of {replicas} replicas exceeded {step_cap} steps before the ladder epoch"
        )

    batch_values = 1.0 + np.cumsum(counts, axis=1) / sizes[:, None]
    values = 1.0 + np.cumsum(counts.sum(axis=0)) / replicas
    se = batch_values.std(axis=0, ddof=1) / math.sqrt(batches)
    slope = _fit_slope(grid, values)

    resampled = []
    for _ in range(bootstrap):
        pick = rng.integers(0, batches, batches)
        merged = 1.0 + np.cumsum(counts[pick].sum(axis=0)) / sizes[pick].sum()
        resampled.append(_fit_slope(grid, merged))
    slope_ci = (
        (float(np.quantile(resampled, 0.025)), float(np.quantile(resampled, 0.975)))
        if resampled
        else None
    )

    logger.info(f"Renewal table: {grid.size} nodes, c_ren = {slope:.4f}")
    return RenewalTable(
        grid, values, slope=slope, exact=False,
        span=step.span if step.is_lattice else None,
        se=se, slope_ci=slope_ci, capped=capped, replicas=replicas,
    )


def renewal_eval(table: RenewalTable, u: float | np.ndarray) -> float | np.ndarray:
    """Evaluate R(u).

    Exact tables use the closed form, other tables interpolate linearly inside
    the grid and extrapolate with the fitted slope beyond ``u_max``.

    Raises:
        DomainError: If any u is negative.
    """
    arr = np.asarray(u, dtype=float)
    if np.any(arr < 0):
        raise DomainError("R is only defined on [0, inf)")
    if table.exact:
        k = np.floor(arr / table.span + LATTICE_TOL)
        if table.ratio == 1.0:
            out = k + 1.0
        else:
            out = (1.0 - table.ratio ** (k + 1.0)) / (1.0 - table.ratio)
    else:
        out = np.interp(arr, table.grid, table.values)
        beyond = arr > table.u_max
        out = np.where(beyond, table.values[-1] + table.slope * (arr - table.u_max), out)
    return float(out) if np.ndim(out) == 0 else out


def _renewal_killed(table: RenewalTable, u: np.ndarray, tol: float) -> np.ndarray:
    """R(u) * 1{u >= 0}, tolerant to lattice rounding."""
    alive = u >= -tol
    return np.where(alive, renewal_eval(table, np.maximum(u, 0.0)), 0.0)


def harmonicity_residuals(
    table: RenewalTable,
    step: StepLaw,
    rng: np.random.Generator,
    samples: int = 100_000,
    x_grid: np.ndarray | None = None,
    tolerance: float = 0.02,
) -> pd.DataFrame:
    """Check E[R(x + S_1) 1{x + S_1 >= 0}] = R(x) on the table grid.

    Two-point laws are checked exactly; continuous laws by Monte Carlo with
    common random numbers across grid points.
    """
    xs = table.grid if x_grid is None else np.asarray(x_grid, dtype=float)
    r_x = renewal_eval(table, xs)
    if step.is_lattice:
        tol = LATTICE_TOL * step.span
        harmonic = step.p_up * renewal_eval(table, xs + step.span) + (
            1.0 - step.p_up
        ) * _renewal_killed(table, xs - step.span, tol)
        se = np.zeros(xs.size)
    else:
        z = step.sample(rng, samples)
        harmonic = np.empty(xs.size)
        se = np.empty(xs.size)
        for i, x in enumerate(xs):
            values = _renewal_killed(table, x + z, 0.0)
            harmonic[i] = values.mean()
            se[i] = values.std(ddof=1) / math.sqrt(samples)
    residual = np.abs(harmonic - r_x) / r_x
    ok = residual <= np.maximum(tolerance, 3.0 * se / r_x)
    return pd.DataFrame(
        {"x": xs, "R": r_x, "harmonic": harmonic, "residual": residual, "se": se, "ok": ok}
    )


class ConditionedSampler:
    """Transitions of S+ via the h-transform with h = R.

    Continuous laws use inverse-CDF tables over z in
    [max(-x, m - 12 sd), m + 12 sd] with 4096 nodes, cached per 0.01 bucket of x.
    A draw from the bucket floor b lands at y = b + z >= 0 and is accepted with
    probability phi(y - x) / phi(y - b), rescaled by its maximum over the table,
    so accepted steps y - x follow R(x + z) phi(z) / R(x) exactly.
    """

    BUCKET = 0.01
    NODES = 4096
    TAIL_SDS = 12.0

    def __init__(self, table: RenewalTable, step: StepLaw):
        self.table = table
        self.step = step
        self._cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def target(self, x: float) -> Tuple[np.ndarray, np.ndarray, float]:
        """Tabulated (z nodes, unnormalized CDF, mass) of the step from x."""
        m, sd = self.step.mean, self.step.std
        z = np.linspace(max(-x, m - self.TAIL_SDS * sd), m + self.TAIL_SDS * sd, self.NODES)
        density = renewal_eval(self.table, np.maximum(x + z, 0.0)) * stats.norm.pdf(z, m, sd)
        cdf = cumulative_trapezoid(density, z, initial=0.0)
        return z, cdf, float(cdf[-1])

    def _bucket_table(self, bucket: int) -> Tuple[np.ndarray, np.ndarray]:
        cached = self._cache.get(bucket)
        if cached is None:
            z, cdf, mass = self.target(bucket * self.BUCKET)
            if mass < 1e-12:
                raise SamplerError(f"Conditioned step from x = {bucket * self.BUCKET} has no mass")
            cached = (z, cdf / mass)
            self._cache[bucket] = cached
        return cached

    def sample(self, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One conditioned step from each position in ``xs``."""
        xs = np.asarray(xs, dtype=float)
        if np.any(xs < -LATTICE_TOL):
            raise DomainError("Conditioned walk positions must be nonnegative")
        if self.step.is_lattice:
            a = self.step.span
            up = self.step.p_up * renewal_eval(self.table, xs + a)
            down = (1.0 - self.step.p_up) * _renewal_killed(self.table, xs - a, LATTICE_TOL * a)
            total = up + down
            if np.any(total < 1e-12):
                raise SamplerError("Conditioned lattice step has no mass")
            return np.where(rng.random(xs.size) < up / total, a, -a)

        positions = np.maximum(xs, 0.0)
        buckets = np.floor(positions / self.BUCKET + 1e-9).astype(np.int64)
        offsets = np.maximum(positions - buckets * self.BUCKET, 0.0)
        out = np.empty(xs.size)
        pending = np.arange(xs.size)
        while pending.size:
            uniforms = rng.random(pending.size)
            z = np.empty(pending.size)
            top = np.empty(pending.size)
            for bucket in np.unique(buckets[pending]):
                rows = buckets[pending] == bucket
                nodes, cdf = self._bucket_table(int(bucket))
                z[rows] = np.interp(uniforms[rows], cdf, nodes)
                top[rows] = nodes[-1]
            shift = offsets[pending]
            # log phi(y - x) - log phi(y - b) is increasing in y; its maximum sits at the top node.
            accept = rng.random(pending.size) < np.exp(shift * (z - top) / self.step.variance)
            out[pending[accept]] = z[accept] - shift[accept]
            pending = pending[~accept]
        return out


@lru_cache(maxsize=64)
def conditioned_sampler(table: RenewalTable, step: StepLaw) -> ConditionedSampler:
    """Shared sampler (and cache) per (table, step) pair."""
    return ConditionedSampler(table, step)


def conditioned_step(
    table: RenewalTable, step: StepLaw, x: float, rng: np.random.Generator
) -> float:
    """One transition of S+ from x: P(dy | x) = R(y)/R(x) P(x + S_1 in dy), y >= 0.

    Raises:
        DomainError: If x is negative.
        SamplerError: If the tabulated target cannot be normalized.
    """
    if x < 0:
        raise DomainError("Conditioned walk starts from x >= 0")
    return float(conditioned_sampler(table, step).sample(np.array([x]), rng)[0])


def hitting_probability(table: RenewalTable, x: float, y: float) -> float:
    """Probability that S+ started at x ever enters [0, y): 1 - R(x - y) / R(x).

    Raises:
        DomainError: Unless 0 <= y <= x.
    """
    if y < 0:
        raise DomainError("y must be nonnegative")
    if y > x:
        raise DomainError("y must not exceed x")
    return 1.0 - renewal_eval(table, x - y) / renewal_eval(table, x)


def hitting_frequency(
    table: RenewalTable,
    step: StepLaw,
    x: float,
    y: float,
    horizon: int,
    replicas: int,
    rng: np.random.Generator,
    complete: bool = False,
) -> Tuple[float, float]:
    """Empirical frequency of {S+_n < y for some n <= horizon} from x, with its SE.

    With ``complete`` each path still above y at the horizon contributes the
    exact probability of entering later from its final position (Markov
    property), so the estimate targets the eventual hitting probability.
    """
    if not 0 <= y <= x:
        raise DomainError("Need 0 <= y <= x")
    sampler = conditioned_sampler(table, step)
    tol = LATTICE_TOL * (step.span if step.is_lattice else 1.0)
    pos = np.full(replicas, float(x))
    entered = pos < y - tol
    for _ in range(horizon):
        active = ~entered
        if not active.any():
            break
        pos[active] += sampler.sample(pos[active], rng)
        entered |= pos < y - tol
    if not complete:
        freq = float(entered.mean())
        return freq, math.sqrt(max(freq * (1.0 - freq), 1e-300) / replicas)
    out = np.maximum(pos, 0.0)
    later = 1.0 - renewal_eval(table, np.maximum(out - y, 0.0)) / renewal_eval(table, out)
    terms = np.where(entered, 1.0, later)
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(replicas))


class StopReason(str, Enum):
    MAX_STEPS = "max_steps"
    EVENT = "event"


@dataclass
class WalkPath:
    positions: np.ndarray
    stopped_reason: StopReason = StopReason.MAX_STEPS
    metadata: Dict[str, float] = field(default_factory=dict)


def simulate_walk(
    step: StepLaw,
    start: float,
    steps: int,
    rng: np.random.Generator,
    stop_when: Callable[[float], bool] | None = None,
) -> WalkPath:
    """Path of the associated walk S from ``start``."""
    if steps < 0:
        raise ValueError("Step count cannot be negative")
    if stop_when is None:
        increments = step.sample(rng, steps)
        return WalkPath(np.concatenate([[start], start + np.cumsum(increments)]))
    positions = [float(start)]
    for z in step.sample(rng, steps):
        positions.append(positions[-1] + z)
        if stop_when(positions[-1]):
            return WalkPath(np.array(positions), StopReason.EVENT)
    return WalkPath(np.array(positions))


def simulate_conditioned_walk(
    table: RenewalTable,
    step: StepLaw,
    start: float,
    steps: int,
    rng: np.random.Generator,
    stop_when: Callable[[float], bool] | None = None,
) -> WalkPath:
    """Path of S+ from ``start`` built from repeated conditioned steps."""
    if start < 0:
        raise DomainError("Conditioned walk starts from x >= 0")
    if steps < 0:
        raise ValueError("Step count cannot be negative")
    sampler = conditioned_sampler(table, step)
    positions = np.empty(steps + 1)
    positions[0] = start
    here = np.array([float(start)])
    for k in range(1, steps + 1):
        here = here + sampler.sample(here, rng)
        positions[k] = here[0]
        if stop_when is not None and stop_when(positions[k]):
            return WalkPath(positions[: k + 1], StopReason.EVENT)
    return WalkPath(positions)
