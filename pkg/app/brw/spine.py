"""Spine decomposition under the truncated-martingale change of measure, used for importance sampling.

Under the measure tilted by D_n^(x) the spine follows the walk conditioned
to stay nonnegative and its siblings are drawn from the original
displacement law; every sibling then roots an ordinary killed BRW. The
identity

    P(D_n^(x) > y) = R(x) e^{-x} E_spine[1{D > y} / D]

turns rare upper-tail events of D into typical ones. The additive variant
tilts by the untruncated W_n: the spine follows the unconditioned walk and
only replicas whose spine stays above -x carry weight.
"""

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from app.brw.engine import KillConfig, traverse
from app.brw.errors import DomainError, ResourceError
from app.brw.model import ModelSpec, Regime, sample_displacements
from app.brw.parallel import run_replicas
from app.brw.walk import (
    ConditionedSampler,
    RenewalTable,
    StepLaw,
    conditioned_sampler,
    renewal_eval,
    step_law,
)

logger = logging.getLogger(__name__)

MIN_ESS = 30.0
TAIL_COLUMNS = ["y", "estimate", "SE", "ESS", "unreliable"]


def _zero_renewal(u: float) -> float:
    return 0.0


def sibling_delta(displacements: Sequence[float]) -> float:
    """sum over siblings of (1 + max(d, 0)) e^{-d}."""
    return float(sum((1.0 + max(d, 0.0)) * math.exp(-d) for d in displacements))


def _reproduce(
    model: ModelSpec,
    sampler: ConditionedSampler | None,
    step: StepLaw,
    y: float,
    rng: np.random.Generator,
) -> Tuple[float, List[float]]:
    if sampler is not None:
        spine = float(sampler.sample(np.array([y]), rng)[0])
    else:
        spine = float(step.sample(rng, 1)[0])
    siblings = sample_displacements(model, rng, model.offspring_count - 1).tolist()
    return spine, siblings


def spine_reproduce(
    model: ModelSpec, renewal: RenewalTable, y: float, rng: np.random.Generator
) -> Tuple[float, List[float]]:
    """One tilted reproduction of a spine particle at height y.

    With a fixed number of children and iid displacements the tilted law
    factorizes: the spine child moves by a conditioned-walk step from y and
    the siblings are iid from the original displacement law.

    Raises:
        DomainError: If y is negative.
    """
    if y < 0:
        raise DomainError("Spine height must be nonnegative")
    step = step_law(model)
    return _reproduce(model, conditioned_sampler(renewal, step), step, y, rng)


@dataclass
class SpineRealization:
    """One tree sampled under the spine measure.

    ``value`` is D_n^(x) (or W_n^(x) for additive replicas) on the realized
    tree, ``weight`` the factor turning spine-measure averages into
    P-averages: R(x) e^{-x} / D for the derivative case and e^{-x} / W for
    surviving additive spines, 0 if the additive spine was killed.
    """

    spine_positions: List[float]
    sibling_bundles: List[List[float]]
    deltas: List[float]
    value: float
    A_n: float
    weight: float
    pruned_mass: float = 0.0
    survived: bool = True
    additive: bool = False
    visits: int = 0
    replica: int = 0

    @property
    def D_value(self) -> float:
        return self.value


@dataclass
class _SpineContext:
    """Picklable per-experiment state shipped to replica workers."""

    model: ModelSpec
    renewal: RenewalTable | None
    step: StepLaw
    sampler: ConditionedSampler | None
    cfg: KillConfig

    @property
    def additive(self) -> bool:
        return self.sampler is None


def _spine_worker(ctx: _SpineContext, replica: int, rng: np.random.Generator) -> SpineRealization:
    cfg, model = ctx.cfg, ctx.model
    additive = ctx.additive
    r_eval = ctx.renewal.evaluator() if ctx.renewal is not None else _zero_renewal
    x = cfg.x
    positions = [x]
    bundles: List[List[float]] = []
    deltas: List[float] = []
    value = a_n = pruned = 0.0
    visits = 0

    for k in range(1, cfg.n + 1):
        here = positions[-1]
        spine_step, siblings = _reproduce(model, ctx.sampler, ctx.step, here, rng)
        bundles.append(siblings)
        deltas.append(sibling_delta(siblings))
        remaining = cfg.n - k
        for d in siblings:
            h = here + d
            if h < 0:
                continue
            contribution = r_eval(h) * math.exp(-h) if not additive else math.exp(-h)
            a_n += r_eval(h) * math.exp(-h)
            if remaining == 0:
                value += contribution
                continue
            if h >= cfg.v_cap:
                pruned += contribution
                continue
            try:
                totals = traverse(
                    model, r_eval, [h], remaining, cfg.v_cap - h, True,
                    cfg.node_budget, rng,
                )
            except ResourceError as e:
                raise ResourceError(
                    f"Sibling subtree at spine generation {k} (replica {replica}): {e}",
                    partial={**e.partial, "spine_generation": k},
                ) from e
            snap = totals.snapshots[0]
            visits += totals.visits
            if additive:
                value += snap.W_trunc
                pruned += snap.pruned_W_mass
            else:
                value += snap.D_trunc
                pruned += snap.pruned_D_mass
        positions.append(here + spine_step)
        if additive and positions[-1] < 0:
            return SpineRealization(
                positions, bundles, deltas, value=value, A_n=a_n, weight=0.0,
                pruned_mass=pruned, survived=False, additive=True, visits=visits,
                replica=replica,
            )

    top = positions[-1]
    if additive:
        value += math.exp(-top)
        weight = math.exp(-x) / value
    else:
        value += r_eval(top) * math.exp(-top)
        weight = r_eval(x) * math.exp(-x) / value
    return SpineRealization(
        positions, bundles, deltas, value=value, A_n=a_n, weight=weight,
        pruned_mass=pruned, survived=True, additive=additive, visits=visits,
        replica=replica,
    )


def simulate_spine_replica(
    model: ModelSpec, renewal: RenewalTable, cfg: KillConfig, rng: np.random.Generator
) -> SpineRealization:
    """Sample the spine, its siblings and their killed subtrees, and assemble D_n^(x).

    Raises:
        DomainError: If killing is disabled.
        ResourceError: If a sibling subtree exceeds the node budget.
    """
    ctx = _derivative_context(model, renewal, cfg)
    return _spine_worker(ctx, 0, rng)


def _derivative_context(model: ModelSpec, renewal: RenewalTable, cfg: KillConfig) -> _SpineContext:
    if not cfg.killing:
        raise DomainError("The spine measure needs a finite barrier offset")
    step = step_law(model)
    return _SpineContext(
        model=model, renewal=renewal, step=step,
        sampler=conditioned_sampler(renewal, step), cfg=cfg,
    )


def _additive_context(model: ModelSpec, cfg: KillConfig, renewal: RenewalTable | None) -> _SpineContext:
    if model.regime is not Regime.SUBCRITICAL:
        raise DomainError("The additive spine needs a subcritical model")
    if not cfg.killing:
        raise DomainError("The spine measure needs a finite barrier offset")
    return _SpineContext(
        model=model, renewal=renewal, step=step_law(model), sampler=None, cfg=cfg,
    )


def simulate_spine_replicas(
    model: ModelSpec,
    renewal: RenewalTable | None,
    cfg: KillConfig,
    replicas: int,
    seed: int,
    workers: int = 1,
    additive: bool = False,
) -> List[SpineRealization]:
    """Independent spine replicas in replica order; node-budget breaches are discarded.

    Derivative replicas need the renewal table; additive replicas use it only
    for the sibling functional A_n and accept ``None``.
    """
    if additive:
        ctx = _additive_context(model, cfg, renewal)
        return _run_spine(ctx, replicas, seed, workers, "spine-additive")
    if renewal is None:
        raise ValueError("Derivative spine replicas need a renewal table")
    ctx = _derivative_context(model, renewal, cfg)
    return _run_spine(ctx, replicas, seed, workers, "spine")


def _run_spine(
    ctx: _SpineContext, replicas: int, seed: int, workers: int, stage: str
) -> List[SpineRealization]:
    results = run_replicas(partial(_guarded_worker, ctx), replicas, seed, stage, workers)
    kept = [r for r in results if r is not None]
    if len(kept) < len(results):
        logger.warning(f"{len(results) - len(kept)} spine replicas exceeded the node budget")
    return kept


def _guarded_worker(ctx: _SpineContext, replica: int, rng: np.random.Generator) -> SpineRealization | None:
    try:
        return _spine_worker(ctx, replica, rng)
    except ResourceError as e:
        logger.warning(str(e))
        return None


def importance_tail(realizations: Sequence[SpineRealization], y_grid: Sequence[float]) -> pd.DataFrame:
    """P(value > y) per y from weighted spine replicas, with SE and effective sample size."""
    if not realizations:
        raise ValueError("No spine replicas")
    values = np.array([r.value for r in realizations])
    weights = np.array([r.weight for r in realizations])
    n = values.size
    rows = []
    for y in y_grid:
        terms = np.where(values > y, weights, 0.0)
        mean = float(terms.mean())
        se = float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        square = float(np.sum(terms ** 2))
        ess = float(terms.sum() ** 2 / square) if square > 0 else 0.0
        unreliable = ess < MIN_ESS
        if unreliable:
            logger.info(f"IS estimate at y = {y:.4g} unreliable (ESS {ess:.1f})")
        rows.append({"y": float(y), "estimate": mean, "SE": se, "ESS": ess, "unreliable": unreliable})
    return pd.DataFrame(rows, columns=TAIL_COLUMNS)


def _validate_grid(y_grid: Sequence[float]) -> None:
    ys = np.asarray(y_grid, dtype=float)
    if ys.size == 0 or np.any(ys <= 0) or np.any(np.diff(ys) <= 0):
        raise ValueError("y_grid must be positive and increasing")


def is_tail_estimate(
    model: ModelSpec,
    renewal: RenewalTable,
    cfg: KillConfig,
    y_grid: Sequence[float],
    replicas: int,
    seed: int,
    workers: int = 1,
) -> pd.DataFrame:
    """Importance-sampling estimates of P(D_n^(x) > y) over ``y_grid``.

    Points with ESS below 30 are flagged ``unreliable`` rather than dropped.
    """
    _validate_grid(y_grid)
    realizations = simulate_spine_replicas(model, renewal, cfg, replicas, seed, workers)
    return importance_tail(realizations, y_grid)


def additive_spine_estimate(
    model: ModelSpec,
    cfg: KillConfig,
    y_grid: Sequence[float],
    replicas: int,
    seed: int,
    workers: int = 1,
) -> pd.DataFrame:
    """Importance-sampling estimates of P(W_n^(x) > y) for a subcritical model.

    Uses P(W_n^(x) > y) = e^{-x} E[1{spine survives} 1{W > y} / W] with the
    spine on the positive-drift associated walk.
    """
    _validate_grid(y_grid)
    realizations = simulate_spine_replicas(
        model, None, cfg, replicas, seed, workers, additive=True
    )
    return importance_tail(realizations, y_grid)


def change_of_measure_check(
    realizations: Sequence[SpineRealization],
    statistics: Sequence[Callable[[float], float]] | None = None,
) -> pd.DataFrame:
    """Weighted spine means E_spine[g(value) * weight] for bounded statistics g.

    Each row estimates E[g(value) 1{value > 0}] under the original measure.
    The default statistics are 1, 1{value > median} and min(value, 1).
    """
    values = np.array([r.value for r in realizations])
    weights = np.array([r.weight for r in realizations])
    median = float(np.median(values))
    if statistics is None:
        named = {
            "one": lambda v: np.ones_like(v),
            "above_median": lambda v: (v > median).astype(float),
            "capped": lambda v: np.minimum(v, 1.0),
        }
    else:
        named = {f"g{i}": g for i, g in enumerate(statistics)}
    rows = []
    n = values.size
    for name, g in named.items():
        terms = np.asarray(g(values), dtype=float) * weights
        rows.append({
            "statistic": name, "estimate": float(terms.mean()),
            "SE": float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        })
    return pd.DataFrame(rows, columns=["statistic", "estimate", "SE"])


def default_y_grid(naive_values: Sequence[float], points: int = 12) -> np.ndarray:
    """Geometric grid from the naive median to 20x the naive 99.9th percentile."""
    arr = np.asarray(naive_values, dtype=float)
    positive = arr[arr > 0]
    if positive.size == 0:
        raise ValueError("Need positive naive samples to place the y grid")
    low = float(np.median(arr))
    if low <= 0:
        low = float(positive.min())
    high = 20.0 * float(np.quantile(arr, 0.999))
    if high <= low:
        high = 20.0 * low
    return np.geomspace(low, high, points)


def derivative_scale(renewal: RenewalTable, x: float) -> float:
    """R(x) e^{-x}, the mean of D_n^(x)."""
    return float(renewal_eval(renewal, x)) * math.exp(-x)
