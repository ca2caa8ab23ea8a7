"""Depth-first simulation of the killed branching random walk.

No tree is materialized: an explicit stack holds (generation, position,
ancestral minimum) triples and the martingale sums are accumulated while
the stack drains, so memory stays O(n * offspring_count).
"""

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.brw.analysis import binomial_ci
from app.brw.errors import DomainError, ResourceError
from app.brw.model import ModelSpec, Regime, sample_displacements
from app.brw.parallel import run_replicas
from app.brw.walk import RenewalTable, renewal_eval

logger = logging.getLogger(__name__)

DEFAULT_V_OFFSET = 8.0
DEFAULT_NODE_BUDGET = 10**8

SNAPSHOT_COLUMNS = [
    "replica", "n", "x", "W", "D", "W_trunc", "D_trunc", "I_n",
    "pruned_W", "pruned_D", "alive", "pruned", "killed",
]


@dataclass(frozen=True)
class KillConfig:
    """Barrier offset x, target generation n and pruning height v_cap.

    ``x = math.inf`` disables killing; ``v_cap`` is then measured on V(u)
    alone. ``v_cap`` defaults to ``x + 8`` (or 8 without killing).
    """

    x: float
    n: int
    v_cap: float | None = None
    node_budget: int = DEFAULT_NODE_BUDGET

    def __post_init__(self):
        if math.isnan(self.x) or self.x < 0:
            raise ValueError("Barrier offset x must be nonnegative")
        if self.n < 0:
            raise ValueError("Generation n cannot be negative")
        if self.node_budget <= 0:
            raise ValueError("Node budget must be positive")
        if self.v_cap is None:
            default = DEFAULT_V_OFFSET if math.isinf(self.x) else self.x + DEFAULT_V_OFFSET
            object.__setattr__(self, "v_cap", default)
        if self.killing and self.v_cap <= self.x:
            raise ValueError("v_cap must exceed x")
        if not self.killing and self.v_cap <= 0:
            raise ValueError("v_cap must be positive when killing is disabled")

    @property
    def killing(self) -> bool:
        return math.isfinite(self.x)

    @property
    def prune_height(self) -> float:
        """Pruning threshold on V(u)."""
        return self.v_cap - self.x if self.killing else self.v_cap


@dataclass
class MartingaleSnapshot:
    """Martingale values of one replica at generation n.

    ``I_n`` is the lowest V(u) among generated particles with |u| <= n. Killed
    and pruned particles count but their descendants are never generated, so on
    a killed or pruned tree it can sit above inf_{|u|<=n} V(u).
    """

    n: int
    x: float
    W_n: float
    D_n: float
    W_trunc: float
    D_trunc: float
    I_n: float
    pruned_W_mass: float
    pruned_D_mass: float
    alive_count: int
    pruned_count: int
    killed_count: int
    replica: int = 0

    def as_row(self) -> dict:
        return {
            "replica": self.replica, "n": self.n, "x": self.x,
            "W": self.W_n, "D": self.D_n,
            "W_trunc": self.W_trunc, "D_trunc": self.D_trunc, "I_n": self.I_n,
            "pruned_W": self.pruned_W_mass, "pruned_D": self.pruned_D_mass,
            "alive": self.alive_count, "pruned": self.pruned_count,
            "killed": self.killed_count,
        }


@dataclass
class TreeTotals:
    """Everything one traversal produces.

    ``snapshots`` holds one entry per barrier offset; the ``untruncated``
    fields ledger pruned particles without any barrier indicator.
    """

    snapshots: List[MartingaleSnapshot]
    W_n: float
    D_n: float
    I_n: float
    generation_n_count: int
    pruned_W_untruncated: float
    pruned_D_untruncated: float
    pruned_untruncated: int
    visits: int


class DisplacementStream:
    """Hands out per-child displacements from pre-drawn blocks.

    Blocks start small and double up to ``max_block`` so that tiny subtrees
    do not draw thousands of unused variates.
    """

    def __init__(
        self, model: ModelSpec, rng: np.random.Generator, block: int = 64, max_block: int = 8192
    ):
        self._model = model
        self._rng = rng
        self._block = block
        self._max_block = max_block
        self._buffer: List[float] = []
        self._pos = 0

    def take(self, k: int) -> List[float]:
        if self._pos + k > len(self._buffer):
            rest = self._buffer[self._pos:]
            fresh = sample_displacements(self._model, self._rng, max(self._block, k)).tolist()
            self._block = min(2 * self._block, self._max_block)
            self._buffer = rest + fresh
            self._pos = 0
        out = self._buffer[self._pos:self._pos + k]
        self._pos += k
        return out


def traverse(
    model: ModelSpec,
    r_eval: Callable[[float], float],
    xs: Sequence[float],
    n: int,
    prune_height: float,
    killing: bool,
    node_budget: int,
    rng: np.random.Generator,
) -> TreeTotals:
    """Simulate one tree and evaluate the truncated sums for every offset in ``xs``.

    Particles are killed when ``max(xs) + V < 0`` (if killing) and pruned
    when ``V >= prune_height`` before generation n. The sums for an offset x
    keep the indicator ``x + min ancestor V >= 0``.
    """
    exp = math.exp
    offsets = list(xs)
    m = len(offsets)
    kill_level = -max(offsets) if (killing and offsets) else -math.inf
    k = model.offspring_count
    stream = DisplacementStream(model, rng)

    w_n = d_n = 0.0
    pw_n = pd_n = 0.0
    n_count = pruned_n = 0
    lowest = 0.0
    w_t = [0.0] * m
    d_t = [0.0] * m
    pw_t = [0.0] * m
    pd_t = [0.0] * m
    alive = [0] * m
    pruned = [0] * m
    killed = [0] * m
    visits = 0

    stack: List[Tuple[int, float, float]] = [(0, 0.0, 0.0)]
    while stack:
        gen, v, vmin = stack.pop()
        visits += 1
        if visits > node_budget:
            raise ResourceError(
                f"Node budget {node_budget} exceeded at generation {gen}",
                partial={
                    "visits": visits, "generation_n": n_count,
                    "pruned": pruned_n, "frontier": len(stack),
                },
            )
        if gen == n:
            e = exp(-v)
            w_n += e
            d_n += v * e
            n_count += 1
            for i in range(m):
                x = offsets[i]
                if x + vmin >= 0.0:
                    ex = e * exp(-x)
                    w_t[i] += ex
                    d_t[i] += r_eval(x + v) * ex
                    alive[i] += 1
            continue

        for step in stream.take(k):
            c = v + step
            cmin = c if c < vmin else vmin
            if c < lowest:
                lowest = c
            for i in range(m):
                if offsets[i] + vmin >= 0.0 and offsets[i] + c < 0.0:
                    killed[i] += 1
            if c < kill_level:
                continue
            if gen + 1 < n and c >= prune_height:
                e = exp(-c)
                pw_n += e
                pd_n += c * e
                pruned_n += 1
                for i in range(m):
                    x = offsets[i]
                    if x + cmin >= 0.0:
                        ex = e * exp(-x)
                        pw_t[i] += ex
                        pd_t[i] += r_eval(x + c) * ex
                        pruned[i] += 1
                continue
            stack.append((gen + 1, c, cmin))

    snapshots = [
        MartingaleSnapshot(
            n=n, x=x, W_n=w_n, D_n=d_n, W_trunc=w_t[i], D_trunc=d_t[i],
            I_n=lowest, pruned_W_mass=pw_t[i], pruned_D_mass=pd_t[i],
            alive_count=alive[i], pruned_count=pruned[i], killed_count=killed[i],
        )
        for i, x in enumerate(offsets)
    ]
    return TreeTotals(
        snapshots=snapshots, W_n=w_n, D_n=d_n, I_n=lowest,
        generation_n_count=n_count, pruned_W_untruncated=pw_n,
        pruned_D_untruncated=pd_n, pruned_untruncated=pruned_n, visits=visits,
    )


def _unused_renewal(u: float) -> float:
    return 0.0


def simulate_replica(
    model: ModelSpec, renewal: RenewalTable | None, cfg: KillConfig, rng: np.random.Generator
) -> MartingaleSnapshot:
    """Evaluate W_n, D_n and their killed versions on one random tree.

    Killed particles (x + V < 0) drop their subtree; pruned particles
    (x + V >= v_cap) drop it too but log their expected contribution,
    e^{-(x+V)} for W and R(x+V) e^{-(x+V)} for D, as a bias certificate.
    With ``x = inf`` nothing is killed, the truncated sums are zero and the
    certificate logs the untruncated masses e^{-V} and V e^{-V}; ``renewal``
    may then be None.

    Raises:
        ResourceError: If the node budget is exceeded; carries partial counters.
    """
    if cfg.killing:
        if renewal is None:
            raise ValueError("Killed runs need a renewal table")
        totals = traverse(
            model, renewal.evaluator(), [cfg.x], cfg.n, cfg.prune_height,
            True, cfg.node_budget, rng,
        )
        return totals.snapshots[0]

    totals = traverse(
        model, _unused_renewal, [], cfg.n, cfg.prune_height,
        False, cfg.node_budget, rng,
    )
    return MartingaleSnapshot(
        n=cfg.n, x=math.inf, W_n=totals.W_n, D_n=totals.D_n,
        W_trunc=0.0, D_trunc=0.0, I_n=totals.I_n,
        pruned_W_mass=totals.pruned_W_untruncated,
        pruned_D_mass=totals.pruned_D_untruncated,
        alive_count=totals.generation_n_count,
        pruned_count=totals.pruned_untruncated,
        killed_count=0,
    )


def simulate_replica_grid(
    model: ModelSpec,
    renewal: RenewalTable,
    xs: Sequence[float],
    n: int,
    rng: np.random.Generator,
    v_offset: float = DEFAULT_V_OFFSET,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> List[MartingaleSnapshot]:
    """Truncated martingales for several barrier offsets on one shared tree.

    The tree is killed at the largest offset and pruned at V >= v_offset, so
    every offset sees the same randomness and ``W_trunc`` is monotone in x.
    """
    if not xs:
        raise ValueError("Need at least one barrier offset")
    if min(xs) < 0 or not all(math.isfinite(x) for x in xs):
        raise ValueError("Barrier offsets must be finite and nonnegative")
    if v_offset <= 0:
        raise ValueError("v_offset must be positive")
    totals = traverse(
        model, renewal.evaluator(), sorted(xs), n, v_offset, True, node_budget, rng
    )
    by_x = {s.x: s for s in totals.snapshots}
    return [by_x[x] for x in xs]


def _engine_worker(
    model: ModelSpec, renewal: RenewalTable | None, cfg: KillConfig, replica: int,
    rng: np.random.Generator,
) -> MartingaleSnapshot | None:
    try:
        snapshot = simulate_replica(model, renewal, cfg, rng)
    except ResourceError as e:
        logger.warning(f"Replica {replica} discarded: {e} ({e.partial})")
        return None
    snapshot.replica = replica
    return snapshot


def simulate_replicas(
    model: ModelSpec,
    renewal: RenewalTable | None,
    cfg: KillConfig,
    replicas: int,
    seed: int,
    workers: int = 1,
    stage: str = "engine",
) -> Tuple[List[MartingaleSnapshot], int]:
    """Run independent replicas; returns (snapshots in replica order, discarded count)."""
    worker = partial(_engine_worker, model, renewal, cfg)
    results = run_replicas(worker, replicas, seed, stage, workers)
    snapshots = [s for s in results if s is not None]
    discarded = len(results) - len(snapshots)
    if discarded:
        logger.warning(f"{discarded} of {replicas} replicas exceeded the node budget")
    return snapshots, discarded


def snapshots_frame(snapshots: Sequence[MartingaleSnapshot]) -> pd.DataFrame:
    """Per-replica snapshots in the public CSV column order."""
    return pd.DataFrame([s.as_row() for s in snapshots], columns=SNAPSHOT_COLUMNS)


class MeanEstimate(BaseModel):
    mean: float
    se: float


class EngineSummary(BaseModel):
    n: int
    x: float
    replicas: int
    discarded: int
    W: MeanEstimate
    D: MeanEstimate
    W_trunc: MeanEstimate
    D_trunc: MeanEstimate
    pruned_W: MeanEstimate
    pruned_D: MeanEstimate
    target_W: float
    target_D: float | None
    w_identity_holds: bool
    d_identity_holds: bool | None
    certificate_relative: float
    extinct_fraction: float


def _mean_se(values: np.ndarray) -> MeanEstimate:
    if values.size < 2:
        return MeanEstimate(mean=float(values.mean()) if values.size else 0.0, se=0.0)
    return MeanEstimate(
        mean=float(values.mean()), se=float(values.std(ddof=1) / math.sqrt(values.size))
    )


def summarize(
    snapshots: Sequence[MartingaleSnapshot],
    renewal: RenewalTable | None,
    cfg: KillConfig,
    discarded: int = 0,
) -> EngineSummary:
    """Means, standard errors and the martingale identity checks.

    With killing: ``E[W_trunc + pruned_W] <= e^{-x}`` (supermartingale) and
    ``E[D_trunc + pruned_D] = R(x) e^{-x}`` (martingale). Without killing:
    ``E[W_n + pruned_W] = 1``.
    """
    if not snapshots:
        raise ValueError("No snapshots to summarize")
    frame = snapshots_frame(snapshots)
    col = lambda name: frame[name].to_numpy(dtype=float)  # noqa: E731

    if cfg.killing:
        target_w = math.exp(-cfg.x)
        target_d = renewal_eval(renewal, cfg.x) * target_w
        w_total = _mean_se(col("W_trunc") + col("pruned_W"))
        d_total = _mean_se(col("D_trunc") + col("pruned_D"))
        w_ok = w_total.mean <= target_w + 3.0 * w_total.se
        d_ok = abs(d_total.mean - target_d) <= 3.0 * d_total.se + 1e-12
        certificate = float(col("pruned_D").mean() / target_d)
    else:
        target_w, target_d, d_ok = 1.0, None, None
        w_total = _mean_se(col("W") + col("pruned_W"))
        w_ok = abs(w_total.mean - 1.0) <= 3.0 * w_total.se + 1e-12
        certificate = float(col("pruned_W").mean())

    return EngineSummary(
        n=cfg.n, x=cfg.x, replicas=len(snapshots), discarded=discarded,
        W=_mean_se(col("W")), D=_mean_se(col("D")),
        W_trunc=_mean_se(col("W_trunc")), D_trunc=_mean_se(col("D_trunc")),
        pruned_W=_mean_se(col("pruned_W")), pruned_D=_mean_se(col("pruned_D")),
        target_W=target_w, target_D=target_d,
        w_identity_holds=bool(w_ok), d_identity_holds=None if d_ok is None else bool(d_ok),
        certificate_relative=certificate,
        extinct_fraction=float((col("alive") == 0).mean()),
    )


class MinimumTailResult(BaseModel):
    x: float
    z: float
    n: int
    replicas: int
    hits: int
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    bound: float
    bound_holds: bool
    certificate: float


def _minimum_worker(
    model: ModelSpec, x: float, z: float, n: int, gap: float, node_budget: int,
    replica: int, rng: np.random.Generator,
) -> Tuple[bool, float]:
    """Whether x + I_n <= z on one tree, plus the pruned-probability certificate."""
    level = z - x
    if 0.0 <= level:
        return True, 0.0
    kappa = model.kappa
    prune_at = level + gap
    stream = DisplacementStream(model, rng)
    certificate = 0.0
    visits = 0
    stack: List[Tuple[int, float]] = [(0, 0.0)]
    while stack:
        gen, v = stack.pop()
        visits += 1
        if visits > node_budget:
            raise ResourceError(f"Node budget {node_budget} exceeded", partial={"visits": visits})
        if gen == n:
            continue
        for step in stream.take(model.offspring_count):
            c = v + step
            if c <= level:
                return True, certificate
            if gen + 1 < n and c >= prune_at:
                # P(subtree from height x + c ever reaches z) <= exp(-kappa (x + c - z)).
                certificate += math.exp(-kappa * (c - level))
                continue
            stack.append((gen + 1, c))
    return False, certificate


def minimum_tail_experiment(
    model: ModelSpec,
    x: float,
    z: float,
    n: int,
    replicas: int,
    seed: int,
    workers: int = 1,
    gap: float = 10.0,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> MinimumTailResult:
    """Estimate P(x + I_n <= z) and compare it with the bound exp(-kappa (x - z)).

    Particles more than ``gap`` above the target level are pruned; their
    chance of still reaching it is bounded by the same exponential bound and
    summed into ``certificate`` (mean per replica).

    Raises:
        DomainError: Unless 0 <= z <= x and the model is subcritical.
    """
    if model.regime is not Regime.SUBCRITICAL:
        raise DomainError("The minimum bound needs a subcritical model")
    if not 0.0 <= z <= x:
        raise DomainError("Need 0 <= z <= x")
    if replicas < 1:
        raise ValueError("Need at least one replica")
    worker = partial(_minimum_worker, model, x, z, n, gap, node_budget)
    results = run_replicas(worker, replicas, seed, "minimum", workers)
    hits = sum(1 for hit, _ in results if hit)
    certificate = float(np.mean([c for _, c in results]))
    estimate = hits / replicas
    se = math.sqrt(max(estimate * (1.0 - estimate), 0.0) / replicas)
    ci_low, ci_high = binomial_ci(hits, replicas)
    bound = math.exp(-model.kappa * (x - z)) if math.isfinite(model.kappa) else float(x == z)
    return MinimumTailResult(
        x=x, z=z, n=n, replicas=replicas, hits=hits, estimate=estimate, se=se,
        ci_low=ci_low, ci_high=ci_high, bound=bound,
        bound_holds=bool(estimate <= bound + 3.0 * se), certificate=certificate,
    )
