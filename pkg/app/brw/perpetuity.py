"""Perpetuities driven by the conditioned walk, their exponential moments and excursion anatomy."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.brw.analysis import log_survival_fit
from app.brw.errors import DomainError
from app.brw.model import ModelSpec, Regime, sample_displacements
from app.brw.parallel import run_replicas
from app.brw.walk import (
    LATTICE_TOL,
    RenewalTable,
    conditioned_sampler,
    hitting_probability,
    renewal_eval,
    step_law,
)

logger = logging.getLogger(__name__)

PROBE_STARTS = (0.0, 1.0, 2.0, 5.0, 10.0)
MGF_TARGET = 2.0
CONVERGENCE_RATIO = 1e-6
LEVEL_COLUMNS = [
    "j", "mean_zeta", "L_slope", "L_r2", "Q1_rate", "return_freq", "return_se", "return_oracle",
]


class QKind(str, Enum):
    CONSTANT = "constant"
    SPINE_SIBLING_DELTA = "spine_sibling_delta"


class PerpetuityConfig(BaseModel):
    """Law of the multipliers Q and the run length of one perpetuity.

    ``SPINE_SIBLING_DELTA`` draws the siblings of a spine child from the
    original displacement law and sets Q = 1 + 2 c_R sum (1 + d_+) e^{-d}.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    q_kind: QKind = QKind.CONSTANT
    start_x: float = Field(default=0.0, ge=0.0)
    horizon: int = Field(default=100_000, ge=0)
    epsilon: float = Field(default=0.05, gt=0.0)
    c_R: float = Field(default=2.0, gt=0.0)


@dataclass
class PerpetuityPath:
    partial_sums: np.ndarray
    final: float
    tail_increment: float
    converged: bool


def draw_q(model: ModelSpec, cfg: PerpetuityConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    """Multipliers Q_{k+1}; the spine-sibling law does not depend on the walk height."""
    if cfg.q_kind is QKind.CONSTANT:
        return np.ones(size)
    siblings = sample_displacements(model, rng, (size, model.offspring_count - 1))
    delta = ((1.0 + np.maximum(siblings, 0.0)) * np.exp(-siblings)).sum(axis=1)
    return 1.0 + 2.0 * cfg.c_R * delta


def _run_block(
    model: ModelSpec,
    renewal: RenewalTable | None,
    cfg: PerpetuityConfig,
    count: int,
    rng: np.random.Generator,
    start_x: float,
    conditioned: bool,
    record: bool = False,
) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """Advance ``count`` independent paths for ``cfg.horizon`` steps.

    Returns final sums, the sums at the start of the last decade of steps,
    and (when ``record``) the partial sums of the first path.
    """
    step = step_law(model)
    sampler = conditioned_sampler(renewal, step) if conditioned else None
    positions = np.full(count, float(start_x))
    sums = np.zeros(count)
    at_decade = np.zeros(count)
    decade = cfg.horizon // 10
    trace: List[float] = []
    for k in range(cfg.horizon):
        if k == decade:
            at_decade = sums.copy()
        if conditioned:
            weight = renewal_eval(renewal, np.maximum(positions, 0.0)) * np.exp(-positions)
        else:
            weight = np.where(positions >= 0.0, np.exp(-np.maximum(positions, 0.0)), 0.0)
        sums = sums + weight * draw_q(model, cfg, count, rng)
        if record:
            trace.append(float(sums[0]))
        if conditioned:
            positions = positions + sampler.sample(positions, rng)
        else:
            positions = positions + step.sample(rng, count)
    if decade == 0:
        at_decade = np.zeros(count)
    return sums, at_decade, trace


def _path(sums: np.ndarray, at_decade: np.ndarray, trace: List[float]) -> PerpetuityPath:
    final = float(sums[0])
    increment = final - float(at_decade[0])
    converged = increment <= CONVERGENCE_RATIO * final
    if not converged:
        logger.info(f"Perpetuity not converged: last-decade increment {increment:.3e}")
    return PerpetuityPath(np.array(trace), final, increment, converged)


def _require_boundary(model: ModelSpec) -> None:
    if model.regime is not Regime.BOUNDARY:
        raise DomainError("The conditioned perpetuity needs a boundary model")


def simulate_perpetuity(
    model: ModelSpec, renewal: RenewalTable, cfg: PerpetuityConfig, rng: np.random.Generator
) -> PerpetuityPath:
    """Partial sums of sum_{k < horizon} R(S+_k) e^{-S+_k} Q_{k+1} along one path.

    The path counts as converged when the increment over the last decade of
    steps, [horizon / 10, horizon), is at most 1e-6 of the final value.

    Raises:
        DomainError: For subcritical models.
    """
    _require_boundary(model)
    return _path(*_run_block(model, renewal, cfg, 1, rng, cfg.start_x, True, record=True))


def positive_drift_perpetuity(
    model: ModelSpec, cfg: PerpetuityConfig, rng: np.random.Generator
) -> PerpetuityPath:
    """Partial sums of sum_k e^{-S_k} 1{S_k >= 0} Q_{k+1} along the unconditioned walk.

    Raises:
        DomainError: For boundary models.
    """
    if model.regime is not Regime.SUBCRITICAL:
        raise DomainError("The positive-drift perpetuity needs a subcritical model")
    return _path(*_run_block(model, None, cfg, 1, rng, cfg.start_x, False, record=True))


def _sample_worker(
    model: ModelSpec, renewal: RenewalTable | None, cfg: PerpetuityConfig, start_x: float,
    conditioned: bool, sizes: Sequence[int], block: int, rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    sums, at_decade, _ = _run_block(model, renewal, cfg, sizes[block], rng, start_x, conditioned)
    return sums, at_decade


def perpetuity_samples(
    model: ModelSpec,
    renewal: RenewalTable | None,
    cfg: PerpetuityConfig,
    replicas: int,
    seed: int,
    workers: int = 1,
    start_x: float | None = None,
    block_size: int = 1024,
) -> pd.DataFrame:
    """Final values of many independent perpetuities as ``replica,start_x,final,converged``.

    Paths are advanced in blocks of ``block_size``; block b owns the stream of
    replica index b, so results do not depend on ``workers``. Boundary models
    use the conditioned walk, subcritical models the positive-drift form.
    """
    if replicas < 1:
        raise ValueError("Need at least one replica")
    conditioned = model.regime is Regime.BOUNDARY
    if conditioned and renewal is None:
        raise ValueError("Boundary perpetuities need a renewal table")
    x0 = cfg.start_x if start_x is None else start_x
    sizes = [min(block_size, replicas - s) for s in range(0, replicas, block_size)]
    stage = f"perpetuity-{x0:g}"
    worker = partial(_sample_worker, model, renewal, cfg, x0, conditioned, sizes)
    blocks = run_replicas(worker, len(sizes), seed, stage, workers)
    finals = np.concatenate([b[0] for b in blocks])
    at_decade = np.concatenate([b[1] for b in blocks])
    converged = (finals - at_decade) <= CONVERGENCE_RATIO * finals
    return pd.DataFrame({
        "replica": np.arange(replicas), "start_x": x0, "final": finals, "converged": converged,
    })


class MgfPoint(BaseModel):
    epsilon: float
    x: float
    mgf: float
    se: float
    ci_high: float
    max_term_share: float
    unstable: bool


class MomentProbe(BaseModel):
    epsilon_star: float
    max_mgf: float
    max_ci_high: float
    margin_mgf: float
    report: List[MgfPoint]


def _mgf_points(finals: Dict[float, np.ndarray], epsilon: float) -> List[MgfPoint]:
    points = []
    for x, values in finals.items():
        terms = np.exp(epsilon * values)
        total = float(terms.sum())
        mean = float(terms.mean())
        se = float(terms.std(ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else 0.0
        share = float(terms.max() / total) if total > 0 else 0.0
        points.append(MgfPoint(
            epsilon=epsilon, x=x, mgf=mean, se=se, ci_high=mean + 1.96 * se,
            max_term_share=share, unstable=share > 0.5,
        ))
    return points


def probe_exponential_moment(
    model: ModelSpec,
    renewal: RenewalTable | None,
    cfg: PerpetuityConfig,
    replicas: int,
    seed: int,
    workers: int = 1,
    starts: Sequence[float] = PROBE_STARTS,
    iterations: int = 30,
) -> MomentProbe:
    """Largest epsilon with max over start points of E_x[exp(epsilon * perpetuity)] <= 2.

    The same samples serve every epsilon, so the empirical MGF is monotone in
    epsilon; the search doubles from ``cfg.epsilon`` until the target fails
    and then bisects.
    """
    finals = {
        float(x): perpetuity_samples(model, renewal, cfg, replicas, seed, workers, start_x=x)["final"].to_numpy()
        for x in starts
    }
    report: List[MgfPoint] = []

    def worst(epsilon: float) -> float:
        points = _mgf_points(finals, epsilon)
        report.extend(points)
        for p in points:
            if p.unstable:
                logger.warning(f"Unstable MGF estimate at epsilon = {epsilon:.4g}, x = {p.x:g}")
        return max(p.mgf for p in points)

    ok_eps, bad_eps = 0.0, None
    eps = cfg.epsilon
    for _ in range(iterations):
        if worst(eps) <= MGF_TARGET:
            ok_eps = eps
            eps *= 2.0
        else:
            bad_eps = eps
            break
    if bad_eps is not None:
        for _ in range(iterations):
            mid = 0.5 * (ok_eps + bad_eps)
            if worst(mid) <= MGF_TARGET:
                ok_eps = mid
            else:
                bad_eps = mid

    at_star = _mgf_points(finals, ok_eps)
    at_half = _mgf_points(finals, ok_eps / 2.0)
    report.extend(at_star)
    logger.info(f"Exponential moment probe: epsilon* = {ok_eps:.4g}")
    return MomentProbe(
        epsilon_star=ok_eps,
        max_mgf=max(p.mgf for p in at_star),
        max_ci_high=max(p.ci_high for p in at_star),
        margin_mgf=max(p.mgf for p in at_half),
        report=sorted(report, key=lambda p: (p.epsilon, p.x)),
    )


@dataclass
class ExcursionStats:
    """Per-level excursion counts, local times and per-excursion Q sums.

    Level j is the band [j w, (j + 1) w) with w = 1, or w = a on the lattice.
    An excursion starts in the band and ends once the chain reaches
    [(j + 2) w, inf). ``local_times[j]`` and ``q_sums[j]`` hold completed
    excursions only; ``zeta`` counts every started one.
    ``returns`` sums, per level, 1 for watched paths that fell below
    (j + 1) w within the horizon and the exact probability of a later fall
    from the final position otherwise; ``returns_sq`` sums their squares.
    """

    width: float
    zeta: np.ndarray
    local_times: List[List[int]]
    q_sums: List[List[float]]
    occupation: np.ndarray
    steps: int
    returns: np.ndarray
    returns_sq: np.ndarray
    watched: np.ndarray
    oracle: np.ndarray
    lag1: List[Tuple[float, int]] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return self.zeta.shape[1]

    def level_rows(self) -> pd.DataFrame:
        rows = []
        for j in range(self.levels):
            slope, r2, _ = log_survival_fit(self.local_times[j], (0.0, 0.999), discrete=True)
            q_slope, _, _ = log_survival_fit(self.q_sums[j], (0.5, 0.99))
            watched = int(self.watched[j])
            freq = float(self.returns[j] / watched) if watched else math.nan
            se = (
                math.sqrt(max(self.returns_sq[j] / watched - freq * freq, 0.0) / watched)
                if watched else math.nan
            )
            rows.append({
                "j": j, "mean_zeta": float(self.zeta[:, j].mean()),
                "L_slope": slope, "L_r2": r2, "Q1_rate": -q_slope,
                "return_freq": freq, "return_se": se,
                "return_oracle": float(self.oracle[j] / watched) if watched else math.nan,
            })
        return pd.DataFrame(rows, columns=LEVEL_COLUMNS)


def _lag1(sequences: List[List[float]]) -> Tuple[float, int]:
    """Pooled lag-1 correlation of consecutive per-excursion sums after the first."""
    first, second = [], []
    for seq in sequences:
        tail = seq[1:]
        first.extend(tail[:-1])
        second.extend(tail[1:])
    m = len(first)
    if m < 3 or np.std(first) == 0 or np.std(second) == 0:
        return math.nan, m
    return float(np.corrcoef(first, second)[0, 1]), m


def excursion_anatomy(
    model: ModelSpec,
    renewal: RenewalTable,
    start_x: float,
    j_max: int,
    replicas: int,
    rng: np.random.Generator,
    horizon: int = 10_000,
    q_kind: QKind = QKind.CONSTANT,
) -> ExcursionStats:
    """Decompose conditioned-walk paths into excursions from each level band.

    Besides counts and local times, the first completed excursion at each
    level starts a watch: the fraction of paths that later fall below
    (j + 1) w is compared with the hitting identity 1 - R(s - y) / R(s) at
    the exit position s.
    """
    _require_boundary(model)
    if j_max < 0:
        raise ValueError("j_max cannot be negative")
    if start_x < 0:
        raise DomainError("start_x must be nonnegative")
    width = model.a if model.is_lattice else 1.0
    levels = j_max + 1
    tol = LATTICE_TOL * width
    cfg = PerpetuityConfig(q_kind=q_kind, start_x=start_x, horizon=max(horizon, 1))
    step = step_law(model)
    sampler = conditioned_sampler(renewal, step)

    j_idx = np.arange(levels)
    lower = j_idx * width
    exit_at = (j_idx + 2) * width
    return_below = (j_idx + 1) * width

    positions = np.full(replicas, float(start_x))
    active = np.zeros((replicas, levels), dtype=bool)
    zeta = np.zeros((replicas, levels), dtype=np.int64)
    cur_l = np.zeros((replicas, levels), dtype=np.int64)
    cur_q = np.zeros((replicas, levels))
    occupation = np.zeros(levels, dtype=np.int64)
    watching = np.zeros((replicas, levels), dtype=bool)
    returned = np.zeros((replicas, levels), dtype=bool)
    oracle = np.zeros((replicas, levels))
    local_times: List[List[int]] = [[] for _ in range(levels)]
    q_sums: List[List[float]] = [[] for _ in range(levels)]
    per_replica: List[List[List[float]]] = [[[] for _ in range(replicas)] for _ in range(levels)]

    for _ in range(horizon):
        q = draw_q(model, cfg, replicas, rng)
        band = np.floor((positions + tol) / width).astype(np.int64)
        in_band = band[:, None] == j_idx[None, :]
        starting = in_band & ~active
        active |= starting
        zeta += starting
        cur_l += in_band
        cur_q += np.where(in_band, q[:, None], 0.0)
        occupation += in_band.sum(axis=0)
        returned |= watching & (positions[:, None] < return_below[None, :] - tol)

        positions = positions + sampler.sample(positions, rng)

        ending = active & (positions[:, None] >= exit_at[None, :] - tol)
        if ending.any():
            rows, cols = np.nonzero(ending)
            first_end = ending & (zeta == 1) & ~watching
            for r, c in zip(rows, cols):
                local_times[c].append(int(cur_l[r, c]))
                q_sums[c].append(float(cur_q[r, c]))
                per_replica[c][r].append(float(cur_q[r, c]))
            fr, fc = np.nonzero(first_end)
            if fr.size:
                s = positions[fr]
                y = return_below[fc]
                oracle[fr, fc] = [hitting_probability(renewal, float(si), float(yi)) for si, yi in zip(s, y)]
                watching[fr, fc] = True
            active &= ~ending
            cur_l[ending] = 0
            cur_q[ending] = 0.0

    returned |= watching & (positions[:, None] < return_below[None, :] - tol)
    terms = np.where(returned, 1.0, 0.0)
    pending = watching & ~returned
    if pending.any():
        pr, pc = np.nonzero(pending)
        terms[pr, pc] = [
            hitting_probability(renewal, max(float(positions[r]), float(return_below[c])), float(return_below[c]))
            for r, c in zip(pr, pc)
        ]
    terms = np.where(watching, terms, 0.0)

    stats = ExcursionStats(
        width=width, zeta=zeta, local_times=local_times, q_sums=q_sums,
        occupation=occupation, steps=horizon * replicas,
        returns=terms.sum(axis=0), returns_sq=(terms ** 2).sum(axis=0),
        watched=watching.sum(axis=0),
        oracle=np.where(watching, oracle, 0.0).sum(axis=0),
        lag1=[_lag1(per_replica[j]) for j in range(levels)],
    )
    logger.info(f"Excursion anatomy: {levels} levels of width {width:.4f}, {replicas} paths")
    return stats


def lag1_within_bound(stats: ExcursionStats, level: int) -> bool | None:
    """|rho| < 3 / sqrt(m) for the lag-1 correlation at ``level``; None without enough pairs."""
    rho, m = stats.lag1[level]
    if math.isnan(rho):
        return None
    return abs(rho) < 3.0 / math.sqrt(m)
