"""Quadrature solution of the generation recursion for psi_n(theta, x) = ln E[exp(theta W_n^(x))].

Decomposing W_n^(x) at generation 1 gives, for two iid children,

    psi_n(theta, x) = 2 ln E_Z[g(x + Z)],  g(y) = exp(psi_{n-1}(theta, y)) 1{y >= 0} + 1{y < 0},

starting from psi_0(theta, x) = theta e^{-x}.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from pydantic import BaseModel
from scipy import stats

from app.brw.errors import DomainError
from app.brw.model import ModelSpec, Regime

logger = logging.getLogger(__name__)

QUADRATURE_NODES = 256
QUADRATURE_SDS = 8.0
X_SPACING = 0.05
X_MAX = 12.0
DIVERGENCE = 50.0
MONOTONE_TOL = 1e-9
CERTIFIED_THETA = 0.01


def default_theta_grid() -> np.ndarray:
    return np.concatenate([[0.0, 1e-6], np.geomspace(1e-3, 4.0, 48)])


def default_x_grid(model: ModelSpec, x_max: float = X_MAX) -> np.ndarray:
    """Grid on [0, x_max]; lattice grids put every multiple of a on a node."""
    if model.is_lattice:
        per_step = max(1, math.ceil(model.a / X_SPACING))
        h = model.a / per_step
    else:
        h = X_SPACING
    return np.arange(int(math.floor(x_max / h + 1e-9)) + 1) * h


@dataclass
class MgfTable:
    """psi values indexed as ``psi[n, theta, x]``.

    Rows of theta whose recursion crossed the divergence sentinel hold ``inf``
    from the generation where that happened.
    """

    theta_grid: np.ndarray
    x_grid: np.ndarray
    psi: np.ndarray
    increments: np.ndarray
    frontier: float
    diverged: np.ndarray
    monotone_in_n: bool
    monotone_in_theta: bool
    antitone_in_x: bool
    converged_at: int | None = None
    rho: float | None = None
    K: float | None = None
    theta_bar: float | None = None
    notes: list = field(default_factory=list)

    @property
    def n_max(self) -> int:
        return self.psi.shape[0] - 1

    def finite_rows(self) -> np.ndarray:
        return ~self.diverged

    def value(self, theta: float, x: float, n: int | None = None) -> float:
        """psi_n at a grid theta, interpolated in x (asymptote beyond the grid)."""
        n = self.n_max if n is None else n
        hits = np.flatnonzero(np.isclose(self.theta_grid, theta, rtol=1e-12, atol=0.0))
        if hits.size == 0:
            raise ValueError(f"theta = {theta} is not on the grid")
        return float(_interp_row(self.psi[n, hits[0]][None, :], self.x_grid,
                                 np.array([theta]), np.array([[x]]))[0, 0])


def _interp_row(
    psi_rows: np.ndarray, x_grid: np.ndarray, thetas: np.ndarray, ys: np.ndarray
) -> np.ndarray:
    """Evaluate psi rows at positions ``ys`` (shape (X, M)), one slice per theta."""
    out = np.empty((psi_rows.shape[0],) + ys.shape)
    beyond = ys > x_grid[-1]
    for i, theta in enumerate(thetas):
        inside = np.interp(ys, x_grid, psi_rows[i])
        out[i] = np.where(beyond, theta * np.exp(-ys), inside)
    return out


def _gaussian_nodes(model: ModelSpec, x_grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Positions x + z and weights for the surviving part z >= -x of each x node."""
    mu, sigma = model.mu, model.sigma
    lo, hi = mu - QUADRATURE_SDS * sigma, mu + QUADRATURE_SDS * sigma
    t, w = np.polynomial.legendre.leggauss(QUADRATURE_NODES)
    start = np.maximum(-x_grid, lo)[:, None]
    half = np.maximum(hi - start, 0.0) / 2.0
    z = half * t[None, :] + start + half
    weights = half * w[None, :] * stats.norm.pdf(z, mu, sigma)
    return x_grid[:, None] + z, weights


def _lattice_nodes(model: ModelSpec, x_grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, p = model.a, model.p
    ys = np.stack([x_grid + a, x_grid - a], axis=1)
    weights = np.where(ys >= -1e-12, np.array([p, 1.0 - p])[None, :], 0.0)
    return np.maximum(ys, 0.0), weights


def mgf_recursion(
    model: ModelSpec,
    theta_grid: np.ndarray | None = None,
    x_grid: np.ndarray | None = None,
    n_max: int = 40,
    tolerance: float = 1e-10,
) -> MgfTable:
    """Iterate the psi recursion from psi_0 = theta e^{-x} up to generation n_max.

    Gaussian expectations use 256-node Gauss-Legendre quadrature on
    [mu - 8 sigma, mu + 8 sigma] restricted to the surviving half-line; the
    lattice expectation is an exact two-term sum. The recursion works with
    ``expm1``/``log1p`` so tiny theta keeps full relative precision.

    Raises:
        DomainError: For boundary models or grids with negative entries.
    """
    if model.regime is not Regime.SUBCRITICAL:
        raise DomainError("The MGF recursion is set up for subcritical models")
    if n_max < 0:
        raise ValueError("n_max cannot be negative")
    thetas = default_theta_grid() if theta_grid is None else np.asarray(theta_grid, dtype=float)
    xs = default_x_grid(model) if x_grid is None else np.asarray(x_grid, dtype=float)
    if thetas.size == 0 or np.any(thetas < 0) or np.any(np.diff(thetas) <= 0):
        raise DomainError("theta grid must be nonnegative and increasing")
    if xs.size < 2 or np.any(xs < 0) or np.any(np.diff(xs) <= 0):
        raise DomainError("x grid must be nonnegative and increasing")

    ys, weights = _lattice_nodes(model, xs) if model.is_lattice else _gaussian_nodes(model, xs)
    psi = np.empty((n_max + 1, thetas.size, xs.size))
    psi[0] = thetas[:, None] * np.exp(-xs)[None, :]
    diverged = np.zeros(thetas.size, dtype=bool)
    increments = np.zeros(n_max)
    converged_at = None

    for n in range(1, n_max + 1):
        live = ~diverged
        psi[n] = np.inf
        if live.any():
            previous = _interp_row(psi[n - 1, live], xs, thetas[live], ys)
            with np.errstate(over="ignore"):
                excess = (np.expm1(previous) * weights[None, :, :]).sum(axis=2)
            psi[n, live] = 2.0 * np.log1p(excess)
        blown = live & (psi[n].max(axis=1) > DIVERGENCE)
        if blown.any():
            diverged |= blown
            psi[n, blown] = np.inf
        finite = ~diverged
        if finite.any():
            increments[n - 1] = float(np.max(np.abs(psi[n, finite] - psi[n - 1, finite])))
        if converged_at is None and increments[n - 1] < tolerance:
            converged_at = n

    finite = ~diverged
    frontier = float(thetas[diverged].min()) if diverged.any() else math.inf
    if diverged.any():
        logger.info(f"psi diverged for theta >= {frontier:.4g}")

    block = psi[:, finite]
    monotone_n = bool(np.all(np.diff(block, axis=0) >= -MONOTONE_TOL)) if n_max else True
    monotone_theta = bool(np.all(np.diff(block, axis=1) >= -MONOTONE_TOL))
    antitone_x = bool(np.all(np.diff(block, axis=2) <= MONOTONE_TOL))
    table = MgfTable(
        theta_grid=thetas, x_grid=xs, psi=psi, increments=increments, frontier=frontier,
        diverged=diverged, monotone_in_n=monotone_n, monotone_in_theta=monotone_theta,
        antitone_in_x=antitone_x, converged_at=converged_at,
    )
    for name, ok in (("n", monotone_n), ("theta", monotone_theta), ("x", antitone_x)):
        if not ok:
            table.notes.append(f"monotonicity in {name} violated beyond {MONOTONE_TOL}")
            logger.warning(f"MGF table: monotonicity in {name} violated")
    if converged_at is None and n_max:
        logger.warning(f"MGF recursion not converged: last increment {increments[-1]:.3e}")
    return table


class BoundCertificate(BaseModel):
    K: float
    theta_bar: float
    rho: float
    holds: bool
    generations: int


def _required_k(table: MgfTable, rho: float) -> np.ndarray:
    """Smallest K making the bound hold for each theta row, over all n and x."""
    thetas = table.theta_grid[:, None]
    linear = thetas * np.exp(-table.x_grid)[None, :]
    scale = thetas ** rho * np.exp(-rho * table.x_grid)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        excess = table.psi - linear[None] - 1e-12 * linear[None]
        need = np.where(excess > 0, excess / scale[None], 0.0)
    need = need.max(axis=(0, 2))
    need[table.theta_grid == 0.0] = 0.0
    need[table.diverged] = np.inf
    return need


def certify_lemma21_bound(
    table: MgfTable, rho: float, k_cap: float = 1e8
) -> BoundCertificate:
    """Certify psi_n(theta, x) <= theta e^{-x} + K theta^rho e^{-rho x} for theta <= theta_bar.

    K for a candidate theta_bar is the maximum required over all grid rows up
    to it, so it only grows with theta_bar; the largest grid theta_bar with
    ``K <= k_cap`` is found by bisection over the grid index.
    """
    if not 1.0 < rho <= 2.0:
        raise ValueError("rho must lie in (1, 2]")
    running = np.maximum.accumulate(_required_k(table, rho))
    ok = running <= k_cap
    if not ok[0]:
        return BoundCertificate(K=math.inf, theta_bar=0.0, rho=rho, holds=False,
                                generations=table.n_max)
    lo, hi = 0, table.theta_grid.size - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ok[mid]:
            lo = mid
        else:
            hi = mid - 1
    theta_bar = float(table.theta_grid[lo])
    k_value = float(running[lo])
    holds = theta_bar >= CERTIFIED_THETA and math.isfinite(k_value)
    table.rho, table.K, table.theta_bar = rho, k_value, theta_bar
    logger.info(f"Bound certificate: K = {k_value:.4g}, theta_bar = {theta_bar:.4g}, holds = {holds}")
    return BoundCertificate(
        K=k_value, theta_bar=theta_bar, rho=rho, holds=holds, generations=table.n_max
    )
