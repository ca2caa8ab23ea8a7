import math

import numpy as np
import pytest

from app.brw.engine import KillConfig, simulate_replicas
from app.brw.errors import DomainError
from app.brw.model import Family, Regime, calibrate
from app.brw.spine import (
    TAIL_COLUMNS,
    additive_spine_estimate,
    change_of_measure_check,
    default_y_grid,
    derivative_scale,
    is_tail_estimate,
    sibling_delta,
    simulate_spine_replica,
    simulate_spine_replicas,
    spine_reproduce,
)
from app.brw.walk import RenewalTable, exact_lattice_renewal, step_law

A = math.acosh(2.0)


@pytest.fixture(scope="module")
def lattice():
    return calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)


@pytest.fixture(scope="module")
def table(lattice):
    return exact_lattice_renewal(step_law(lattice), 30.0)


@pytest.fixture(scope="module")
def subcritical():
    return calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 1.0}, Regime.SUBCRITICAL)


def test_sibling_delta():
    assert sibling_delta([0.0]) == pytest.approx(1.0)
    assert sibling_delta([1.0]) == pytest.approx(2.0 * math.exp(-1.0))
    assert sibling_delta([-1.0]) == pytest.approx(math.e)
    assert sibling_delta([]) == 0.0


def test_spine_leaves_zero_upwards(lattice, table):
    rng = np.random.default_rng(1)
    for _ in range(20):
        spine, siblings = spine_reproduce(lattice, table, 0.0, rng)
        assert spine == pytest.approx(A)
        assert len(siblings) == 1
        assert abs(siblings[0]) == pytest.approx(A)


def test_spine_reproduce_rejects_negative_height(lattice, table):
    with pytest.raises(DomainError, match="nonnegative"):
        spine_reproduce(lattice, table, -0.5, np.random.default_rng(0))


def test_spine_replica_weight(lattice, table):
    cfg = KillConfig(A, 3)
    realization = simulate_spine_replica(lattice, table, cfg, np.random.default_rng(4))
    assert len(realization.spine_positions) == 4
    assert len(realization.deltas) == 3
    assert min(realization.spine_positions) >= -1e-9
    assert realization.value > 0
    assert realization.weight == pytest.approx(2.0 * math.exp(-A) / realization.value)
    assert realization.D_value == realization.value


def test_spine_needs_a_barrier(lattice, table):
    with pytest.raises(DomainError, match="finite barrier"):
        simulate_spine_replica(lattice, table, KillConfig(math.inf, 3), np.random.default_rng(0))


def test_spine_weights_recover_survival_probability(lattice, table):
    cfg = KillConfig(A, 4)
    realizations = simulate_spine_replicas(lattice, table, cfg, 2000, seed=6)
    check = change_of_measure_check(realizations).set_index("statistic")
    assert list(check.index) == ["one", "above_median", "capped"]

    snapshots, _ = simulate_replicas(lattice, table, cfg, 4000, seed=6)
    alive = np.array([s.D_trunc > 0 for s in snapshots], dtype=float)
    naive_se = alive.std(ddof=1) / math.sqrt(alive.size)
    se = math.hypot(check.loc["one", "SE"], naive_se)
    assert abs(check.loc["one", "estimate"] - alive.mean()) <= 4 * se


def test_is_tail_is_nonincreasing(lattice, table):
    frame = is_tail_estimate(lattice, table, KillConfig(A, 4), [0.1, 0.5, 1.0, 2.0], 500, seed=2)
    assert list(frame.columns) == TAIL_COLUMNS
    assert np.all(np.diff(frame["estimate"].to_numpy()) <= 1e-15)
    assert (frame["SE"] >= 0).all()


def test_is_tail_rejects_bad_grid(lattice, table):
    with pytest.raises(ValueError, match="positive and increasing"):
        is_tail_estimate(lattice, table, KillConfig(A, 3), [1.0, 0.5], 10, seed=0)


def test_additive_spine_needs_subcritical_model(lattice):
    with pytest.raises(DomainError, match="subcritical"):
        additive_spine_estimate(lattice, KillConfig(1.0, 3), [0.5], 10, seed=0)


def test_additive_spine_weights(subcritical):
    cfg = KillConfig(1.0, 4)
    realizations = simulate_spine_replicas(subcritical, None, cfg, 300, seed=9, additive=True)
    for r in realizations:
        assert r.additive
        if r.survived:
            assert r.weight == pytest.approx(math.exp(-1.0) / r.value)
        else:
            assert r.weight == 0.0
    frame = additive_spine_estimate(subcritical, cfg, [0.1, 0.3], 300, seed=9)
    assert frame["estimate"].iloc[0] >= frame["estimate"].iloc[1]


def test_default_y_grid_is_geometric():
    samples = np.random.default_rng(0).exponential(1.0, 10_000)
    grid = default_y_grid(samples, points=5)
    assert grid.size == 5
    assert grid[0] == pytest.approx(np.median(samples))
    ratios = grid[1:] / grid[:-1]
    assert np.allclose(ratios, ratios[0])
    with pytest.raises(ValueError, match="positive naive samples"):
        default_y_grid([0.0, 0.0])


def test_derivative_scale(table):
    assert derivative_scale(table, A) == pytest.approx(2.0 * math.exp(-A))
    assert derivative_scale(table, 0.0) == pytest.approx(1.0)


def _naive_tail(values, y):
    hits = np.asarray(values) > y
    return hits.mean(), hits.std(ddof=1) / math.sqrt(hits.size)


def test_is_tail_agrees_with_naive_estimate(lattice, table):
    cfg = KillConfig(A, 4)
    ys = [0.2, 0.5]
    frame = is_tail_estimate(lattice, table, cfg, ys, 2000, seed=12)
    snapshots, _ = simulate_replicas(lattice, table, cfg, 4000, seed=13)
    for row, y in zip(frame.itertuples(), ys):
        naive, naive_se = _naive_tail([s.D_trunc for s in snapshots], y)
        assert naive > 0.05
        assert abs(row.estimate - naive) <= 4 * math.hypot(row.SE, naive_se)


def test_additive_spine_agrees_with_naive_estimate(subcritical):
    cfg = KillConfig(1.0, 4)
    ys = [0.1, 0.3]
    frame = additive_spine_estimate(subcritical, cfg, ys, 2000, seed=14)
    grid = np.round(np.arange(0.0, 20.0 + 0.025, 0.05), 12)
    # W_trunc does not read R; any table lets the engine run killed.
    placeholder = RenewalTable(grid, 1.0 + grid, slope=1.0, exact=False)
    snapshots, _ = simulate_replicas(subcritical, placeholder, cfg, 4000, seed=15)
    for row, y in zip(frame.itertuples(), ys):
        naive, naive_se = _naive_tail([s.W_trunc for s in snapshots], y)
        assert naive > 0.05
        assert abs(row.estimate - naive) <= 4 * math.hypot(row.SE, naive_se)


def test_siblings_follow_untilted_law(lattice, table):
    rng = np.random.default_rng(16)
    spines, siblings = [], []
    for _ in range(4000):
        spine, bundle = spine_reproduce(lattice, table, 2 * A, rng)
        spines.append(spine)
        siblings.extend(bundle)
    p = lattice.displacement_params["p"]
    up = np.mean(np.array(siblings) > 0)
    assert abs(up - p) <= 4 * math.sqrt(p * (1 - p) / len(siblings))
    # From 2a the conditioned spine goes up with probability 2/3.
    spine_up = np.mean(np.array(spines) > 0)
    assert abs(spine_up - 2 / 3) <= 4 * math.sqrt(2 / 9 / len(spines))
