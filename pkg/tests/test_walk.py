import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from app.brw.errors import DomainError
from app.brw.model import Family, Regime, calibrate
from app.brw.walk import (
    ConditionedSampler,
    RenewalTable,
    StepKind,
    StepLaw,
    conditioned_step,
    estimate_renewal,
    exact_lattice_renewal,
    harmonicity_residuals,
    hitting_frequency,
    hitting_probability,
    renewal_eval,
    simulate_conditioned_walk,
    simulate_walk,
    step_law,
)

A = math.acosh(2.0)


@pytest.fixture
def lattice_step():
    return step_law(calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY))


@pytest.fixture
def lattice_table(lattice_step):
    return exact_lattice_renewal(lattice_step, 20.0)


@pytest.fixture
def gaussian_step():
    return step_law(calibrate(Family.GAUSSIAN_BINARY, {}, Regime.BOUNDARY))


@pytest.fixture
def linear_table():
    grid = np.round(np.arange(0.0, 15.0 + 0.025, 0.05), 12)
    return RenewalTable(grid, 1.0 + 1.2 * grid, slope=1.2, exact=False)


def test_boundary_steps_are_centered(lattice_step):
    gaussian = step_law(calibrate(Family.GAUSSIAN_BINARY, {}, Regime.BOUNDARY))
    assert gaussian.kind is StepKind.NORMAL
    assert gaussian.mean == pytest.approx(0.0, abs=1e-12)
    assert lattice_step.p_up == pytest.approx(0.5)
    assert lattice_step.mean == pytest.approx(0.0, abs=1e-12)
    assert lattice_step.span == pytest.approx(A)


def test_exact_lattice_renewal_counts_down_steps(lattice_table):
    for k in range(6):
        assert renewal_eval(lattice_table, k * A) == pytest.approx(k + 1)
    assert renewal_eval(lattice_table, 0.5 * A) == pytest.approx(1.0)
    assert renewal_eval(lattice_table, 40 * A) == pytest.approx(41)


def test_evaluator_agrees_with_renewal_eval(lattice_table):
    fast = lattice_table.evaluator()
    for u in (0.0, 0.3, A, 2.5 * A, 7 * A):
        assert fast(u) == pytest.approx(renewal_eval(lattice_table, u))


def test_renewal_eval_rejects_negative_argument(lattice_table):
    with pytest.raises(DomainError, match="only defined on"):
        renewal_eval(lattice_table, -0.1)


def test_renewal_table_rebuilds_from_frame(lattice_table):
    rebuilt = RenewalTable.from_frame(lattice_table.to_frame())
    assert rebuilt.exact
    assert renewal_eval(rebuilt, 3 * A) == pytest.approx(4.0)


def test_from_frame_rejects_wrong_columns(lattice_table):
    frame = lattice_table.to_frame().rename(columns={"R": "value"})
    with pytest.raises(ValueError, match="columns u, R, exact_flag"):
        RenewalTable.from_frame(frame)


def test_estimate_renewal_rejects_negative_drift():
    step = StepLaw(StepKind.NORMAL, mean=-1.0, variance=1.0)
    with pytest.raises(DomainError, match="nonnegative drift"):
        estimate_renewal(step, 5.0, 1000, np.random.default_rng(0))


def test_monte_carlo_renewal_for_positive_drift():
    step = step_law(calibrate(Family.GAUSSIAN_BINARY, {"sigma2": 1.0}, Regime.SUBCRITICAL))
    assert step.mean > 0
    table = estimate_renewal(step, 2.0, 2000, np.random.default_rng(11), bootstrap=20)
    assert not table.exact
    assert table.values[0] >= 1.0
    assert np.all(np.diff(table.values) >= 0)
    assert table.se.shape == table.values.shape
    assert table.capped == 0


def test_exact_table_is_harmonic(lattice_table, lattice_step):
    residuals = harmonicity_residuals(lattice_table, lattice_step, np.random.default_rng(0))
    assert residuals["ok"].all()
    assert residuals["residual"].max() < 1e-12


def test_hitting_probability_on_lattice(lattice_table):
    assert hitting_probability(lattice_table, 2 * A, A) == pytest.approx(1.0 / 3.0)
    assert hitting_probability(lattice_table, A, 0.0) == pytest.approx(0.0)


def test_hitting_probability_rejects_y_above_x(lattice_table):
    with pytest.raises(DomainError, match="must not exceed x"):
        hitting_probability(lattice_table, 1.0, 2.0)


def test_conditioned_lattice_step_from_zero_goes_up(lattice_table, lattice_step):
    rng = np.random.default_rng(5)
    steps = [conditioned_step(lattice_table, lattice_step, 0.0, rng) for _ in range(50)]
    assert all(s == pytest.approx(A) for s in steps)


@pytest.mark.parametrize("k", [1, 3])
def test_conditioned_lattice_up_frequency(lattice_table, lattice_step, k):
    sampler = ConditionedSampler(lattice_table, lattice_step)
    steps = sampler.sample(np.full(20_000, k * A), np.random.default_rng(k))
    up = float(np.mean(steps > 0))
    expected = (k + 2) / (2 * (k + 1))
    assert abs(up - expected) <= 4 * math.sqrt(expected * (1 - expected) / steps.size)


def _target_mean(sampler, x):
    z, cdf, mass = sampler.target(x)
    return float(z[-1] - trapezoid(cdf / mass, z))


@pytest.mark.parametrize("x", [0.0099, 0.37, 2.0949])
def test_conditioned_gaussian_step_follows_exact_target(linear_table, gaussian_step, x):
    sampler = ConditionedSampler(linear_table, gaussian_step)
    # Coarse buckets put x far from the bucket floor.
    sampler.BUCKET = 0.1
    steps = sampler.sample(np.full(100_000, x), np.random.default_rng(21))
    se = steps.std(ddof=1) / math.sqrt(steps.size)
    assert abs(steps.mean() - _target_mean(sampler, x)) <= 4 * se
    assert (x + steps).min() >= -1e-9
    z, cdf, mass = sampler.target(x)
    result = stats.kstest(steps[:20_000], lambda s: np.interp(s, z, cdf / mass))
    assert result.pvalue > 1e-3


def test_conditioned_gaussian_step_stays_nonnegative(linear_table, gaussian_step):
    rng = np.random.default_rng(8)
    for x in (0.0, 0.004, 0.51):
        assert x + conditioned_step(linear_table, gaussian_step, x, rng) >= -1e-9


def test_conditioned_step_rejects_negative_start(lattice_table, lattice_step):
    with pytest.raises(DomainError):
        conditioned_step(lattice_table, lattice_step, -1.0, np.random.default_rng(0))


def test_conditioned_walk_stays_nonnegative(lattice_table, lattice_step):
    path = simulate_conditioned_walk(lattice_table, lattice_step, A, 200, np.random.default_rng(2))
    assert path.positions.size == 201
    assert path.positions.min() >= -1e-9


def test_hitting_frequency_matches_closed_form(lattice_table, lattice_step):
    freq, se = hitting_frequency(
        lattice_table, lattice_step, 2 * A, A, horizon=200, replicas=4000,
        rng=np.random.default_rng(9), complete=True,
    )
    assert abs(freq - 1.0 / 3.0) <= 4 * se


def test_simulate_walk_stops_on_event(lattice_step):
    path = simulate_walk(lattice_step, 0.0, 1000, np.random.default_rng(4), stop_when=lambda s: s < 0)
    assert path.positions[0] == 0.0
    if path.stopped_reason.value == "event":
        assert path.positions[-1] < 0
    else:
        assert path.positions.size == 1001
