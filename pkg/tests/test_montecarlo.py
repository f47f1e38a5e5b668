from __future__ import annotations

import numpy as np
import pytest

from problems import american_put, free_problem
from rbsde.core import BarrierPair, Driver, TerminalCondition, TimeGrid
from rbsde.lattice import InvalidPenalty, solve_bsde, solve_penalized
from rbsde.montecarlo import (
    RegressionBasis,
    SingularRegression,
    regress,
    simulate_paths,
    solve_bsde_mc,
    solve_penalized_mc,
)


def zero(t, y, z):
    return 0 * y


def test_same_seed_same_bundle():
    g = TimeGrid(1.0, 8)
    a, b = simulate_paths(g, 500, 7), simulate_paths(g, 500, 7)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, simulate_paths(g, 500, 8).increments)


def test_single_coin_path_is_a_lattice_path():
    g = TimeGrid(1.0, 10)
    b = simulate_paths(g, 1, 3)
    j = b.lattice_indices()[0]
    assert j[0] == 0 and np.all(np.diff(j) >= 0) and np.all(np.diff(j) <= 1)
    x = (2 * j - np.arange(11)) * np.sqrt(g.dt)
    assert np.allclose(b.paths[0], x, atol=1e-14)


@pytest.mark.parametrize("mode", ["coin", "gauss"])
def test_terminal_variance(mode):
    n = 100_000
    b = simulate_paths(TimeGrid(1.0, 10), n, 11, mode)
    BT = b.paths[:, -1]
    assert abs(BT.mean()) <= 4 * np.sqrt(1.0 / n)
    # var of the sample variance is (mu4 - sigma^4) / n; mu4 <= 3 for both laws
    assert abs(BT.var(ddof=1) - 1.0) <= 5 * np.sqrt(2.0 / n)


def test_unknown_mode_and_empty_bundle():
    with pytest.raises(ValueError):
        simulate_paths(TimeGrid(1.0, 2), 10, 0, "sobol")
    with pytest.raises(ValueError):
        simulate_paths(TimeGrid(1.0, 2), 0, 0)


def test_constant_terminal_is_exact():
    b = simulate_paths(TimeGrid(1.0, 10), 2000, 1)
    res = solve_bsde_mc(b, Driver(zero, 1.0, 0.0), TerminalCondition(lambda x: 1 + 0 * x))
    assert res.y0 == 1.0
    assert np.all(res.Y == 1.0)


def test_linear_driver_against_discrete_closed_form():
    N = 50
    b = simulate_paths(TimeGrid(1.0, N), 2000, 2)
    res = solve_bsde_mc(b, Driver(lambda t, y, z: 0.1 * y, 1.0, 0.1), TerminalCondition(lambda x: 1 + 0 * x))
    # deterministic problem: the implicit step gives (1 - 0.1 dt)^-N exactly
    assert res.y0 == pytest.approx((1 - 0.1 / N) ** -N, abs=1e-12)
    assert abs(res.y0 - np.exp(0.1)) <= 1e-3


def test_saturated_basis_matches_lattice():
    N = 6
    pr = free_problem(lambda t, y, z: -0.05 * y + 0.2 * np.abs(z), lambda x: np.maximum(1 - np.exp(x - 0.5), 0),
                      steps=N, lip=0.05)
    lat_y0 = solve_bsde(pr).y0
    b = simulate_paths(pr.grid, 20_000, 5)
    res = solve_bsde_mc(b, pr.driver, pr.terminal, RegressionBasis(N))
    assert abs(res.y0 - lat_y0) <= 3 * res.y0_stderr


def test_penalized_put_matches_lattice():
    pr = american_put(steps=6)
    lat_y0 = solve_penalized(pr, 256, 0).y0
    b = simulate_paths(pr.grid, 20_000, 9)
    res = solve_penalized_mc(b, pr.driver, pr.terminal, RegressionBasis(6), pr.barriers, 256, 0)
    assert abs(res.y0 - lat_y0) <= 3 * res.y0_stderr


def test_regression_residuals_orthogonal():
    rng = np.random.default_rng(0)
    x = rng.normal(size=500)
    D = RegressionBasis(4).design(x, 1.0)
    y = np.exp(x) + rng.normal(size=500)
    _, fitted = regress(D, y)
    r = y - fitted
    assert np.max(np.abs(D.T @ r)) <= 1e-8 * np.linalg.norm(D) * np.linalg.norm(y)


def test_collinear_columns_are_dropped():
    x = np.linspace(-1, 1, 50)
    D = np.column_stack([np.ones(50), x, 2 * x])
    coef, fitted = regress(D, 3 + x)
    assert np.allclose(fitted, 3 + x)
    assert np.count_nonzero(coef) <= 2


def test_singular_regression():
    b = simulate_paths(TimeGrid(1.0, 4), 3, 0)
    with pytest.raises(SingularRegression):
        solve_bsde_mc(b, Driver(zero, 1.0), TerminalCondition(lambda x: x), RegressionBasis(4))
    with pytest.raises(SingularRegression):
        regress(np.zeros((10, 2)), np.ones(10))


def test_inactive_barriers_leave_no_push():
    b = simulate_paths(TimeGrid(1.0, 10), 1000, 4)
    bars = BarrierPair(lambda t, x: -10 + 0 * x, lambda t, x: 10 + 0 * x)
    res = solve_penalized_mc(b, Driver(zero, 1.0), TerminalCondition(lambda x: 0 * x), RegressionBasis(), bars, 64, 64)
    assert np.all(res.dA == 0) and np.all(res.dK == 0)
    assert res.stats["e_AT"] == 0 and res.stats["e_KT"] == 0


def test_sitting_on_lower_barrier():
    b = simulate_paths(TimeGrid(1.0, 10), 1000, 4)
    bars = BarrierPair(lambda t, x: 1 + 0 * x)
    res = solve_penalized_mc(b, Driver(zero, 1.0), TerminalCondition(lambda x: 1 + 0 * x), RegressionBasis(), bars, 1e4, 0)
    assert abs(res.stats["e_AT"]) <= 1e-12
    assert np.allclose(res.Y, 1.0)


def test_negative_penalty_rejected():
    b = simulate_paths(TimeGrid(1.0, 4), 100, 0)
    with pytest.raises(InvalidPenalty):
        solve_penalized_mc(b, Driver(zero, 1.0), TerminalCondition(lambda x: x), RegressionBasis(), BarrierPair(), -1, 0)


def test_bit_identical_reruns():
    pr = american_put(steps=6)

    def run():
        b = simulate_paths(pr.grid, 5000, 42)
        return solve_penalized_mc(b, pr.driver, pr.terminal, RegressionBasis(6), pr.barriers, 64, 0)

    a, c = run(), run()
    assert a.y0 == c.y0 and a.y0_stderr == c.y0_stderr
    assert np.array_equal(a.Y, c.Y) and a.stats == c.stats
