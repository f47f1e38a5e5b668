from __future__ import annotations

import math

import numpy as np
import pytest

from rbsde.core import (
    BarrierPair,
    DimensionMismatch,
    Driver,
    GrowthWarning,
    HardViolation,
    InvalidGrid,
    MokobodzkiWitness,
    NodeTable,
    ProblemSpec,
    TerminalCondition,
    TimeGrid,
    build_lattice,
    check_mokobodzki_witness,
    forward_clamp_witness,
    validate_problem,
)

from problems import american_put


def const(c):
    return lambda t, x: c + 0 * np.asarray(x, dtype=float)


def simple_problem(lower=None, upper=None, xi=0.0, f=None, K=1.0, steps=10):
    return ProblemSpec(
        TimeGrid(1.0, steps),
        Driver(f or (lambda t, y, z: 0 * y), K),
        BarrierPair(lower, upper),
        TerminalCondition(lambda x: xi + 0 * x),
    )


@pytest.mark.parametrize("T,N", [(0.0, 1), (-1.0, 3), (1.0, 0)])
def test_invalid_grid(T, N):
    with pytest.raises(InvalidGrid):
        TimeGrid(T, N)


def test_lattice_examples():
    lat = build_lattice(TimeGrid(1.0, 1))
    assert lat.node_count == 3
    assert list(lat.x(1)) == [-1.0, 1.0]
    lat = build_lattice(TimeGrid(1.0, 2))
    assert lat.node_count == 6
    assert np.allclose(lat.x(2), [-2 * math.sqrt(0.5), 0, 2 * math.sqrt(0.5)], atol=1e-15)
    lat = build_lattice(TimeGrid(4.0, 4))
    assert list(lat.x(4)) == [-4.0, -2.0, 0.0, 2.0, 4.0]


def test_grid_points():
    g = TimeGrid(1.0, 3)
    assert g.time(0) == 0.0 and g.time(3) == 1.0
    assert len(g.times()) == 4


def test_node_count_formula():
    for N in (1, 5, 17):
        lat = build_lattice(TimeGrid(1.0, N))
        assert lat.node_count == (N + 1) * (N + 2) // 2
        assert sum(len(lat.x(k)) for k in range(N + 1)) == lat.node_count


def test_increment_moments_exact():
    lat = build_lattice(TimeGrid(1.0, 200))
    xT = lat.x(200)
    assert abs(lat.expectation(xT**2) - 1.0) <= 1e-12
    assert abs(lat.expectation(xT)) <= 1e-12
    for k in (0, 7, 50):
        assert abs(lat.probabilities(k).sum() - 1.0) <= 1e-12


def test_validate_pass():
    report = validate_problem(simple_problem(const(-1.0), const(1.0)))
    assert report.ok
    assert "auto-pass" in report.get("terminal value").note


def test_validate_rejects_crossed_barriers():
    with pytest.raises(HardViolation) as info:
        validate_problem(simple_problem(const(1.0), const(0.0), xi=0.5))
    assert "(0, 0)" in str(info.value)
    check = info.value.report.get("barrier order L <= U")
    assert check.worst_node == (0, 0) and not check.passed


def test_validate_rejects_terminal_outside():
    with pytest.raises(HardViolation):
        validate_problem(simple_problem(const(-1.0), const(1.0), xi=2.0))


def test_growth_warning_for_quadratic_driver():
    spec = simple_problem(f=lambda t, y, z: y**2)
    with pytest.warns(GrowthWarning):
        report = validate_problem(spec)
    check = report.get("linear growth")
    assert not check.passed and abs(check.worst_node[1]) == 10.0
    assert "1210 probe points" in check.note


def test_validate_is_idempotent():
    spec = american_put(steps=20)
    a = validate_problem(spec).lines()
    b = validate_problem(spec).lines()
    assert a == b


def test_witness_constant_between_constant_barriers():
    spec = simple_problem(const(-1.0), const(1.0), steps=5)
    N = 5
    w = MokobodzkiWitness(
        [np.zeros(k + 1) for k in range(N + 1)],
        *([np.zeros(k + 1) for k in range(N)] for _ in range(3)),
    )
    assert check_mokobodzki_witness(spec, w)
    high = MokobodzkiWitness([np.full(k + 1, 2.0) for k in range(N + 1)], w.Z0, w.dA0, w.dK0)
    assert not check_mokobodzki_witness(spec, high)


def test_witness_dimension_mismatch():
    spec = simple_problem(const(-1.0), const(1.0), steps=5)
    w = MokobodzkiWitness([np.zeros(k + 1) for k in range(3)], [], [], [])
    with pytest.raises(DimensionMismatch):
        check_mokobodzki_witness(spec, w)


def test_forward_clamp_witness_verifies():
    spec = ProblemSpec(
        TimeGrid(1.0, 30),
        Driver(lambda t, y, z: 0 * y, 1.0),
        BarrierPair(lambda t, x: np.minimum(0.0, x), lambda t, x: np.maximum(0.0, x) + 1),
        TerminalCondition(lambda x: np.clip(0 * x, np.minimum(0.0, x), np.maximum(0.0, x) + 1)),
    )
    w = forward_clamp_witness(spec)
    assert check_mokobodzki_witness(spec, w)
    report = validate_problem(ProblemSpec(spec.grid, spec.driver, spec.barriers, spec.terminal, w))
    assert report.get("supplied witness").passed


def test_unbounded_sentinel_is_infinite():
    lat = build_lattice(TimeGrid(1.0, 3))
    b = BarrierPair()
    assert np.all(b.lower_at(lat, 2) == -np.inf)
    assert np.all(b.upper_at(lat, 2) == np.inf)


def test_node_table_barrier():
    lat = build_lattice(TimeGrid(1.0, 4))
    rng = np.random.default_rng(0)
    levels = [rng.normal(size=k + 1) for k in range(5)]
    table = NodeTable(lat, levels)
    for k in range(5):
        assert np.array_equal(lat.evaluate(table, k), levels[k])
    with pytest.raises(DimensionMismatch):
        NodeTable(lat, levels[:3])


def test_accepted_problem_has_ordered_barriers():
    spec = american_put(steps=40)
    validate_problem(spec)
    lat = spec.lattice
    for k in range(41):
        assert np.all(spec.barriers.lower_at(lat, k) <= spec.barriers.upper_at(lat, k))
