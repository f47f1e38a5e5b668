from __future__ import annotations

import math
import random

import numpy as np
import pytest

from problems import american_put, double_barrier_toy, free_problem, game_put
from rbsde.lattice import solve_penalized, solve_reflected_oracle
from rbsde.lipschitz import ApproxFamily
from rbsde.runner import (
    CellFailure,
    MismatchedLattices,
    PenalizationSchedule,
    double_limit_study,
    fit_decay_rate,
    monotone_limit_check,
    run_schedule,
)

LADDER = (4, 16, 64, 256, 1024)


def test_schedule_validation():
    with pytest.raises(ValueError):
        PenalizationSchedule(m=(16, 4))
    with pytest.raises(ValueError):
        PenalizationSchedule(m=(4, 4))
    with pytest.raises(ValueError):
        PenalizationSchedule(m=())
    with pytest.raises(ValueError):
        PenalizationSchedule(p=(1, 2), growth_k=1.0)
    s = PenalizationSchedule(p=(2, 4), m=(4, 16), n=(8,), growth_k=1.0)
    assert s.cells() == [(2, 4, 8), (2, 16, 8), (4, 4, 8), (4, 16, 8)]
    tied = PenalizationSchedule(m=(4, 16), n=(8,), tie_p_to_m=True, growth_k=1.0)
    assert tied.cells() == [(4, 4, 8), (16, 16, 8)]


def test_fit_decay_rate():
    ms = [4, 16, 64, 256]
    assert fit_decay_rate(ms, [1 / m for m in ms]) == pytest.approx(-1.0)
    assert fit_decay_rate(ms[:3], [1, 1, 1]) is None
    assert math.isnan(fit_decay_rate(ms, [1, 0, 1, 1]))


def test_inactive_barriers_give_identical_records():
    pr = free_problem(lambda t, y, z: 0 * y, lambda x: np.sin(x), steps=30,
                      lower=lambda t, x: -10 + 0 * x, upper=lambda t, x: 10 + 0 * x)
    rep = run_schedule(pr, PenalizationSchedule(m=(4, 64), n=(4, 64)))
    assert len({r.y0 for r in rep.records}) == 1
    assert all(r.gap_vs_oracle == 0 for r in rep.records)
    assert rep.violations_m == rep.violations_n == 0


def test_toy_schedule_is_degenerate():
    # Y == 0 stays strictly inside [L, U], so every penalized run equals the oracle
    rep = run_schedule(double_barrier_toy(), PenalizationSchedule(m=LADDER, n=LADDER))
    assert rep.oracle_y0 == 0
    assert all(r.gap_vs_oracle <= 1e-12 for r in rep.records)
    assert rep.violations_m == rep.violations_n == 0


def test_game_put_schedule_converges():
    rep = run_schedule(game_put(), PenalizationSchedule(m=LADDER, n=LADDER), workers=4)
    gaps = [g for _, g in rep.decay_points]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] <= 1e-2
    assert -1.5 <= rep.decay_rate <= -0.5
    assert rep.violations_m == rep.violations_n == 0
    assert rep.envelope_ratio <= 10


def test_put_ascends_in_m():
    rep = run_schedule(american_put(), PenalizationSchedule(m=LADDER, n=(1024,)))
    ys = [r.y0 for r in rep.records]
    assert all(b > a for a, b in zip(ys, ys[1:]))
    assert rep.violations_m == 0


def test_order_independent_of_workers(monkeypatch):
    pr = game_put(steps=40)
    s = PenalizationSchedule(m=(4, 16, 64), n=(4, 64))
    monkeypatch.delenv("RBSDE_THREADS", raising=False)
    a = run_schedule(pr, s, workers=1)
    b = run_schedule(pr, s, workers=6)
    assert [r.key for r in a.records] == [r.key for r in b.records]
    assert [r.y0 for r in a.records] == [r.y0 for r in b.records]
    assert [r.bound_total for r in a.records] == [r.bound_total for r in b.records]


def test_failing_oracle_is_tagged():
    # sqrt is not Lipschitz at 0, so the top level p = 64 trips the gate at dt = 0.01
    fam = ApproxFamily(lambda t, y, z: np.sqrt(np.abs(y)), 1.0, [2, 64], axes=("y",))
    pr = free_problem(lambda t, y, z: np.sqrt(np.abs(y)), lambda x: 0.2 + 0 * x, steps=100)
    with pytest.raises(CellFailure) as err:
        run_schedule(pr, PenalizationSchedule(p=(2, 64), m=(4,), n=(4,), growth_k=1.0), family=fam)
    assert err.value.key == (64.0, math.inf, math.inf)


def test_failing_cell_is_tagged(monkeypatch):
    import rbsde.runner as runner

    real = runner.solve_penalized

    def flaky(problem, m, n, driver=None):
        if m == 16 and n == 64:
            raise FloatingPointError("boom")
        return real(problem, m, n, driver)

    monkeypatch.setattr(runner, "solve_penalized", flaky)
    with pytest.raises(CellFailure) as err:
        run_schedule(game_put(steps=20), PenalizationSchedule(m=(4, 16), n=(4, 64)), workers=3)
    assert err.value.key == (None, 16.0, 64.0)
    assert isinstance(err.value.cause, FloatingPointError)


def test_approximation_levels_run():
    fam = ApproxFamily(lambda t, y, z: np.sqrt(np.abs(y)), 1.0, [2, 4, 8], axes=("y",), time_dependent=False)
    pr = free_problem(lambda t, y, z: np.sqrt(np.abs(y)), lambda x: np.maximum(x, 0.2), steps=40,
                      lower=lambda t, x: 0.2 + 0 * x)
    rep = run_schedule(pr, PenalizationSchedule(p=(2, 4, 8), m=(4, 64), n=(64,), growth_k=1.0), family=fam)
    assert len(rep.records) == 6
    assert rep.violations_m == 0
    by_p = {r.p: r.y0 for r in rep.records if r.m == 64}
    # f_p increases with p, and so does the solution
    assert by_p[2] <= by_p[4] <= by_p[8]


def test_double_limit_toy():
    pr = double_barrier_toy()
    rep = double_limit_study(pr, PenalizationSchedule(m=LADDER, n=LADDER))
    n_max = LADDER[-1]
    assert all(c.gap_largest_n_max <= 2 / n_max for c in rep.columns)
    assert rep.final_gap_root <= 1e-2
    assert rep.hybrid_violations == 0


def test_double_limit_game_put():
    rep = double_limit_study(game_put(), PenalizationSchedule(m=LADDER, n=LADDER))
    assert rep.hybrid_violations == 0
    assert all(c.column_violations == 0 for c in rep.columns)
    assert rep.final_gap_max <= 1e-2
    # the n-column approaches the hybrid from above
    for c in rep.columns:
        assert c.y0_by_n[-1] >= c.hybrid_y0 - 1e-12
        assert abs(c.richardson_y0 - c.hybrid_y0) <= c.gap_largest_n


def test_double_limit_inactive_upper():
    pr = american_put(steps=50)
    rep = double_limit_study(pr, PenalizationSchedule(m=(4, 64), n=(4, 64, 1024)))
    for c in rep.columns:
        assert len(set(c.y0_by_n)) == 1
        assert c.hybrid_y0 == c.y0_by_n[0]
        assert c.hybrid_y0 == solve_penalized(pr, c.m, 0).y0


def test_monotone_check_identical_runs():
    q = solve_reflected_oracle(game_put(steps=30))
    rep = monotone_limit_check([q, q, q])
    assert rep.ok
    assert rep.get("(v)").note.startswith("auto-pass")
    assert len(rep.lines()) == 6


def test_monotone_check_put_sweep():
    pr = american_put()
    runs = [solve_penalized(pr, m, 0) for m in LADDER]
    rep = monotone_limit_check(runs)
    assert rep.get("(vi)").passed and rep.get("(iii)").passed
    assert rep.ok


def test_monotone_check_shuffled_runs_fail():
    pr = american_put()
    runs = [solve_penalized(pr, m, 0) for m in LADDER]
    order = list(range(len(runs)))
    random.Random(3).shuffle(order)
    assert order != sorted(order)
    rep = monotone_limit_check([runs[i] for i in order])
    vi = rep.get("(vi)")
    assert not vi.passed
    assert vi.first_violation is not None and len(vi.first_violation) == 3


def test_monotone_check_mismatched_lattices():
    with pytest.raises(MismatchedLattices):
        monotone_limit_check([solve_reflected_oracle(american_put(10)), solve_reflected_oracle(american_put(20))])
