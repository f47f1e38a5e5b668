from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde.lipschitz import (
    ApproxFamily,
    LevelTooLow,
    gap_decay,
    growth_probe,
    inf_convolve,
    lipschitz_probe,
    monotonicity_probe,
)


def sqrt_abs(t, y, z):
    return np.sqrt(np.abs(y))


def abs_y(t, y, z):
    return np.abs(y)


def family(f, levels=(2, 4, 8, 16), **kw):
    kw.setdefault("axes", ("y",))
    return ApproxFamily(f, 1.0, levels, **kw)


def random_pairs(n=200, seed=0, scale=3.0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-scale, scale, size=n)
    b = a + rng.normal(scale=0.3, size=n)
    return [((0.0, float(u), 0.0), (0.0, float(v), 0.0)) for u, v in zip(a, b)]


def test_level_must_exceed_growth_constant():
    with pytest.raises(LevelTooLow):
        ApproxFamily(abs_y, 1.0, [1, 2])
    fam = family(abs_y)
    with pytest.raises(LevelTooLow):
        fam.evaluate(1.0, 0.0, 0.5, 0.0)
    with pytest.raises(LevelTooLow):
        inf_convolve(fam, 0.5, (0.0, 0.0, 0.0))


def test_already_lipschitz_driver_is_unchanged():
    fam = family(abs_y)
    assert abs(inf_convolve(fam, 2, (0.0, 0.7, 0.0)) - 0.7) <= fam.slack(2)


def test_sqrt_value_at_level_two():
    fam = family(sqrt_abs)
    assert abs(inf_convolve(fam, 2, (0.0, 0.01, 0.0)) - 0.02) <= 1e-6
    assert abs(float(fam.evaluate(2, 0.0, 0.01, 0.0)) - 0.02) <= 1e-6


def test_sqrt_value_by_brute_force():
    ys = np.linspace(-1, 1, 2_000_001)
    brute = float(np.min(np.sqrt(np.abs(ys)) + 2 * np.abs(0.01 - ys)))
    assert abs(brute - 0.02) <= 1e-6


def test_constant_driver():
    fam = ApproxFamily(lambda t, y, z: 0.3 + 0 * y, 1.0, [2, 5], axes=("y", "z"), resolution=0.05)
    assert abs(inf_convolve(fam, 5, (0.0, 0.123, -0.4)) - 0.3) <= 1e-15


def test_tabulated_matches_direct_search():
    fam = family(lambda t, y, z: np.abs(np.sin(y)))
    ys = np.linspace(-4, 4, 37)
    for p in fam.levels:
        tab = fam.evaluate(p, 0.0, ys, 0 * ys)
        direct = [inf_convolve(fam, p, (0.0, float(y), 0.0)) for y in ys]
        assert np.max(np.abs(tab - direct)) <= 1e-12


def test_z_axis_family():
    fam = ApproxFamily(lambda t, y, z: np.sqrt(np.abs(z)), 1.0, [2, 4], axes=("z",))
    assert abs(float(fam.evaluate(2, 0.0, 5.0, 0.01)) - 0.02) <= 1e-6


def test_two_axis_grid_search_matches_brute_force():
    h = 0.02
    fam = ApproxFamily(lambda t, y, z: np.sqrt(np.abs(y)) + np.abs(z), 1.0, [3], axes=("y", "z"), resolution=h)
    pt = (0.0, 0.11, -0.37)
    gy = h * np.arange(-200, 201)
    Y, Z = np.meshgrid(gy, gy, indexing="ij")
    brute = np.min(np.sqrt(np.abs(Y)) + np.abs(Z) + 3 * (np.abs(pt[1] - Y) + np.abs(pt[2] - Z)))
    brute = min(brute, np.sqrt(abs(pt[1])) + abs(pt[2]))
    assert abs(inf_convolve(fam, 3, pt) - brute) <= 1e-12


def test_lipschitz_probe_examples():
    pairs = random_pairs()
    fam = family(abs_y)
    rep = lipschitz_probe(fam, 2, pairs)
    assert rep.max_value <= 1 + 1e-12
    zero = family(lambda t, y, z: 0 * y)
    assert lipschitz_probe(zero, 4, pairs).max_value == 0
    fam = family(sqrt_abs)
    rep = lipschitz_probe(fam, 4, pairs)
    assert rep.passed and rep.max_value <= 4 + fam.slack(4)


def test_lipschitz_probe_needs_enough_pairs():
    with pytest.raises(ValueError):
        lipschitz_probe(family(abs_y), 2, random_pairs(50))


def test_monotonicity_example():
    fam = family(sqrt_abs, levels=(2, 4, 8))
    vals = [float(fam.evaluate(p, 0.0, 0.01, 0.0)) for p in (2, 4, 8)]
    assert np.allclose(vals, [0.02, 0.04, 0.08], atol=1e-9)
    rep = monotonicity_probe(fam, [(0.0, 0.01, 0.0)])
    assert rep.passed and abs(rep.max_value - 0.02) <= 1e-9


def test_monotonicity_all_levels_equal_for_abs():
    fam = family(abs_y)
    pts = [(0.0, float(y), 0.0) for y in np.linspace(-2, 2, 21)]
    rep = monotonicity_probe(fam, pts)
    assert rep.passed
    for _, y, _ in pts:
        vals = [float(fam.evaluate(p, 0.0, y, 0.0)) for p in fam.levels]
        assert max(vals) - min(vals) <= fam.slack(fam.levels[-1])


def test_uniform_gap_decays_like_one_over_p():
    fam = family(sqrt_abs, levels=(2, 4, 8, 16, 32))
    gaps = []
    for p in fam.levels:
        ys = np.linspace(0, 4 / p**2, 2001)
        gaps.append(float(np.max(np.sqrt(ys) - fam.evaluate(p, 0.0, ys, 0 * ys))))
    assert np.allclose(gaps, [1 / (4 * p) for p in fam.levels], atol=5 * fam.slack(32))
    slope = np.polyfit(np.log(fam.levels), np.log(gaps), 1)[0]
    assert -1.1 <= slope <= -0.9


def test_gap_decay_helper():
    fam = family(sqrt_abs)
    ps, gaps = gap_decay(fam, (0.0, 0.01, 0.0))
    assert list(ps) == [2, 4, 8, 16]
    assert np.all(np.diff(gaps) <= fam.slack(16))


def test_growth_probe():
    fam = family(lambda t, y, z: np.abs(np.sin(y)))
    pts = [(0.0, float(y), 0.0) for y in np.linspace(-10, 10, 101)]
    assert growth_probe(fam, 2, pts).passed


def test_table_cache_bounded():
    fam = family(abs_y, time_dependent=True)
    for t in np.linspace(0, 1, 20):
        fam.evaluate(2, float(t), np.linspace(-1, 1, 11), np.zeros(11))
    assert len(fam._tables) <= 2


def test_far_queries_use_direct_search():
    fam = family(sqrt_abs)
    far = np.array([0.01, 1e3])
    out = fam.evaluate(4, 0.0, far, 0 * far)
    assert abs(out[1] - inf_convolve(fam, 4, (0.0, 1e3, 0.0))) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([2, 4, 8, 16]))
def test_approximant_is_p_lipschitz_up_to_slack(a, b, p):
    fam = _SIN_FAMILY
    fa, fb = (float(fam.evaluate(p, 0.0, v, 0.0)) for v in (a, b))
    assert abs(fa - fb) <= p * abs(a - b) + fam.slack(p) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5))
def test_levels_ascend_and_stay_below_f(y):
    fam = _SIN_FAMILY
    vals = [float(fam.evaluate(p, 0.0, y, 0.0)) for p in fam.levels]
    assert all(u <= v + 1e-12 for u, v in zip(vals, vals[1:]))
    assert vals[-1] <= abs(np.sin(y))


_SIN_FAMILY = family(lambda t, y, z: np.abs(np.sin(y)), time_dependent=False)
