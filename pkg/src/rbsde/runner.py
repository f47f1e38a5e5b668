"""Penalization sweeps, the iterated limit in ``n`` then ``m``, and monotone-limit checks."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ProblemSpec, SolutionQuadruple
from .diagnostics import BoundsRecord, apriori_bounds
from .lattice import path_sum_moments, solve_hybrid, solve_penalized, solve_reflected_oracle
from .lipschitz import ApproxFamily

MONO_TOL = 1e-10
MIN_FIT_POINTS = 4


class MismatchedLattices(ValueError):
    pass


class CellFailure(RuntimeError):
    """A solver error raised inside one schedule cell, tagged with its key."""

    def __init__(self, key: tuple, cause: Exception):
        super().__init__(f"cell (p={key[0]}, m={key[1]}, n={key[2]}) failed: {cause}")
        self.key = key
        self.cause = cause


def _ascending(name: str, values: Sequence[float], allow_empty: bool = False) -> tuple:
    vals = tuple(float(v) for v in values)
    if not vals and not allow_empty:
        raise ValueError(f"penalty list {name!r} must be nonempty")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"penalty list {name!r} must be strictly ascending")
    if any(v < 0 or not math.isfinite(v) for v in vals):
        raise ValueError(f"penalty list {name!r} must hold finite nonnegative values")
    return vals


@dataclass(frozen=True)
class PenalizationSchedule:
    """Grid of ``(p, m, n)`` cells.

    An empty ``p`` list means the problem's own driver is used unchanged (it
    must then already be Lipschitz). With ``tie_p_to_m`` every cell uses
    ``p = m``.
    """

    p: tuple = ()
    m: tuple = (1024.0,)
    n: tuple = (1024.0,)
    tie_p_to_m: bool = False
    growth_k: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", _ascending("p", self.p, allow_empty=True))
        object.__setattr__(self, "m", _ascending("m", self.m))
        object.__setattr__(self, "n", _ascending("n", self.n))
        levels = self.m if self.tie_p_to_m else self.p
        for v in levels:
            if v <= self.growth_k:
                raise ValueError(f"approximation level {v} must exceed K={self.growth_k}")

    def cells(self) -> list[tuple]:
        if self.tie_p_to_m:
            return [(m, m, n) for m in self.m for n in self.n]
        ps = self.p or (None,)
        return [(p, m, n) for p in ps for m in self.m for n in self.n]

    def level_for(self, m: float) -> Optional[float]:
        if self.tie_p_to_m:
            return m
        return self.p[-1] if self.p else None


def _sort_key(key: tuple) -> tuple:
    p = -math.inf if key[0] is None else key[0]
    return (p, key[1], key[2])


@dataclass
class CellRecord:
    p: Optional[float]
    m: float
    n: float
    y0: float
    e_supY2: float
    e_intZ2: float
    e_AT2: float
    e_KT2: float
    gap_vs_oracle: float
    mono_viol_m: int = 0
    mono_viol_n: int = 0
    e_AT: float = 0.0
    e_KT: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.p, self.m, self.n)

    @property
    def bound_total(self) -> float:
        return self.e_supY2 + self.e_intZ2 + self.e_AT2 + self.e_KT2


@dataclass
class ConvergenceReport:
    records: list[CellRecord]
    oracle_y0: float
    oracle_bounds: BoundsRecord
    decay_rate: Optional[float] = None
    decay_points: list = field(default_factory=list)
    envelope_max: float = 0.0
    envelope_ratio: float = 0.0
    solutions: dict = field(default_factory=dict, repr=False)
    oracle: Optional[SolutionQuadruple] = field(default=None, repr=False)
    limits: Optional["DoubleLimitReport"] = None

    @property
    def violations_m(self) -> int:
        return sum(r.mono_viol_m for r in self.records)

    @property
    def violations_n(self) -> int:
        return sum(r.mono_viol_n for r in self.records)


def fit_decay_rate(m_values: Sequence[float], gaps: Sequence[float]) -> Optional[float]:
    """Least-squares slope of ``log gap`` against ``log m``.

    ``None`` with fewer than four points; ``nan`` when any gap is not positive.
    """
    if len(m_values) < MIN_FIT_POINTS:
        return None
    g = np.asarray(gaps, dtype=float)
    if np.any(~(g > 0)):
        return float("nan")
    slope, _ = np.polyfit(np.log(np.asarray(m_values, dtype=float)), np.log(g), 1)
    return float(slope)


def _count_below(a: SolutionQuadruple, b: SolutionQuadruple, tol: float = MONO_TOL) -> int:
    """Nodes where ``a.Y < b.Y - tol``."""
    return sum(int(np.sum(ya < yb - tol)) for ya, yb in zip(a.Y, b.Y))


def _worker_count(workers: Optional[int]) -> int:
    cap = os.environ.get("RBSDE_THREADS")
    w = workers or 1
    if cap:
        try:
            w = min(w, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, w)


def _driver_for(problem: ProblemSpec, family: Optional[ApproxFamily], p):
    if p is None:
        return None
    if family is None:
        raise ValueError("approximation levels given but no ApproxFamily supplied")
    return family.driver(p)


def oracle_level(schedule: PenalizationSchedule) -> Optional[float]:
    """Approximation level used for the reference oracle (the top level, if any)."""
    levels = schedule.m if schedule.tie_p_to_m else schedule.p
    return levels[-1] if levels else None


def _solve_oracle(problem, schedule, family):
    # the oracle is the m, n -> infinity limit, so a failure is tagged (p, inf, inf)
    level = oracle_level(schedule)
    try:
        return solve_reflected_oracle(problem, _driver_for(problem, family, level))
    except Exception as exc:
        raise CellFailure((level, math.inf, math.inf), exc) from exc


def run_schedule(
    problem: ProblemSpec,
    schedule: PenalizationSchedule,
    family: Optional[ApproxFamily] = None,
    workers: Optional[int] = None,
    keep_solutions: bool = True,
    sup_seed: int = 0,
) -> ConvergenceReport:
    """Solve every cell of ``schedule`` on the problem's lattice.

    Cells are independent; they may run on a thread pool and the records are
    merged in key order, so the report does not depend on execution order.
    When the schedule carries approximation levels the oracle is solved with
    the top level, since a non-Lipschitz driver cannot pass the step gate.
    """
    oracle = _solve_oracle(problem, schedule, family)
    base = apriori_bounds(oracle, seed=sup_seed)

    def solve(key):
        p, m, n = key
        try:
            q = solve_penalized(problem, m, n, _driver_for(problem, family, p))
            b = apriori_bounds(q, seed=sup_seed)
            ea, _ = path_sum_moments(q.lattice, q.dA)
            ek, _ = path_sum_moments(q.lattice, q.dK)
        except Exception as exc:
            raise CellFailure(key, exc) from exc
        return key, q, b, ea, ek

    keys = sorted(schedule.cells(), key=_sort_key)
    nw = _worker_count(workers)
    if nw > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(solve, keys))
    else:
        results = [solve(k) for k in keys]
    results.sort(key=lambda r: _sort_key(r[0]))

    sols = {r[0]: r[1] for r in results}
    records = []
    for key, q, b, ea, ek in results:
        p, m, n = key
        rec = CellRecord(
            p=p,
            m=m,
            n=n,
            y0=q.y0,
            e_supY2=b.e_sup_y2,
            e_intZ2=b.e_int_z2,
            e_AT2=b.e_a_T2,
            e_KT2=b.e_k_T2,
            gap_vs_oracle=abs(q.y0 - oracle.y0),
            e_AT=ea,
            e_KT=ek,
        )
        mi = schedule.m.index(m)
        ni = schedule.n.index(n)
        if mi > 0:
            prev = sols.get((p if not schedule.tie_p_to_m else schedule.m[mi - 1], schedule.m[mi - 1], n))
            if prev is not None:
                rec.mono_viol_m = _count_below(q, prev)
        if ni > 0:
            prev = sols.get((p, m, schedule.n[ni - 1]))
            if prev is not None:
                rec.mono_viol_n = _count_below(prev, q)
        records.append(rec)

    report = ConvergenceReport(records, oracle.y0, base, oracle=oracle)
    if keep_solutions:
        report.solutions = sols
    report.decay_points = _decay_points(records, schedule)
    if report.decay_points:
        ms, gaps = zip(*report.decay_points)
        report.decay_rate = fit_decay_rate(ms, gaps)
    if records:
        report.envelope_max = max(r.bound_total for r in records)
        report.envelope_ratio = report.envelope_max / base.total if base.total > 0 else (
            0.0 if report.envelope_max == 0 else math.inf
        )
    return report


def _decay_points(records: list[CellRecord], schedule: PenalizationSchedule) -> list[tuple]:
    """``(m, gap)`` along the diagonal ``m = n`` or, failing that, along ``m`` at the largest ``n``."""
    first_p = records[0].p if records else None
    same_p = [r for r in records if r.p == first_p or schedule.tie_p_to_m]
    diag = [(r.m, r.gap_vs_oracle) for r in same_p if r.m == r.n]
    if len(diag) >= MIN_FIT_POINTS:
        return diag
    top_n = schedule.n[-1]
    return [(r.m, r.gap_vs_oracle) for r in same_p if r.n == top_n]


# --- double limit -----------------------------------------------------------


@dataclass
class ColumnLimit:
    m: float
    n_values: list
    y0_by_n: list
    hybrid_y0: float
    richardson_y0: float
    gap_largest_n: float  # |Y^{n_max, m}_0 - Y^m_0|
    gap_largest_n_max: float  # node-wise max of the same difference
    column_violations: int  # nodes where Y^{n, m} increases with n


@dataclass
class DoubleLimitReport:
    columns: list[ColumnLimit]
    hybrid_violations: int  # nodes where Y^m decreases with m
    final_gap_root: float
    final_gap_max: float
    oracle_y0: float
    hybrids: dict = field(default_factory=dict, repr=False)


def double_limit_study(
    problem: ProblemSpec,
    schedule: PenalizationSchedule,
    family: Optional[ApproxFamily] = None,
) -> DoubleLimitReport:
    """Take ``n`` to its largest value first, then ``m``.

    For each ``m`` the ``n``-column of penalized runs is compared with the
    hybrid run that clamps at ``U`` and penalizes ``L`` with ``m``; a linear
    extrapolation in ``1/(1 + n dt)`` through the last two entries estimates the limit.
    The hybrids must then rise node-wise with ``m`` toward the clamped oracle.
    """
    oracle = _solve_oracle(problem, schedule, family)
    columns = []
    hybrids = {}
    prev_h = None
    hybrid_viol = 0
    for m in schedule.m:
        drv = _driver_for(problem, family, schedule.level_for(m))
        try:
            hyb = solve_hybrid(problem, m, drv)
            col = [solve_penalized(problem, m, n, drv) for n in schedule.n]
        except Exception as exc:
            raise CellFailure((schedule.level_for(m), m, None), exc) from exc
        hybrids[m] = hyb
        viol = sum(_count_below(a, b) for a, b in zip(col, col[1:]))
        y0s = [q.y0 for q in col]
        if len(col) >= 2:
            # the stiff step leaves a residual of order 1 / (1 + n dt)
            dt = problem.grid.dt
            u1, u2 = 1 / (1 + schedule.n[-2] * dt), 1 / (1 + schedule.n[-1] * dt)
            rich = (u1 * y0s[-1] - u2 * y0s[-2]) / (u1 - u2)
        else:
            rich = y0s[-1]
        gap = max(float(np.max(np.abs(a - b))) for a, b in zip(col[-1].Y, hyb.Y))
        columns.append(ColumnLimit(m, list(schedule.n), y0s, hyb.y0, rich, abs(y0s[-1] - hyb.y0), gap, viol))
        if prev_h is not None:
            hybrid_viol += _count_below(hyb, prev_h)
        prev_h = hyb
    last = hybrids[schedule.m[-1]]
    final_max = max(float(np.max(np.abs(a - b))) for a, b in zip(last.Y, oracle.Y))
    return DoubleLimitReport(
        columns, hybrid_viol, abs(last.y0 - oracle.y0), final_max, oracle.y0, hybrids
    )


# --- monotone limit conditions ----------------------------------------------


@dataclass
class ConditionResult:
    name: str
    passed: bool
    worst: float = 0.0
    first_violation: Optional[tuple] = None
    note: str = ""


@dataclass
class ConditionReport:
    conditions: list[ConditionResult]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.conditions)

    def get(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for c in self.conditions:
            status = "PASS" if c.passed else "FAIL"
            where = f" at {c.first_violation}" if c.first_violation else ""
            note = f" ({c.note})" if c.note else ""
            out.append(f"{c.name}: {status} worst={c.worst:.3g}{where}{note}")
        return out


def _first_negative(levels, tol):
    """Largest violation and first node (run, k, j) where a level array is below ``-tol``."""
    worst, first = 0.0, None
    for r, k, arr in levels:
        lo = float(np.min(arr)) if arr.size else 0.0
        if lo < -tol:
            worst = max(worst, -lo)
            if first is None:
                first = (r, k, int(np.flatnonzero(arr < -tol)[0]))
    return worst, first


def monotone_limit_check(
    runs: Sequence[SolutionQuadruple], tol: float = MONO_TOL, bound: float = 1e12
) -> ConditionReport:
    """Discrete analogs of the monotone-limit hypotheses for an ascending run list.

    Read forward in time, each run is ``Y_t = Y_0 - int f - A_t + K_t + int Z dB``
    with ``A`` the lower push and ``K`` the upper push, which is the form the
    limit theorem expects:

    - (i)   ``A`` increments nonnegative with ``E[A_T^2]`` finite
    - (ii)  ``K`` increments nonnegative (``K_0 = 0`` by construction)
    - (iii) ``K`` increments of later runs dominate earlier ones node-wise,
            which is increment domination for every pair ``s <= t`` on every path
    - (iv)  ``E[K_T^2]`` bounded across runs
    - (v)   weak convergence: no content on a finite lattice, reported as auto-pass
    - (vi)  ``Y`` node-wise nondecreasing across runs with bounded ``E[sup Y^2]``
    """
    if not runs:
        raise ValueError("monotone_limit_check needs at least one run")
    lat = runs[0].lattice
    for q in runs[1:]:
        if not q.lattice.same_as(lat):
            raise MismatchedLattices("runs were produced on different lattices")

    conds = []
    w, first = _first_negative(((r, k, q.dA[k]) for r, q in enumerate(runs) for k in range(lat.steps)), tol)
    at2 = [path_sum_moments(lat, q.dA)[1] for q in runs]
    ok_i = first is None and all(math.isfinite(v) and v <= bound for v in at2)
    conds.append(ConditionResult("(i)", ok_i, w, first, f"max E[A_T^2]={max(at2):.4g}"))

    w, first = _first_negative(((r, k, q.dK[k]) for r, q in enumerate(runs) for k in range(lat.steps)), tol)
    conds.append(ConditionResult("(ii)", first is None, w, first))

    w, first = _first_negative(
        ((r + 1, k, b.dK[k] - a.dK[k]) for r, (a, b) in enumerate(zip(runs, runs[1:])) for k in range(lat.steps)),
        tol,
    )
    conds.append(ConditionResult("(iii)", first is None, w, first))

    kt2 = [path_sum_moments(lat, q.dK)[1] for q in runs]
    ok_iv = all(math.isfinite(v) and v <= bound for v in kt2)
    conds.append(ConditionResult("(iv)", ok_iv, max(kt2), None, f"max E[K_T^2]={max(kt2):.4g}"))

    conds.append(ConditionResult("(v)", True, 0.0, None, "auto-pass (finite dimension)"))

    w, first = _first_negative(
        ((r + 1, k, b.Y[k] - a.Y[k]) for r, (a, b) in enumerate(zip(runs, runs[1:])) for k in range(lat.steps + 1)),
        tol,
    )
    sup = max(float(np.max([np.max(np.abs(y)) for y in q.Y])) for q in runs) ** 2
    ok_vi = first is None and math.isfinite(sup) and sup <= bound
    conds.append(ConditionResult("(vi)", ok_vi, w, first, f"max sup Y^2={sup:.4g}"))
    return ConditionReport(conds)
