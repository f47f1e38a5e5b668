"""Lipschitz approximants of a continuous linear-growth driver by inf-convolution.

``f_p(t, y, z) = inf_{(y', z')} f(t, y', z') + p * (|y - y'| + |z - z'|)``

Candidates are the query point itself plus a uniform grid ``h * Z^d``
anchored at the origin and restricted to an L1 ball of radius
``R = 2K(1 + |y| + |z|) / (p - K) + 1`` around the query point, which contains
every minimizer. Because the grid is shared by all levels of a family, the
result is exactly nondecreasing in ``p`` and exactly dominated by ``f``; the
grid part is exactly p-Lipschitz and the extra candidate can only move the
value toward the true infimum, so the Lipschitz bound holds up to the grid
slack ``(p + K) h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Driver

DEFAULT_TOL_GRID = 1e-3
AXES = ("y", "z")
TABLE_CACHE = 2  # lattice solves query one time level at a time
MAX_TABLE = 2_000_000


class LevelTooLow(ValueError):
    pass


@dataclass
class ApproxFamily:
    f: Callable
    growth_k: float
    levels: Sequence[int]
    tol_grid: float = DEFAULT_TOL_GRID
    axes: tuple = AXES
    resolution: float | None = None
    time_dependent: bool = True
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.levels = sorted(int(p) for p in self.levels)
        for p in self.levels:
            if p <= self.growth_k:
                raise LevelTooLow(f"level p={p} must exceed the growth constant K={self.growth_k}")
        if self.tol_grid <= 0:
            raise ValueError("tol_grid must be positive")
        if any(a not in AXES for a in self.axes):
            raise ValueError(f"axes must be a subset of {AXES}")
        if self.resolution is not None and self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def h(self) -> float:
        """Grid step shared by every level of the family."""
        if self.resolution is not None:
            return self.resolution
        top = self.levels[-1] if self.levels else 2 * self.growth_k + 1
        return self.tol_grid / (top + self.growth_k)

    def slack(self, p: float) -> float:
        return (p + self.growth_k) * self.h

    def radius(self, p: float, y: float, z: float) -> float:
        K = self.growth_k
        return 2 * K * (1 + abs(y) + abs(z)) / (p - K) + 1.0

    def base(self, t, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(y.shape, z.shape)
        return np.broadcast_to(np.asarray(self.f(t, y, z), dtype=float), shape)

    def driver(self, p: float) -> Driver:
        """``f_p`` as a ``Driver`` with declared Lipschitz constant ``p``."""
        _check_level(self, p)

        def fp(t, y, z):
            return self.evaluate(p, t, y, z)

        return Driver(fp, self.growth_k, lipschitz_y=float(p), name=f"f_{p}")

    def evaluate(self, p: float, t, y, z) -> np.ndarray:
        """Vectorized ``f_p``; one-axis families use a tabulated two-pass sweep."""
        _check_level(self, p)
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        y, z = np.broadcast_arrays(y, z)
        if not self.axes:
            return np.array(self.base(t, y, z), dtype=float)
        if len(self.axes) == 1:
            return self._tabulated(p, float(t), y, z)
        flat = [inf_convolve(self, p, (float(t), float(a), float(b))) for a, b in zip(y.ravel(), z.ravel())]
        return np.array(flat, dtype=float).reshape(y.shape)

    def _tabulated(self, p, t, y, z):
        shape = y.shape
        y, z = np.atleast_1d(y).ravel(), np.atleast_1d(z).ravel()
        axis = self.axes[0]
        q = y if axis == "y" else z
        if q.size == 0:
            return np.zeros(shape)
        # a single-axis family must not depend on the other coordinate
        reach = self.radius(p, float(np.max(np.abs(q))), 0.0)
        key = (p, t if self.time_dependent else None, axis)
        tab = self._tables.get(key)
        if tab is None or np.min(q) - reach < tab[0][0] or np.max(q) + reach > tab[0][-1]:
            tab = self._build_table(p, t, key, q, reach)
        g, left, right = tab
        rq = 2 * self.growth_k * (1 + np.abs(q)) / (p - self.growth_k) + 1.0
        inside = (q - rq >= g[0]) & (q + rq <= g[-1])
        out = np.empty(q.shape)
        qi = q[inside]
        i = np.clip(np.searchsorted(g, qi, side="right") - 1, 0, len(g) - 2)
        out[inside] = np.minimum(left[i] + p * (qi - g[i]), right[i + 1] + p * (g[i + 1] - qi))
        # rare far-out queries (root bracketing) fall back to a direct search
        for i in np.flatnonzero(~inside):
            out[i] = inf_convolve(self, p, (t, y[i], z[i]))
        out = np.minimum(out, self.base(t, y, z))
        return out.reshape(shape)

    def _build_table(self, p, t, key, q, reach):
        axis = key[2]
        h = self.h
        lo, hi = float(np.min(q)) - reach, float(np.max(q)) + reach
        if (hi - lo) / h > MAX_TABLE:
            # cover the bulk of the queries; outliers are handled point by point
            a, b = np.quantile(q, [0.05, 0.95])
            r = self.radius(p, float(max(abs(a), abs(b))), 0.0)
            mid, half = 0.5 * (a + b), max(0.5 * (b - a) + r, 0.0)
            half = min(half, 0.5 * MAX_TABLE * h)
            lo, hi = mid - half, mid + half
        pad = 0.25 * (hi - lo)
        lo_i = math.floor((lo - pad) / h) - 1
        hi_i = math.ceil((hi + pad) / h) + 1
        g = h * np.arange(lo_i, hi_i + 1)
        zeros = np.zeros_like(g)
        fv = self.base(t, g, zeros) if axis == "y" else self.base(t, zeros, g)
        left = p * g + np.minimum.accumulate(fv - p * g)
        right = -p * g + np.minimum.accumulate((fv + p * g)[::-1])[::-1]
        tab = (g, left, right)
        self._tables.pop(key, None)
        while len(self._tables) >= TABLE_CACHE:
            self._tables.pop(next(iter(self._tables)))
        self._tables[key] = tab
        return tab


def _check_level(family: ApproxFamily, p: float) -> None:
    if p <= family.growth_k:
        raise LevelTooLow(f"level p={p} must exceed the growth constant K={family.growth_k}")


def inf_convolve(family: ApproxFamily, p: float, point: tuple) -> float:
    """Infimum of ``f(t, .) + p * ||point - .||_1`` over the point and the grid in the certified ball."""
    _check_level(family, p)
    t, y, z = (float(v) for v in point)
    h = family.h
    R = family.radius(p, y, z)
    axes = family.axes
    if not axes:
        return float(family.base(t, y, z))
    if len(axes) == 1:
        c = y if axes[0] == "y" else z
        g = h * np.arange(math.ceil((c - R) / h), math.floor((c + R) / h) + 1)
        if axes[0] == "y":
            vals = family.base(t, g, np.full_like(g, z))
        else:
            vals = family.base(t, np.full_like(g, y), g)
        return min(float(np.min(vals + p * np.abs(c - g))), float(family.base(t, y, z)))
    gy = h * np.arange(math.ceil((y - R) / h), math.floor((y + R) / h) + 1)
    gz = h * np.arange(math.ceil((z - R) / h), math.floor((z + R) / h) + 1)
    best = float(family.base(t, y, z))
    chunk = max(1, 2_000_000 // max(len(gy), 1))
    for s in range(0, len(gz), chunk):
        zc = gz[s:s + chunk]
        Yg, Zg = np.meshgrid(gy, zc, indexing="ij")
        dist = np.abs(y - Yg) + np.abs(z - Zg)
        vals = family.base(t, Yg, Zg) + p * dist
        vals = np.where(dist <= R, vals, np.inf)
        best = min(best, float(np.min(vals)))
    return best


@dataclass
class ProbeReport:
    max_value: float
    bound: float
    passed: bool
    worst: tuple | None = None
    details: dict = field(default_factory=dict)


def lipschitz_probe(family: ApproxFamily, p: float, pairs: Sequence[tuple]) -> ProbeReport:
    """Largest observed ``|f_p(a) - f_p(b)| / ||a - b||_1`` over point pairs.

    Each point is ``(t, y, z)``; pairs must share ``t``.
    """
    _check_level(family, p)
    if len(pairs) < 100:
        raise ValueError("lipschitz_probe needs at least 100 pairs")
    worst_ratio, worst = 0.0, None
    for a, b in pairs:
        if a[0] != b[0]:
            raise ValueError("pairs must share the time coordinate")
        dist = abs(a[1] - b[1]) + abs(a[2] - b[2])
        if dist == 0:
            continue
        fa = float(family.evaluate(p, a[0], a[1], a[2]))
        fb = float(family.evaluate(p, b[0], b[1], b[2]))
        ratio = abs(fa - fb) / dist
        if ratio > worst_ratio:
            worst_ratio, worst = ratio, (a, b)
    bound = p + family.slack(p)
    return ProbeReport(worst_ratio, bound, worst_ratio <= bound, worst)


def monotonicity_probe(family: ApproxFamily, points: Sequence[tuple]) -> ProbeReport:
    """Check ``f_p <= f_q <= f`` for consecutive levels ``p < q`` at each point.

    ``max_value`` is the largest gap ``f - f_p`` at the top level.
    """
    levels = family.levels
    if len(levels) < 2:
        raise ValueError("monotonicity_probe needs at least two levels")
    violations = []
    top_gap = 0.0
    for pt in points:
        t, y, z = pt
        f = float(family.base(t, y, z))
        vals = [float(family.evaluate(p, t, y, z)) for p in levels]
        for (p, a), (q, b) in zip(zip(levels, vals), zip(levels[1:], vals[1:])):
            if a > b + family.slack(q):
                violations.append(("ascent", pt, p, q, a - b))
        for p, a in zip(levels, vals):
            if a > f + family.slack(p):
                violations.append(("domination", pt, p, a - f))
        top_gap = max(top_gap, f - vals[-1])
    return ProbeReport(
        top_gap,
        family.slack(levels[-1]),
        not violations,
        violations[0] if violations else None,
        {"violations": violations},
    )


def growth_probe(family: ApproxFamily, p: float, points: Sequence[tuple]) -> ProbeReport:
    """Largest ``|f_p| - K(1 + |y| + |z|)`` over the points (should be <= slack)."""
    worst_excess, worst = -np.inf, None
    for t, y, z in points:
        v = float(family.evaluate(p, t, y, z))
        excess = abs(v) - family.growth_k * (1 + abs(y) + abs(z))
        if excess > worst_excess:
            worst_excess, worst = excess, (t, y, z)
    return ProbeReport(worst_excess, family.slack(p), worst_excess <= family.slack(p), worst)


def gap_decay(family: ApproxFamily, point: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Levels and the gaps ``f - f_p`` at one point."""
    t, y, z = point
    f = float(family.base(t, y, z))
    gaps = np.array([f - float(family.evaluate(p, t, y, z)) for p in family.levels])
    return np.array(family.levels, dtype=float), gaps
