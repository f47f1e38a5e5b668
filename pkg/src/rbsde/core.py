"""Problem data for doubly reflected BSDEs on a binomial Brownian lattice.

Node-indexed processes are stored level by level: ``proc[k]`` is a 1-D array
of length ``k + 1`` whose entry ``j`` is the value at node ``(k, j)`` (``j``
up-moves out of ``k`` steps). Increment processes (``dA``, ``dK``) have one
level per step ``k = 0..N-1``; the increment at node ``(k, j)`` accrues over
``[t_k, t_{k+1})`` and is known at ``t_k``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

NodeProcess = list  # list[np.ndarray], one array per lattice level

ORDER_TOL = 1e-12
WITNESS_TOL = 1e-10


class InvalidGrid(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class HardViolation(ValueError):
    """The problem data violate the barrier ordering; the problem is rejected."""

    def __init__(self, message: str, report: "ValidationReport"):
        super().__init__(message)
        self.report = report


class GrowthWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise InvalidGrid(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidGrid(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def time(self, k: int) -> float:
        # k*T/N rather than k*dt keeps t_N == T exactly
        return k * self.horizon / self.steps

    def times(self) -> np.ndarray:
        return np.array([self.time(k) for k in range(self.steps + 1)])


@dataclass(frozen=True)
class LatticeModel:
    """Recombining binomial walk with up/down moves of ``sqrt(dt)``, each w.p. 1/2."""

    grid: TimeGrid

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def increment(self) -> float:
        return math.sqrt(self.grid.dt)

    @property
    def node_count(self) -> int:
        n = self.grid.steps
        return (n + 1) * (n + 2) // 2

    def x(self, k: int) -> np.ndarray:
        """Brownian values ``(2j - k) sqrt(dt)`` at level ``k``."""
        j = np.arange(k + 1)
        return (2 * j - k) * self.increment

    def t(self, k: int) -> float:
        return self.grid.time(k)

    def probabilities(self, k: int) -> np.ndarray:
        """Node probabilities at level ``k`` (binomial(k, 1/2) weights)."""
        p = np.array([1.0])
        for _ in range(k):
            p = 0.5 * (np.concatenate([p, [0.0]]) + np.concatenate([[0.0], p]))
        return p

    def all_probabilities(self) -> list[np.ndarray]:
        out = [np.array([1.0])]
        for _ in range(self.steps):
            p = out[-1]
            out.append(0.5 * (np.concatenate([p, [0.0]]) + np.concatenate([[0.0], p])))
        return out

    def expectation(self, values: np.ndarray, k: Optional[int] = None) -> float:
        """Tree expectation of a level array."""
        k = len(values) - 1 if k is None else k
        return float(np.dot(self.probabilities(k), values))

    def evaluate(self, fn: Callable, k: int) -> np.ndarray:
        """Evaluate a Markov function ``fn(t, x)`` on level ``k``."""
        x = self.x(k)
        return _as_level(fn(self.t(k), x), x.shape)

    def same_as(self, other: "LatticeModel") -> bool:
        return self.grid == other.grid


def build_lattice(grid: TimeGrid) -> LatticeModel:
    # TimeGrid validates T > 0 and N >= 1 on construction
    if not isinstance(grid, TimeGrid):
        raise InvalidGrid("build_lattice expects a TimeGrid")
    return LatticeModel(grid)


def _as_level(values, shape) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    return np.broadcast_to(arr, shape).astype(float, copy=True)


@dataclass(frozen=True)
class Driver:
    """Coefficient ``f(t, y, z)``; must accept numpy arrays for ``y`` and ``z``.

    ``lipschitz_y`` is an optional declared Lipschitz bound in ``y`` used for the
    step-stability gate ``dt * lipschitz_y <= 0.5``.
    """

    f: Callable
    growth_k: float
    lipschitz_y: Optional[float] = None
    name: str = ""

    def __call__(self, t, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(y.shape, z.shape)
        return _as_level(self.f(t, y, z), shape)


@dataclass(frozen=True)
class BarrierPair:
    """Barriers ``L(t, x)`` and ``U(t, x)``; ``None`` is the unbounded sentinel."""

    lower: Optional[Callable] = None
    upper: Optional[Callable] = None

    def lower_at(self, lattice: LatticeModel, k: int) -> np.ndarray:
        if self.lower is None:
            return np.full(k + 1, -np.inf)
        return lattice.evaluate(self.lower, k)

    def upper_at(self, lattice: LatticeModel, k: int) -> np.ndarray:
        if self.upper is None:
            return np.full(k + 1, np.inf)
        return lattice.evaluate(self.upper, k)

    def lower_on(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.lower is None:
            return np.full(np.shape(x), -np.inf)
        return _as_level(self.lower(t, x), np.shape(x))

    def upper_on(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.upper is None:
            return np.full(np.shape(x), np.inf)
        return _as_level(self.upper(t, x), np.shape(x))


@dataclass(frozen=True)
class TerminalCondition:
    xi: Callable

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return _as_level(self.xi(x), x.shape)


class NodeTable:
    """Barrier given as an arbitrary table of node values, callable as ``(t, x)``.

    Lets merely measurable (e.g. discontinuous) barriers be supplied node by node.
    """

    def __init__(self, lattice: LatticeModel, levels: Sequence[np.ndarray]):
        if len(levels) != lattice.steps + 1 or any(len(v) != k + 1 for k, v in enumerate(levels)):
            raise DimensionMismatch("node table does not match lattice shape")
        self.lattice = lattice
        self.levels = [np.asarray(v, dtype=float).copy() for v in levels]

    def __call__(self, t, x):
        k = int(round(t / self.lattice.dt))
        j = np.rint((np.asarray(x) / self.lattice.increment + k) / 2).astype(int)
        return self.levels[k][j]


@dataclass(frozen=True)
class MokobodzkiWitness:
    """Process between the barriers with an explicit decomposition.

    ``X0`` has levels 0..N; ``Z0``, ``dA0``, ``dK0`` have levels 0..N-1. Along
    each edge ``(k, j) -> (k+1, j')``:
    ``X0[k+1][j'] - X0[k][j] = dA0[k][j] - dK0[k][j] +/- Z0[k][j] sqrt(dt)``.
    Cumulative ``A0``, ``K0`` start from zero by construction.
    """

    X0: NodeProcess
    Z0: NodeProcess
    dA0: NodeProcess
    dK0: NodeProcess


@dataclass(frozen=True)
class ProblemSpec:
    grid: TimeGrid
    driver: Driver
    barriers: BarrierPair
    terminal: TerminalCondition
    witness: Optional[MokobodzkiWitness] = None

    @property
    def lattice(self) -> LatticeModel:
        return build_lattice(self.grid)


@dataclass
class SolutionQuadruple:
    """Discrete ``(Y, Z, A, K)``; A and K are stored as nonnegative increments."""

    lattice: LatticeModel
    Y: NodeProcess
    Z: NodeProcess
    dA: NodeProcess
    dK: NodeProcess
    label: str = ""
    params: dict = field(default_factory=dict)

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    def flat_y(self) -> np.ndarray:
        return np.concatenate(self.Y)


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    worst_node: Optional[tuple] = None
    worst_violation: float = 0.0
    note: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            where = f" worst node {c.worst_node} ({c.worst_violation:.3g})" if c.worst_node is not None else ""
            note = f" - {c.note}" if c.note else ""
            out.append(f"[{status}] {c.name}{where}{note}")
        return out


def _worst(levels_violation: list[np.ndarray]) -> tuple[Optional[tuple], float]:
    worst_node, worst = None, 0.0
    for k, v in enumerate(levels_violation):
        if v.size == 0:
            continue
        j = int(np.argmax(v))
        if v[j] > worst:
            worst, worst_node = float(v[j]), (k, j)
    return worst_node, worst


def _growth_probe(spec: ProblemSpec) -> AssumptionCheck:
    K = spec.driver.growth_k
    ts = np.linspace(0.0, spec.grid.horizon, 10)
    ys = np.linspace(-10.0, 10.0, 11)
    zs = np.linspace(-10.0, 10.0, 11)
    Y, Z = np.meshgrid(ys, zs, indexing="ij")
    worst = (None, 0.0)
    for t in ts:
        val = spec.driver(t, Y, Z)
        excess = np.abs(val) - K * (1 + np.abs(Y) + np.abs(Z))
        if not np.all(np.isfinite(val)):
            excess = np.where(np.isfinite(val), excess, np.inf)
        i = np.unravel_index(np.argmax(excess), excess.shape)
        if excess[i] > worst[1]:
            worst = ((float(t), float(Y[i]), float(Z[i])), float(excess[i]))
    passed = worst[0] is None
    note = f"{len(ts) * Y.size} probe points"
    if not passed:
        t, y, z = worst[0]
        note += f"; |f| exceeds K(1+|y|+|z|) at (t,y,z)=({t:g},{y:g},{z:g})"
    return AssumptionCheck("linear growth", passed, worst[0], worst[1], note)


def validate_problem(spec: ProblemSpec) -> ValidationReport:
    """Check the standing assumptions on every lattice node.

    Raises ``HardViolation`` when the barriers are misordered or the terminal
    value leaves ``[L_T, U_T]``; emits ``GrowthWarning`` when the probed driver
    exceeds its declared linear-growth bound.
    """
    lattice = spec.lattice
    N = lattice.steps
    checks = []

    xT = lattice.x(N)
    xi = spec.terminal.values(xT)
    finite = bool(np.all(np.isfinite(xi)))
    checks.append(AssumptionCheck(
        "terminal value",
        finite,
        note="auto-pass: square integrability is automatic on a finite lattice" if finite
        else "terminal value is not finite at some node",
    ))

    checks.append(_growth_probe(spec))

    gaps = []
    for k in range(N + 1):
        L = spec.barriers.lower_at(lattice, k)
        U = spec.barriers.upper_at(lattice, k)
        with np.errstate(invalid="ignore"):
            gaps.append(np.nan_to_num(L - U, nan=0.0, neginf=0.0, posinf=np.inf))
    order_node, order_worst = _worst(gaps)
    LT = spec.barriers.lower_at(lattice, N)
    UT = spec.barriers.upper_at(lattice, N)
    term_viol = np.maximum(LT - xi, xi - UT)
    term_viol = np.where(np.isfinite(term_viol), term_viol, np.where(np.isnan(term_viol), 0.0, term_viol))
    term_node, term_worst = _worst([np.zeros(k + 1) for k in range(N)] + [term_viol])
    order_ok = order_node is None or order_worst <= ORDER_TOL
    term_ok = term_node is None or term_worst <= ORDER_TOL
    checks.append(AssumptionCheck(
        "barrier order L <= U",
        order_ok,
        None if order_ok else order_node,
        order_worst,
        "square integrability of L+, U+ auto-passes on a finite lattice",
    ))
    checks.append(AssumptionCheck(
        "terminal between barriers",
        term_ok,
        None if term_ok else term_node,
        term_worst,
    ))

    if spec.witness is not None:
        ok = check_mokobodzki_witness(spec, spec.witness)
        checks.append(AssumptionCheck("supplied witness", ok))
    else:
        checks.append(AssumptionCheck(
            "witness",
            order_ok,
            note="none supplied; on a finite lattice L <= U admits the forward-clamp witness",
        ))

    report = ValidationReport(checks)
    growth = report.get("linear growth")
    if not growth.passed:
        warnings.warn(growth.note, GrowthWarning, stacklevel=2)
    if not order_ok:
        raise HardViolation(f"L > U at node {order_node} by {order_worst:.6g}", report)
    if not term_ok:
        raise HardViolation(f"terminal value outside [L_T, U_T] at node {term_node} by {term_worst:.6g}", report)
    return report


def check_mokobodzki_witness(spec: ProblemSpec, w: MokobodzkiWitness, tol: float = WITNESS_TOL) -> bool:
    lattice = spec.lattice
    N = lattice.steps
    if len(w.X0) != N + 1 or any(len(v) != k + 1 for k, v in enumerate(w.X0)):
        raise DimensionMismatch("X0 must have levels 0..N")
    for name, proc in (("Z0", w.Z0), ("dA0", w.dA0), ("dK0", w.dK0)):
        if len(proc) != N or any(len(v) != k + 1 for k, v in enumerate(proc)):
            raise DimensionMismatch(f"{name} must have levels 0..N-1")

    h = lattice.increment
    for k in range(N + 1):
        X = np.asarray(w.X0[k], dtype=float)
        L = spec.barriers.lower_at(lattice, k)
        U = spec.barriers.upper_at(lattice, k)
        if np.any(X < L - tol) or np.any(X > U + tol):
            return False
        if k == N:
            break
        dA = np.asarray(w.dA0[k], dtype=float)
        dK = np.asarray(w.dK0[k], dtype=float)
        if np.any(dA < -tol) or np.any(dK < -tol):
            return False
        Z = np.asarray(w.Z0[k], dtype=float)
        nxt = np.asarray(w.X0[k + 1], dtype=float)
        up = nxt[1:] - X - (dA - dK + Z * h)
        dn = nxt[:-1] - X - (dA - dK - Z * h)
        if np.max(np.abs(up)) > tol or np.max(np.abs(dn)) > tol:
            return False
    return True


def forward_clamp_witness(spec: ProblemSpec, start: float = 0.0) -> MokobodzkiWitness:
    """Witness ``X0 = clamp(start, L, U)`` with its one-step Doob decomposition."""
    lattice = spec.lattice
    N = lattice.steps
    X0 = []
    for k in range(N + 1):
        L = spec.barriers.lower_at(lattice, k)
        U = spec.barriers.upper_at(lattice, k)
        X0.append(np.minimum(np.maximum(np.full(k + 1, float(start)), L), U))
    h = lattice.increment
    Z0, dA0, dK0 = [], [], []
    for k in range(N):
        up, dn = X0[k + 1][1:], X0[k + 1][:-1]
        Z0.append((up - dn) / (2 * h))
        drift = 0.5 * (up + dn) - X0[k]
        dA0.append(np.maximum(drift, 0.0))
        dK0.append(np.maximum(-drift, 0.0))
    return MokobodzkiWitness(X0, Z0, dA0, dK0)
