"""Backward induction on the binomial lattice.

Every solver shares one semi-implicit step: with ``c = (Y_up + Y_dn) / 2`` and
``z = (Y_up - Y_dn) / (2 sqrt(dt))`` the node value solves

    y = c + e + dt * [f(t, y, z) + m (L - y)^+ - n (y - U)^+]

where ``e`` is an optional predictable forcing term. Reflection, when
requested, clamps the solution onto ``[L, U]`` afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (
    Driver,
    LatticeModel,
    NodeProcess,
    ProblemSpec,
    SolutionQuadruple,
)

ROOT_TOL = 1e-13
MAX_ITER = 200
MAX_EXPANSIONS = 80
STABILITY_GATE = 0.5


class StepDiverged(RuntimeError):
    pass


class InvalidPenalty(ValueError):
    pass


class UnstableStep(ValueError):
    """``dt * Lip_y`` exceeds the stability gate of the semi-implicit step."""


class NotNondecreasing(ValueError):
    pass


@dataclass
class StepSolution:
    y: np.ndarray
    converged: np.ndarray
    iterations: int


def _penalty(y, L, U, m, n):
    out = np.zeros_like(y)
    if m:
        out += m * np.maximum(L - y, 0.0)
    if n:
        out -= n * np.maximum(y - U, 0.0)
    return out


def solve_step(
    fyz: Callable,
    c: np.ndarray,
    z: np.ndarray,
    dt: float,
    L: np.ndarray,
    U: np.ndarray,
    m: float = 0.0,
    n: float = 0.0,
    growth_k: float = 1.0,
) -> StepSolution:
    """Solve ``y = c + dt * g(y)`` node-wise, ``g = f(., z) + penalties``.

    Newton with a finite-difference slope, safeguarded by a bracket that starts
    from the growth bound around ``c`` widened to reach any active barrier and
    is grown geometrically if needed; bisection whenever the Newton step leaves
    the bracket.
    """
    c = np.asarray(c, dtype=float)
    z = np.asarray(z, dtype=float)

    def F(y, idx):
        return y - dt * (fyz(y, z[idx], idx) + _penalty(y, L[idx], U[idx], m, n)) - c[idx]

    all_idx = np.arange(c.size)
    B = dt * (growth_k * (1 + np.abs(c) + np.abs(z)) + 1.0)
    lo, hi = c - B, c + B
    # a penalty only pulls the root toward its barrier, never past it
    if m:
        hi = np.where(np.isfinite(L), np.maximum(hi, L), hi)
    if n:
        lo = np.where(np.isfinite(U), np.minimum(lo, U), lo)
    B = np.maximum(c - lo, hi - c)
    f_lo, f_hi = F(lo, all_idx), F(hi, all_idx)
    for _ in range(MAX_EXPANSIONS):
        bad_lo = f_lo > 0
        bad_hi = f_hi < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        B = np.where(bad_lo | bad_hi, 2 * B, B)
        if bad_lo.any():
            i = np.flatnonzero(bad_lo)
            lo[i] = c[i] - B[i]
            f_lo[i] = F(lo[i], i)
        if bad_hi.any():
            i = np.flatnonzero(bad_hi)
            hi[i] = c[i] + B[i]
            f_hi[i] = F(hi[i], i)
    else:
        raise StepDiverged("could not bracket the step equation")
    if not (np.all(np.isfinite(f_lo)) and np.all(np.isfinite(f_hi))):
        raise StepDiverged("step equation is not finite on its bracket")

    y = np.clip(c.copy(), lo, hi)
    converged = np.zeros(c.size, dtype=bool)
    active = all_idx
    it = 0
    for it in range(1, MAX_ITER + 1):
        fy = F(y[active], active)
        if not np.all(np.isfinite(fy)):
            raise StepDiverged("step residual became non-finite")
        pos = fy > 0
        hi[active] = np.where(pos, y[active], hi[active])
        lo[active] = np.where(pos, lo[active], y[active])
        width = hi[active] - lo[active]
        done = (np.abs(fy) <= ROOT_TOL) | (width <= 4 * np.spacing(np.maximum(np.abs(y[active]), 1.0)))
        converged[active[done]] = True
        keep = ~done
        if not keep.any():
            break
        active, fy = active[keep], fy[keep]
        ya = y[active]
        eps = 1e-7 * np.maximum(np.abs(ya), 1.0)
        slope = (F(ya + eps, active) - fy) / eps
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = ya - fy / slope
        mid = 0.5 * (lo[active] + hi[active])
        ok = (slope > 0) & np.isfinite(newton) & (newton > lo[active]) & (newton < hi[active])
        y[active] = np.where(ok, newton, mid)
    if not converged.all():
        raise StepDiverged(f"root finder did not converge in {MAX_ITER} iterations")
    return StepSolution(y, converged, it)


@dataclass
class NodeProblem:
    """A problem already laid out on the lattice.

    ``driver(k, y, z, idx=None)`` evaluates the coefficient at level ``k`` on
    the nodes ``idx`` (all nodes when ``None``); ``lower`` and
    ``upper`` hold node values (``-inf``/``+inf`` when unbounded).
    """

    lattice: LatticeModel
    driver: Callable
    lower: NodeProcess
    upper: NodeProcess
    terminal: np.ndarray
    growth_k: float = 1.0
    lipschitz_y: Optional[float] = None


def discretize(problem: ProblemSpec, driver: Optional[Driver] = None) -> NodeProblem:
    lattice = problem.lattice
    drv = driver or problem.driver
    N = lattice.steps

    def level_driver(k, y, z, idx=None):
        return drv(lattice.t(k), y, z)

    return NodeProblem(
        lattice=lattice,
        driver=level_driver,
        lower=[problem.barriers.lower_at(lattice, k) for k in range(N + 1)],
        upper=[problem.barriers.upper_at(lattice, k) for k in range(N + 1)],
        terminal=problem.terminal.values(lattice.x(N)),
        growth_k=drv.growth_k,
        lipschitz_y=drv.lipschitz_y,
    )


def _check_gate(np_: NodeProblem):
    lip = np_.lipschitz_y
    if lip is not None and np_.lattice.dt * lip > STABILITY_GATE:
        raise UnstableStep(
            f"dt * Lip_y = {np_.lattice.dt * lip:.4g} exceeds {STABILITY_GATE}; refine the grid"
        )


def backward_induction(
    np_: NodeProblem,
    m: float = 0.0,
    n: float = 0.0,
    clamp_lower: bool = False,
    clamp_upper: bool = False,
    forcing: Optional[NodeProcess] = None,
    label: str = "",
) -> SolutionQuadruple:
    """Generic solver behind every public entry point.

    After the step, ``dA`` collects ``dt m (L - Y)^+`` plus any push needed to
    lift ``Y`` onto ``L``; ``dK`` likewise for ``U``. The discrete identity
    ``Y = c + e + dt f(Y, Z) + dA - dK`` then holds at every node.
    """
    if m < 0 or n < 0:
        raise InvalidPenalty(f"penalty coefficients must be nonnegative, got m={m}, n={n}")
    _check_gate(np_)
    lat = np_.lattice
    N, dt, h = lat.steps, lat.dt, lat.increment

    Y: list = [None] * (N + 1)
    Z: list = [None] * N
    dA: list = [None] * N
    dK: list = [None] * N
    Y[N] = np.asarray(np_.terminal, dtype=float).copy()

    for k in range(N - 1, -1, -1):
        up, dn = Y[k + 1][1:], Y[k + 1][:-1]
        c = 0.5 * (up + dn)
        if forcing is not None:
            c = c + forcing[k]
        z = (up - dn) / (2 * h)
        L, U = np_.lower[k], np_.upper[k]

        def fyz(y, zz, idx, _k=k):
            return np_.driver(_k, y, zz, idx)

        y = solve_step(fyz, c, z, dt, L, U, m, n, np_.growth_k).y
        clamped_up = np.zeros(k + 1, dtype=bool)
        clamped_dn = np.zeros(k + 1, dtype=bool)
        if clamp_lower:
            clamped_up = y < L
            y = np.where(clamped_up, L, y)
        if clamp_upper:
            clamped_dn = y > U
            y = np.where(clamped_dn, U, y)

        a = dt * m * np.maximum(L - y, 0.0) if m else np.zeros(k + 1)
        kk = dt * n * np.maximum(y - U, 0.0) if n else np.zeros(k + 1)
        if clamp_lower or clamp_upper:
            idx = np.arange(k + 1)
            drift = dt * fyz(y, z, idx)
            resid = y - c - drift - a + kk
            # where L == U either sign of the residual may occur
            squeeze = (clamped_up | clamped_dn) & (L == U)
            a = a + np.where(clamped_up | squeeze, np.maximum(resid, 0.0), 0.0)
            kk = kk + np.where(clamped_dn | squeeze, np.maximum(-resid, 0.0), 0.0)
        Y[k], Z[k], dA[k], dK[k] = y, z, a, kk

    return SolutionQuadruple(lat, Y, Z, dA, dK, label=label, params={"m": m, "n": n})


def solve_bsde(problem: ProblemSpec, driver: Optional[Driver] = None) -> SolutionQuadruple:
    """Plain BSDE; barriers in ``problem`` are ignored."""
    node = discretize(problem, driver)
    N = node.lattice.steps
    node.lower = [np.full(k + 1, -np.inf) for k in range(N + 1)]
    node.upper = [np.full(k + 1, np.inf) for k in range(N + 1)]
    return backward_induction(node, label="bsde")


def solve_penalized(
    problem: ProblemSpec, m: float, n: float, driver: Optional[Driver] = None
) -> SolutionQuadruple:
    """Doubly penalized BSDE with lower coefficient ``m`` and upper coefficient ``n``."""
    return backward_induction(discretize(problem, driver), m=m, n=n, label="penalized")


def solve_reflected_oracle(problem: ProblemSpec, driver: Optional[Driver] = None) -> SolutionQuadruple:
    """Clamped doubly reflected solution: unreflected step, then project onto [L, U]."""
    return backward_induction(discretize(problem, driver), clamp_lower=True, clamp_upper=True, label="oracle")


def solve_hybrid(problem: ProblemSpec, m: float, driver: Optional[Driver] = None) -> SolutionQuadruple:
    """Upper barrier reflected by clamping, lower barrier penalized with ``m``."""
    return backward_induction(discretize(problem, driver), m=m, clamp_upper=True, label="hybrid")


def solve_node_problem(np_: NodeProblem, **kwargs) -> SolutionQuadruple:
    return backward_induction(np_, **kwargs)


# --- forward sweeps --------------------------------------------------------


def expected_level(lattice: LatticeModel, proc: NodeProcess) -> np.ndarray:
    probs = lattice.all_probabilities()
    return np.array([float(np.dot(probs[k], v)) for k, v in enumerate(proc)])


def expected_cumulant(lattice: LatticeModel, increments: NodeProcess) -> np.ndarray:
    """``E[A_{t_k}]`` for ``k = 0..N`` from node increments."""
    per_step = expected_level(lattice, increments)
    return np.concatenate([[0.0], np.cumsum(per_step)])


def path_sum_moments(lattice: LatticeModel, increments: NodeProcess) -> tuple[float, float]:
    """Exact ``(E[S_T], E[S_T^2])`` of ``S_T = sum_k inc[k][j_k]`` by a forward sweep."""
    p = np.array([1.0])
    m1 = np.array([0.0])
    m2 = np.array([0.0])
    for k, inc in enumerate(increments):
        inc = np.asarray(inc, dtype=float)
        m2 = m2 + 2 * inc * m1 + p * inc**2
        m1 = m1 + p * inc
        p, m1, m2 = (_spread(v) for v in (p, m1, m2))
    return float(m1.sum()), float(m2.sum())


def _spread(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.concatenate([v, [0.0]]) + np.concatenate([[0.0], v]))


def max_path_sum(increments: NodeProcess) -> float:
    """``max`` over all lattice paths of ``sum_k g[k][j_k]`` by backward max-plus induction."""
    N = len(increments)
    V = np.zeros(N + 1)
    for k in range(N - 1, -1, -1):
        V = np.asarray(increments[k], dtype=float) + np.maximum(V[1:], V[:-1])
    return float(V[0])


def sample_paths(lattice: LatticeModel, n_paths: int, seed: int) -> np.ndarray:
    """Node indices ``j_k`` of uniform random walks, shape ``(n_paths, N + 1)``."""
    rng = np.random.default_rng(seed)
    ups = rng.integers(0, 2, size=(n_paths, lattice.steps))
    return np.concatenate([np.zeros((n_paths, 1), dtype=int), np.cumsum(ups, axis=1)], axis=1)


def all_paths(lattice: LatticeModel) -> np.ndarray:
    N = lattice.steps
    bits = (np.arange(2**N)[:, None] >> np.arange(N)[None, :]) & 1
    return np.concatenate([np.zeros((2**N, 1), dtype=int), np.cumsum(bits, axis=1)], axis=1)


def along_paths(proc: NodeProcess, paths: np.ndarray) -> np.ndarray:
    """Gather ``proc`` along paths; result shape ``(n_paths, len(proc))``."""
    return np.stack([np.asarray(proc[k])[paths[:, k]] for k in range(len(proc))], axis=1)


EXHAUSTIVE_MAX_STEPS = 12
SUP_SAMPLES = 10_000


def expected_sup_square(q: SolutionQuadruple, n_paths: int = SUP_SAMPLES, seed: int = 0) -> tuple[float, float]:
    """``E[max_k Y_k^2]`` with its standard error.

    Exact enumeration (stderr 0) when ``N <= 12``, otherwise uniform sampling of
    ``n_paths`` random walks.
    """
    lat = q.lattice
    if lat.steps <= EXHAUSTIVE_MAX_STEPS:
        paths = all_paths(lat)
        vals = np.max(along_paths(q.Y, paths) ** 2, axis=1)
        return float(vals.mean()), 0.0
    paths = sample_paths(lat, n_paths, seed)
    vals = np.max(along_paths(q.Y, paths) ** 2, axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths))


# --- transforms ------------------------------------------------------------


@dataclass
class ShiftedProblem:
    """Problem produced by a shift transform, laid out on the lattice."""

    node_problem: NodeProblem
    offset: Optional[NodeProcess] = None  # Markov process subtracted from Y (K-shift)
    forcing: Optional[NodeProcess] = None  # predictable drift frozen into the step
    cumulative: Optional[NodeProcess] = None  # per-step increments of the path shift
    y_hat: Optional[NodeProcess] = None  # Markov part of the transformed process


def driver_shift_transform(problem: ProblemSpec, solved: SolutionQuadruple) -> ShiftedProblem:
    """Freeze the driver along a solution, leaving a zero-driver problem.

    With ``fhat_k = f(t_k, Y_k, Z_k)`` and ``S_k = sum_{i<k} dt fhat_i`` along a
    path, the transformed objects are ``Yhat = Y + S``, ``Lhat = L + S`` and
    ``xihat = xi + S_N``. ``S`` is path dependent but its increments are known
    one step ahead, so the zero-driver reflected problem for ``Yhat`` reduces
    node-wise to a zero-driver step with forcing ``dt fhat`` and barriers
    ``L, U``; ``y_hat`` holds ``Yhat - S``, i.e. the original ``Y``.
    """
    node = discretize(problem)
    lat = node.lattice
    fhat = [node.driver(k, solved.Y[k], solved.Z[k]) for k in range(lat.steps)]
    forcing = [lat.dt * f for f in fhat]

    def zero(k, y, z, idx=None):
        return np.zeros_like(y)

    shifted = NodeProblem(lat, zero, node.lower, node.upper, node.terminal, growth_k=0.0, lipschitz_y=0.0)
    return ShiftedProblem(shifted, forcing=forcing, cumulative=forcing, y_hat=[y.copy() for y in solved.Y])


def resolve_shifted(sp: ShiftedProblem, clamp: bool = True) -> SolutionQuadruple:
    return backward_induction(
        sp.node_problem, clamp_lower=clamp, clamp_upper=clamp, forcing=sp.forcing, label="shift-resolve"
    )


def path_shift(sp: ShiftedProblem, paths: np.ndarray) -> np.ndarray:
    """Cumulative shift ``S_k`` along paths, shape ``(n_paths, N + 1)``."""
    inc = along_paths(sp.cumulative, paths[:, :-1])
    return np.concatenate([np.zeros((paths.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1)


def check_nondecreasing(lattice: LatticeModel, proc: NodeProcess, tol: float = 0.0) -> None:
    N = lattice.steps
    if len(proc) != N + 1 or any(len(v) != k + 1 for k, v in enumerate(proc)):
        raise NotNondecreasing("process shape does not match the lattice")
    if abs(proc[0][0]) > tol:
        raise NotNondecreasing(f"process must start at 0, got {proc[0][0]}")
    for k in range(N):
        cur, nxt = np.asarray(proc[k]), np.asarray(proc[k + 1])
        if np.any(nxt[1:] < cur - tol) or np.any(nxt[:-1] < cur - tol):
            raise NotNondecreasing(f"process decreases along an edge leaving level {k}")


def k_shift_transform(problem: ProblemSpec, k_values: NodeProcess) -> ShiftedProblem:
    """Shift by a node-valued nondecreasing process ``K`` with ``K_0 = 0``.

    Produces the problem with driver ``f(t, y + K, z)``, barriers ``L - K`` and
    ``U - K`` and terminal value ``xi - K_T``. Its solution equals ``Y - K`` when
    ``Y`` solves the original problem with the forcing ``-(E_k[K_{k+1}] - K_k)``.
    """
    node = discretize(problem)
    lat = node.lattice
    check_nondecreasing(lat, k_values)
    Kp = [np.asarray(v, dtype=float) for v in k_values]
    base = node.driver

    def shifted_driver(k, y, z, idx=None):
        off = Kp[k] if idx is None else Kp[k][idx]
        return base(k, y + off, z)

    shifted = NodeProblem(
        lat,
        shifted_driver,
        [L - Kp[k] for k, L in enumerate(node.lower)],
        [U - Kp[k] for k, U in enumerate(node.upper)],
        node.terminal - Kp[-1],
        growth_k=node.growth_k,
        lipschitz_y=node.lipschitz_y,
    )
    return ShiftedProblem(shifted, offset=Kp)


def k_drift_forcing(lattice: LatticeModel, k_values: NodeProcess) -> NodeProcess:
    """``-(E_k[K_{k+1}] - K_k)``: the forcing that carries ``K`` in unshifted form."""
    return [
        -(0.5 * (k_values[k + 1][1:] + k_values[k + 1][:-1]) - k_values[k])
        for k in range(lattice.steps)
    ]
