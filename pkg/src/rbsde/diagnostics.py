"""Numerical checks of the defining conditions of a reflected solution.

All pathwise sums here are additive over nodes, so their maximum over every
lattice path is computed exactly by backward max-plus induction instead of
by path enumeration or sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import LatticeModel, NodeProcess, ProblemSpec, SolutionQuadruple
from .lattice import (
    NodeProblem,
    along_paths,
    backward_induction,
    discretize,
    driver_shift_transform,
    expected_level,
    expected_sup_square,
    k_drift_forcing,
    k_shift_transform,
    max_path_sum,
    path_shift,
    path_sum_moments,
    resolve_shifted,
    sample_paths,
    solve_penalized,
    solve_reflected_oracle,
)

ALGEBRAIC_TOL = 1e-12
ROOT_LIMITED_TOL = 1e-10


class InadmissiblePair(ValueError):
    pass


class OrderingViolated(ValueError):
    pass


class NotASupersolution(ValueError):
    pass


def _levels(problem_or_node, lattice: LatticeModel):
    if isinstance(problem_or_node, NodeProblem):
        return problem_or_node.lower, problem_or_node.upper
    node = discretize(problem_or_node)
    return node.lower, node.upper


# --- Skorohod complementarity ----------------------------------------------


@dataclass
class SkorohodTestPair:
    L_star: NodeProcess
    U_star: NodeProcess
    theta: float = float("nan")


def sample_test_pairs(
    q: SolutionQuadruple,
    problem,
    thetas: Sequence[float],
    strict: bool = True,
) -> list[SkorohodTestPair]:
    """Canonical family ``L* = L + theta (Y - L)``, ``U* = U - theta (U - Y)``.

    An unbounded barrier is replaced by the finite probe ``Y -/+ (1 - theta)``.
    With ``strict=False`` a penalized solution that crosses its barriers is
    accepted; the pair is then only used to measure the residual.
    """
    lower, upper = _levels(problem, q.lattice)
    if strict:
        for k, (y, L, U) in enumerate(zip(q.Y, lower, upper)):
            bad = (y < L - ALGEBRAIC_TOL) | (y > U + ALGEBRAIC_TOL)
            if bad.any():
                j = int(np.flatnonzero(bad)[0])
                raise OrderingViolated(f"L <= Y <= U fails at node ({k}, {j})")
    pairs = []
    for th in thetas:
        if not 0.0 <= th <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        Ls, Us = [], []
        for y, L, U in zip(q.Y, lower, upper):
            with np.errstate(invalid="ignore"):
                # convex-combination form is exact at theta = 0 and theta = 1
                Ls.append(np.where(np.isfinite(L), (1 - th) * L + th * y, y - (1 - th)))
                Us.append(np.where(np.isfinite(U), (1 - th) * U + th * y, y + (1 - th)))
        pairs.append(SkorohodTestPair(Ls, Us, th))
    return pairs


def skorohod_residual(
    q: SolutionQuadruple,
    pair: SkorohodTestPair,
    problem=None,
    strict: bool = True,
) -> tuple[float, float]:
    """``r_A = max_paths sum_k |Y_k - L*_k| dA_k`` and the analogue for ``K``.

    For admissible pairs ``|Y - L*| = Y - L*``. ``strict`` checks
    ``L <= L* <= Y <= U* <= U`` (barriers taken from ``problem`` when given).
    """
    N = q.lattice.steps
    if strict:
        lower, upper = _levels(problem, q.lattice) if problem is not None else (None, None)
        for k in range(N + 1):
            y, Ls, Us = q.Y[k], pair.L_star[k], pair.U_star[k]
            bad = (Ls > y + ALGEBRAIC_TOL) | (Us < y - ALGEBRAIC_TOL)
            if lower is not None:
                bad |= (Ls < lower[k] - ALGEBRAIC_TOL) | (Us > upper[k] + ALGEBRAIC_TOL)
            if bad.any():
                j = int(np.flatnonzero(bad)[0])
                raise InadmissiblePair(f"pair ordering violated at node ({k}, {j})")
    ga = [np.abs(q.Y[k] - pair.L_star[k]) * q.dA[k] for k in range(N)]
    gk = [np.abs(pair.U_star[k] - q.Y[k]) * q.dK[k] for k in range(N)]
    return max_path_sum(ga), max_path_sum(gk)


def complementarity_defect(q: SolutionQuadruple, problem) -> tuple[float, float]:
    """Largest node value of ``dA (Y - L)`` and ``dK (U - Y)`` (unbounded sides skipped)."""
    lower, upper = _levels(problem, q.lattice)
    ra = rk = 0.0
    for k in range(q.lattice.steps):
        L, U, y = lower[k], upper[k], q.Y[k]
        fa = np.isfinite(L)
        fk = np.isfinite(U)
        if fa.any():
            ra = max(ra, float(np.max(np.abs(q.dA[k][fa] * (y[fa] - L[fa])))))
        if fk.any():
            rk = max(rk, float(np.max(np.abs(q.dK[k][fk] * (U[fk] - y[fk])))))
    return ra, rk


# --- a priori bounds --------------------------------------------------------


@dataclass
class BoundsRecord:
    e_sup_y2: float
    e_int_z2: float
    e_a_T2: float
    e_k_T2: float
    e_sup_y2_se: float = 0.0

    @property
    def total(self) -> float:
        return self.e_sup_y2 + self.e_int_z2 + self.e_a_T2 + self.e_k_T2

    def as_tuple(self) -> tuple:
        return (self.e_sup_y2, self.e_int_z2, self.e_a_T2, self.e_k_T2)


def apriori_bounds(q: SolutionQuadruple, n_paths: int = 10_000, seed: int = 0) -> BoundsRecord:
    """Exact tree sweeps for the Z, A and K moments; ``E[sup Y^2]`` by sampling."""
    lat = q.lattice
    ez = float(lat.dt * np.sum(expected_level(lat, [z**2 for z in q.Z])))
    _, ea2 = path_sum_moments(lat, q.dA)
    _, ek2 = path_sum_moments(lat, q.dK)
    es, es_se = expected_sup_square(q, n_paths, seed)
    return BoundsRecord(es, ez, ea2, ek2, es_se)


# --- comparison --------------------------------------------------------------


@dataclass
class ViolationReport:
    count: int
    worst: float
    first_node: Optional[tuple] = None
    certificate_ok: Optional[bool] = None


def probe_certificate(problem_a: ProblemSpec, problem_b: ProblemSpec) -> bool:
    """``xi_A <= xi_B`` on terminal nodes and ``f_A <= f_B`` on a probe grid."""
    lat = problem_a.lattice
    xT = lat.x(lat.steps)
    if np.any(problem_a.terminal.values(xT) > problem_b.terminal.values(xT)):
        return False
    ys = np.linspace(-5, 5, 21)
    Y, Z = np.meshgrid(ys, ys, indexing="ij")
    for t in problem_a.grid.times():
        if np.any(problem_a.driver(t, Y, Z) > problem_b.driver(t, Y, Z)):
            return False
    return True


def comparison_check(
    run_a: SolutionQuadruple,
    run_b: SolutionQuadruple,
    problem_a: Optional[ProblemSpec] = None,
    problem_b: Optional[ProblemSpec] = None,
    tol: float = ROOT_LIMITED_TOL,
) -> ViolationReport:
    """Count nodes with ``Y_A > Y_B + tol``."""
    if not run_a.lattice.same_as(run_b.lattice):
        raise ValueError("runs live on different lattices")
    cert = None
    if problem_a is not None and problem_b is not None:
        cert = probe_certificate(problem_a, problem_b)
    count, worst, first = 0, 0.0, None
    for k, (ya, yb) in enumerate(zip(run_a.Y, run_b.Y)):
        d = ya - yb
        bad = d > tol
        if bad.any():
            if first is None:
                first = (k, int(np.flatnonzero(bad)[0]))
            count += int(bad.sum())
        worst = max(worst, float(np.max(d)))
    return ViolationReport(count, worst, first, cert)


def sandwich_runs(
    problem: ProblemSpec, m: float, n: float, oracle: Optional[SolutionQuadruple] = None
) -> tuple[SolutionQuadruple, SolutionQuadruple, SolutionQuadruple]:
    """``(Y^-, Y^{n,m}, Y^+)`` built from the oracle's ``A*``, ``K*``.

    ``Y^+`` carries the lower penalty plus the forcing ``dA*``; ``Y^-`` the
    upper penalty minus ``dK*``.
    """
    oracle = oracle or solve_reflected_oracle(problem)
    node = discretize(problem)
    y_plus = backward_induction(node, m=m, forcing=oracle.dA, label="sandwich+")
    y_minus = backward_induction(node, n=n, forcing=[-k for k in oracle.dK], label="sandwich-")
    mid = solve_penalized(problem, m, n)
    return y_minus, mid, y_plus


# --- minimality ---------------------------------------------------------------


@dataclass
class MinimalityReport:
    candidates: int
    violations: int
    worst: float
    first: Optional[tuple] = None
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def supersolution_defect(problem: ProblemSpec, cand: SolutionQuadruple) -> float:
    """Largest ``|Y_k - c_k - dt f(Y_k, Z_k) - dA_k + dK_k|`` with ``Z`` from ``Y``."""
    node = discretize(problem)
    lat = cand.lattice
    h, dt = lat.increment, lat.dt
    worst = float(np.max(np.abs(cand.Y[-1] - node.terminal)))
    for k in range(lat.steps):
        up, dn = cand.Y[k + 1][1:], cand.Y[k + 1][:-1]
        c = 0.5 * (up + dn)
        z = (up - dn) / (2 * h)
        r = cand.Y[k] - c - dt * node.driver(k, cand.Y[k], z) - cand.dA[k] + cand.dK[k]
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def random_supersolutions(
    problem: ProblemSpec,
    oracle: SolutionQuadruple,
    count: int,
    seed: int = 0,
    scale: float = 0.01,
) -> list[SolutionQuadruple]:
    """Discrete supersolutions dominating ``L`` that keep the oracle's ``K``.

    Even-numbered candidates inflate the oracle's ``dA`` by random nonnegative
    amounts; odd-numbered ones push a random nonnegative forcing and then lift
    onto ``L``, independently of the oracle's ``dA``.
    """
    rng = np.random.default_rng(seed)
    node = discretize(problem)
    lat = oracle.lattice
    out = []
    for i in range(count):
        extra = [scale * rng.exponential(size=k + 1) * (rng.random(k + 1) < 0.5) for k in range(lat.steps)]
        if i % 2 == 0:
            push = [a + e for a, e in zip(oracle.dA, extra)]
            forcing = [p - kk for p, kk in zip(push, oracle.dK)]
            q = backward_induction(node, forcing=forcing, label="candidate")
            q.dA = push
        else:
            forcing = [e - kk for e, kk in zip(extra, oracle.dK)]
            q = backward_induction(node, forcing=forcing, clamp_lower=True, label="candidate")
            q.dA = [a + e for a, e in zip(q.dA, extra)]
        q.dK = [kk.copy() for kk in oracle.dK]
        out.append(q)
    return out


def inflate_candidate(problem: ProblemSpec, oracle: SolutionQuadruple, amount: float) -> SolutionQuadruple:
    """The oracle with ``amount`` added to ``dA`` at the root node."""
    node = discretize(problem)
    push = [a.copy() for a in oracle.dA]
    push[0] = push[0] + amount
    q = backward_induction(node, forcing=[p - kk for p, kk in zip(push, oracle.dK)], label="candidate")
    q.dA = push
    q.dK = [kk.copy() for kk in oracle.dK]
    return q


def minimality_check(
    problem: ProblemSpec,
    candidates: Sequence[SolutionQuadruple],
    oracle: Optional[SolutionQuadruple] = None,
    tol: float = ROOT_LIMITED_TOL,
) -> MinimalityReport:
    """Every verified supersolution dominating ``L`` must dominate the oracle."""
    oracle = oracle or solve_reflected_oracle(problem)
    lower, _ = _levels(problem, oracle.lattice)
    violations, worst, first = 0, 0.0, None
    details = []
    for i, cand in enumerate(candidates):
        defect = supersolution_defect(problem, cand)
        if defect > tol:
            raise NotASupersolution(f"candidate {i} violates its decomposition identity by {defect:.3g}")
        if any(np.any(d < -tol) for d in cand.dA):
            raise NotASupersolution(f"candidate {i} has a decreasing A")
        if any(np.max(np.abs(a - b)) > tol for a, b in zip(cand.dK, oracle.dK)):
            raise NotASupersolution(f"candidate {i} does not share the reference K")
        if any(np.any(y < L - tol) for y, L in zip(cand.Y, lower)):
            raise NotASupersolution(f"candidate {i} does not dominate L")
        cand_worst = 0.0
        for k, (yo, yc) in enumerate(zip(oracle.Y, cand.Y)):
            d = yo - yc
            bad = d > tol
            if bad.any():
                violations += int(bad.sum())
                if first is None:
                    first = (i, k, int(np.flatnonzero(bad)[0]))
            cand_worst = max(cand_worst, float(np.max(d)))
        worst = max(worst, cand_worst)
        details.append({"candidate": i, "defect": defect, "max_oracle_excess": cand_worst})
    return MinimalityReport(len(candidates), violations, worst, first, details)


# --- shift transforms ---------------------------------------------------------


def shift_equivalence(problem: ProblemSpec, solved: SolutionQuadruple, n_paths: int = 1000, seed: int = 0) -> float:
    """Max gap between the transformed process and its zero-driver re-solve.

    Checked node-wise on the Markov part and along sampled paths for the full
    path-dependent ``Yhat = Y + sum dt fhat``.
    """
    sp = driver_shift_transform(problem, solved)
    re = resolve_shifted(sp)
    node_gap = max(float(np.max(np.abs(a - b))) for a, b in zip(re.Y, sp.y_hat))
    lat = solved.lattice
    paths = sample_paths(lat, n_paths, seed)
    S = path_shift(sp, paths)
    yhat = along_paths(sp.y_hat, paths) + S
    resolved = along_paths(re.Y, paths) + S
    return max(node_gap, float(np.max(np.abs(yhat - resolved))))


def k_shift_replay(
    problem: ProblemSpec, run: SolutionQuadruple, m: float, n_paths: int = 2000, seed: int = 0
) -> dict:
    """Replay the lower-barrier argument with a run's own (path dependent) ``K``.

    Solves the lower-penalized problem with the run's ``dK`` frozen as a
    forcing (it must reproduce the run's ``Y``), then checks along sampled
    paths that ``Ybar = Y - K`` satisfies the equation with driver
    ``f(t, y + K, z)`` and lower barrier ``L - K``.
    """
    node = discretize(problem)
    lat = run.lattice
    tilde = backward_induction(node, m=m, forcing=[-k for k in run.dK], label="k-replay")
    reproduce = max(float(np.max(np.abs(a - b))) for a, b in zip(tilde.Y, run.Y))

    paths = sample_paths(lat, n_paths, seed)
    dt, h = lat.dt, lat.increment
    Kpath = np.zeros(n_paths)
    worst = 0.0
    for k in range(lat.steps):
        j = paths[:, k]
        ybar = tilde.Y[k][j] - Kpath
        K_next = Kpath + run.dK[k][j]
        up = tilde.Y[k + 1][j + 1] - K_next
        dn = tilde.Y[k + 1][j] - K_next
        z = (up - dn) / (2 * h)
        fK = node.driver(k, ybar + Kpath, z)
        LK = node.lower[k][j] - Kpath
        rhs = 0.5 * (up + dn) + dt * (fK + m * np.maximum(LK - ybar, 0.0))
        worst = max(worst, float(np.max(np.abs(ybar - rhs))))
        Kpath = K_next
    return {"reproduce_gap": reproduce, "shift_identity_gap": worst}


def k_shift_markov_check(problem: ProblemSpec, k_values: NodeProcess, m: float = 0.0) -> float:
    """Solve the K-shifted problem and compare with ``Y - K`` from the unshifted form."""
    sp = k_shift_transform(problem, k_values)
    shifted = backward_induction(sp.node_problem, m=m, label="k-shift")
    node = discretize(problem)
    direct = backward_induction(node, m=m, forcing=k_drift_forcing(node.lattice, k_values), label="k-direct")
    return max(float(np.max(np.abs(s - (d - kv)))) for s, d, kv in zip(shifted.Y, direct.Y, k_values))
