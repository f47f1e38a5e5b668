"""Least-squares regression Monte Carlo for the same (penalized) BSDEs.

Conditional expectations ``E[Y_{k+1} | x_k]`` and ``E[Y_{k+1} dB_k / dt | x_k]``
are regressed on a polynomial basis in ``x_k = B_{t_k}``; the node value then
solves the same semi-implicit scalar step as the lattice engine.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .core import BarrierPair, Driver, TerminalCondition, TimeGrid
from .lattice import STABILITY_GATE, InvalidPenalty, UnstableStep, solve_step

PIVOT_TOL = 1e-10
DEFAULT_BATCHES = 20  # 10 batches left the stderr estimate itself about 25% noisy


class SingularRegression(RuntimeError):
    pass


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    increments: np.ndarray  # (n_paths, N)
    seed: int
    mode: str

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def paths(self) -> np.ndarray:
        """Brownian values, shape ``(n_paths, N + 1)`` starting at 0."""
        zero = np.zeros((self.n_paths, 1))
        return np.concatenate([zero, np.cumsum(self.increments, axis=1)], axis=1)

    def lattice_indices(self) -> np.ndarray:
        """Up-move counts ``j_k`` for coin-flip bundles."""
        if self.mode != "coin":
            raise ValueError("lattice indices only exist for coin-flip increments")
        ups = (self.increments > 0).astype(int)
        return np.concatenate([np.zeros((self.n_paths, 1), dtype=int), np.cumsum(ups, axis=1)], axis=1)

    def subset(self, rows: np.ndarray) -> "PathBundle":
        return PathBundle(self.grid, self.increments[rows], self.seed, self.mode)


def simulate_paths(grid: TimeGrid, n_paths: int, seed: int, mode: str = "coin") -> PathBundle:
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    sd = np.sqrt(grid.dt)
    if mode == "coin":
        inc = np.where(rng.integers(0, 2, size=(n_paths, grid.steps)) == 1, sd, -sd)
    elif mode == "gauss":
        inc = rng.normal(0.0, sd, size=(n_paths, grid.steps))
    else:
        raise ValueError(f"unknown increment mode {mode!r}; use 'coin' or 'gauss'")
    return PathBundle(grid, inc, int(seed), mode)


@dataclass(frozen=True)
class RegressionBasis:
    degree: int = 4
    barrier_feature: bool = False

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("basis degree must be nonnegative")

    def design(self, x: np.ndarray, scale: float, lower: Optional[np.ndarray] = None) -> np.ndarray:
        u = x / scale
        cols = [u**d for d in range(self.degree + 1)]
        if self.barrier_feature and lower is not None and np.all(np.isfinite(lower)):
            cols.append(lower)
        return np.column_stack(cols)


def regress(design: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares by pivoted QR, dropping columns below the relative pivot tolerance.

    ``targets`` may be 2-D (one column per right-hand side). Targets are
    centred before the solve, so the returned coefficients describe the
    deviation from the target mean. Returns ``(coefficients, fitted values)``.
    """
    n, p = design.shape
    if n < 1:
        raise SingularRegression("no observations")
    Q, R, piv = linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        raise SingularRegression("design matrix is identically zero")
    rank = int(np.sum(diag > PIVOT_TOL * diag[0]))
    # centring makes constant targets fit exactly; the mean is added back below
    mean = np.mean(targets, axis=0)
    coef_kept = linalg.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ (targets - mean))
    coef = np.zeros((p,) + np.shape(targets)[1:])
    coef[piv[:rank]] = coef_kept
    return coef, mean + design @ coef


@dataclass
class MCResult:
    y0: float
    y0_stderr: float
    Y: np.ndarray  # (n_paths, N + 1)
    Z: np.ndarray  # (n_paths, N)
    dA: np.ndarray
    dK: np.ndarray
    stats: dict


def _backward(bundle, driver, terminal, basis, barriers, m, n):
    grid = bundle.grid
    N, dt = grid.steps, grid.dt
    if driver.lipschitz_y is not None and dt * driver.lipschitz_y > STABILITY_GATE:
        raise UnstableStep(f"dt * Lip_y = {dt * driver.lipschitz_y:.4g} exceeds {STABILITY_GATE}")
    if bundle.n_paths < basis.degree + 1:
        raise SingularRegression(
            f"{bundle.n_paths} paths cannot support a degree-{basis.degree} basis"
        )
    X = bundle.paths
    dB = bundle.increments
    scale = np.sqrt(grid.horizon)
    P = bundle.n_paths
    Y = np.empty((P, N + 1))
    Z = np.zeros((P, N))
    dA = np.zeros((P, N))
    dK = np.zeros((P, N))
    Y[:, N] = terminal.values(X[:, N])
    for k in range(N - 1, -1, -1):
        t = grid.time(k)
        x = X[:, k]
        L = barriers.lower_on(t, x)
        U = barriers.upper_on(t, x)
        D = basis.design(x, scale, L)
        targets = np.column_stack([Y[:, k + 1], Y[:, k + 1] * dB[:, k] / dt])
        _, fitted = regress(D, targets)
        c, z = fitted[:, 0], fitted[:, 1]

        def fyz(y, zz, idx, _t=t):
            return driver(_t, y, zz)

        y = solve_step(fyz, c, z, dt, L, U, m, n, driver.growth_k).y
        Y[:, k] = y
        Z[:, k] = z
        if m:
            dA[:, k] = dt * m * np.maximum(L - y, 0.0)
        if n:
            dK[:, k] = dt * n * np.maximum(y - U, 0.0)
    return Y, Z, dA, dK


def _batch_stderr(bundle, fn, n_batches):
    P = bundle.n_paths
    if n_batches < 2 or P < 2 * n_batches:
        return float("nan")
    edges = np.linspace(0, P, n_batches + 1).astype(int)
    vals = []
    for a, b in zip(edges[:-1], edges[1:]):
        vals.append(fn(bundle.subset(np.arange(a, b))))
    return float(np.std(vals, ddof=1) / np.sqrt(n_batches))


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def solve_bsde_mc(
    bundle: PathBundle,
    driver: Driver,
    terminal: TerminalCondition,
    basis: RegressionBasis = RegressionBasis(),
    n_batches: int = DEFAULT_BATCHES,
) -> MCResult:
    """Unreflected BSDE; ``y0_stderr`` comes from independent path batches."""
    return solve_penalized_mc(bundle, driver, terminal, basis, BarrierPair(), 0.0, 0.0, n_batches)


def solve_penalized_mc(
    bundle: PathBundle,
    driver: Driver,
    terminal: TerminalCondition,
    basis: RegressionBasis,
    barriers: BarrierPair,
    m: float,
    n: float,
    n_batches: int = DEFAULT_BATCHES,
) -> MCResult:
    """Doubly penalized BSDE with pathwise ``A``, ``K`` and moment statistics.

    ``y0_stderr`` is the spread of the estimator across ``n_batches`` disjoint
    path batches, divided by ``sqrt(n_batches)``; the pathwise statistics carry
    ordinary sample standard errors.
    """
    if m < 0 or n < 0:
        raise InvalidPenalty(f"penalty coefficients must be nonnegative, got m={m}, n={n}")
    Y, Z, dA, dK = _backward(bundle, driver, terminal, basis, barriers, m, n)

    def y0_of(sub):
        return float(_backward(sub, driver, terminal, basis, barriers, m, n)[0][:, 0].mean())

    y0 = float(Y[:, 0].mean())
    se = _batch_stderr(bundle, y0_of, n_batches)
    A_T = dA.sum(axis=1)
    K_T = dK.sum(axis=1)
    dt = bundle.grid.dt
    stats = {}
    for name, v in (
        ("e_AT", A_T),
        ("e_KT", K_T),
        ("e_AT2", A_T**2),
        ("e_KT2", K_T**2),
        ("e_supY2", np.max(Y**2, axis=1)),
        ("e_intZ2", dt * np.sum(Z**2, axis=1)),
    ):
        stats[name], stats[name + "_se"] = _mean_se(v)
    return MCResult(y0, se, Y, Z, dA, dK, stats)

