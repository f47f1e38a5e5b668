"""Problem instances shared by the test modules."""
from __future__ import annotations

import numpy as np

from rbsde.core import BarrierPair, Driver, ProblemSpec, TerminalCondition, TimeGrid

STRIKE = 1.0
RATE = 0.05


def put_payoff(t, x):
    # stock exp(B_t - t/2) under the pricing measure
    return np.maximum(STRIKE - np.exp(x - t / 2), 0.0)


def american_put(steps: int = 100, horizon: float = 1.0) -> ProblemSpec:
    return ProblemSpec(
        TimeGrid(horizon, steps),
        Driver(lambda t, y, z: -RATE * y, 1.0, lipschitz_y=RATE),
        BarrierPair(lower=put_payoff),
        TerminalCondition(lambda x: put_payoff(horizon, x)),
    )


def double_barrier_toy(steps: int = 100) -> ProblemSpec:
    return ProblemSpec(
        TimeGrid(1.0, steps),
        Driver(lambda t, y, z: z - y, 1.0, lipschitz_y=1.0),
        BarrierPair(lambda t, x: -0.3 + 0.1 * t + 0 * x, lambda t, x: 0.3 + 0 * x),
        TerminalCondition(lambda x: 0 * x),
    )


def game_put(steps: int = 100, spread: float = 0.05) -> ProblemSpec:
    return ProblemSpec(
        TimeGrid(1.0, steps),
        Driver(lambda t, y, z: -RATE * y, 1.0, lipschitz_y=RATE),
        BarrierPair(put_payoff, lambda t, x: put_payoff(t, x) + spread),
        TerminalCondition(lambda x: put_payoff(1.0, x)),
    )


def free_problem(f, xi, steps=100, horizon=1.0, lip=None, growth=1.0, lower=None, upper=None) -> ProblemSpec:
    return ProblemSpec(
        TimeGrid(horizon, steps),
        Driver(f, growth, lipschitz_y=lip),
        BarrierPair(lower, upper),
        TerminalCondition(xi),
    )


def american_dp(steps: int = 100, horizon: float = 1.0) -> float:
    """Textbook American put recursion on the same recombining tree."""
    dt = horizon / steps
    h = np.sqrt(dt)
    x = (2 * np.arange(steps + 1) - steps) * h
    V = put_payoff(horizon, x)
    for k in range(steps - 1, -1, -1):
        x = (2 * np.arange(k + 1) - k) * h
        cont = 0.5 * (V[1:] + V[:-1]) / (1 + RATE * dt)
        V = np.maximum(put_payoff(k * dt, x), cont)
    return float(V[0])
