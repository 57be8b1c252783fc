import math
from typing import Tuple

import numpy as np

from regimemfg.flow.base import StrategyField
from regimemfg.paths.tree import PathNode
from regimemfg.scenario.base import Scenario
from regimemfg.scenario.expressions import Expression, Number

# Coefficients evaluated at particle positions rather than on the spatial grid.


def at_points(expression: Expression, shape: Tuple[int, ...], **bindings: Number) -> np.ndarray:
    return np.broadcast_to(np.asarray(expression(**bindings), dtype=float), shape).copy()


def feedback_at(strategy: StrategyField, node: PathNode, x: np.ndarray) -> np.ndarray:
    """
    The node's control row linearly interpolated at ``x`` (constant beyond the grid ends).
    """
    return np.interp(x, strategy.grid.x, strategy.at(node))


def particle_drift(scenario: Scenario, t: float, i: int, x: np.ndarray, u: Number, m1: float, m2: float) -> np.ndarray:
    return scenario.b1_values(t, i, u, x=x) + scenario.b2_values(t, i, m1, m2, x=x)


def euler_step(
    scenario: Scenario, t: float, dt: float, drift: np.ndarray, x: np.ndarray, noise: np.ndarray
) -> np.ndarray:
    """
    One Euler-Maruyama step; particles leaving the domain are held at its ends like the reflecting density.
    """
    grid = scenario.grid
    moved = x + drift * dt + scenario.sigma_values(t, x) * math.sqrt(dt) * noise
    return np.clip(moved, grid.x_min, grid.x_max)


def running_cost(
    scenario: Scenario, tau: float, t: float, i: int, x: np.ndarray, u: Number, m1: float, m2: float
) -> np.ndarray:
    """
    ``mu(tau, t) (g1 + g2)`` at the particles.
    """
    g2 = at_points(scenario.g2[i - 1], np.shape(x), tau=tau, t=t, i=i, x=x, m1=m1, m2=m2)
    return scenario.discount(tau, t) * (scenario.g1_values(t, i, u, x=x) + g2)


def terminal_cost(scenario: Scenario, tau: float, i: int, x: np.ndarray, m1: float, m2: float) -> np.ndarray:
    h = at_points(scenario.h[i - 1], np.shape(x), tau=tau, i=i, x=x, m1=m1, m2=m2)
    return scenario.discount(tau, scenario.horizon) * h


def empirical_moments(x: np.ndarray) -> Tuple[float, float]:
    return float(np.mean(x)), float(np.mean(np.square(x)))


def mean_and_error(samples: np.ndarray) -> Tuple[float, float]:
    """
    Sample mean and its standard error.
    """
    samples = np.asarray(samples, dtype=float)
    if len(samples) < 2:
        return float(np.mean(samples)), math.nan
    return float(np.mean(samples)), float(np.std(samples, ddof=1) / math.sqrt(len(samples)))
