import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from loguru import logger

from regimemfg.chain.base import transition_matrix
from regimemfg.flow.base import DensityField, StrategyField
from regimemfg.paths.tree import PathNode
from regimemfg.scenario.base import Scenario
from regimemfg.validation.base import euler_step, feedback_at, mean_and_error, particle_drift

TestFunction = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

DIFFERENCE_STEP = 1e-4
SUBSTEPS = 10


@dataclass(frozen=True)
class ItoCheckReport:
    """
    Monte-Carlo drift of a cylinder test function against its generator.  ``lhs`` estimates
    ``(E f(t + eps, alpha, X) - f(t, i, x)) / eps`` and ``rhs`` is ``f_t + (Q f)_i + b f_x + sigma^2 f_xx / 2``.
    """

    time: float
    regime: int
    x: float
    eps: float
    lhs: float
    std_error: float
    rhs: float

    @property
    def z_score(self) -> float:
        if self.std_error == 0:
            return 0.0 if self.lhs == self.rhs else math.inf
        return abs(self.lhs - self.rhs) / self.std_error

    @property
    def passed(self) -> bool:
        return self.z_score <= 3.0

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "regime": self.regime,
            "x": self.x,
            "eps": self.eps,
            "lhs": self.lhs,
            "std_error": self.std_error,
            "rhs": self.rhs,
            "z_score": self.z_score,
            "passed": self.passed,
        }


def generator_value(
    scenario: Scenario, function: TestFunction, t: float, i: int, x: float, drift: float, sigma: float
) -> float:
    """
    ``f_t + sum_j q_ij f(t, j, x) + drift f_x + sigma^2 f_xx / 2`` with central differences.
    """
    h = DIFFERENCE_STEP
    regime = np.array([i])
    point = np.array([x])

    def f(time, regimes, where):
        return float(np.asarray(function(time, regimes, where))[0])

    time_derivative = (f(t + h, regime, point) - f(t - h, regime, point)) / (2 * h)
    switching = sum(
        scenario.generator.rate(i, j) * f(t, np.array([j]), point) for j in range(1, scenario.m + 1)
    )
    centre = f(t, regime, point)
    up, down = f(t, regime, point + h), f(t, regime, point - h)
    gradient = (up - down) / (2 * h)
    curvature = (up - 2 * centre + down) / h**2
    return time_derivative + switching + drift * gradient + sigma**2 * curvature / 2


def functional_ito_check(
    scenario: Scenario,
    strategy: StrategyField,
    zeta: DensityField,
    node: PathNode,
    x: float,
    function: TestFunction,
    eps_steps: int = 2,
    n_samples: int = 100_000,
    seed: int = 0,
) -> ItoCheckReport:
    """
    Start particles at ``(t_k, x)`` in the node's regime and run the chain and the state for ``eps = eps_steps * dt``.
    The control and the measure are frozen at the node; the regime moves with the chain.

    ``function(t, regimes, x)`` must be smooth in ``t`` and ``x`` and vectorized over ``regimes`` and ``x``.
    """
    assert eps_steps >= 1, f"eps_steps must be positive, got {eps_steps}"
    rng = np.random.default_rng(seed)
    t = node.time
    i = node.regime
    eps = eps_steps * scenario.dt
    h = eps / SUBSTEPS
    m1, m2 = zeta.node_moments(node)
    cumulative = np.cumsum(transition_matrix(scenario.generator, h), axis=1)
    cumulative[:, -1] = 1.0

    regimes = np.full(n_samples, i)
    positions = np.full(n_samples, float(x))
    for step in range(SUBSTEPS):
        now = t + step * h
        for regime in np.unique(regimes):
            members = regimes == regime
            here = positions[members]
            drift = particle_drift(scenario, now, int(regime), here, feedback_at(strategy, node, here), m1, m2)
            positions[members] = euler_step(scenario, now, h, drift, here, rng.standard_normal(len(here)))
        draws = rng.random(n_samples)
        regimes = (cumulative[regimes - 1] > draws[:, None]).argmax(axis=1) + 1

    start = float(np.asarray(function(t, np.array([i]), np.array([float(x)])))[0])
    lhs, std_error = mean_and_error((np.asarray(function(t + eps, regimes, positions)) - start) / eps)

    point = np.array([float(x)])
    control = feedback_at(strategy, node, point)
    drift = float(particle_drift(scenario, t, i, point, control, m1, m2)[0])
    sigma = float(scenario.sigma_values(t, point)[0])
    rhs = generator_value(scenario, function, t, i, float(x), drift, sigma)

    report = ItoCheckReport(t, i, float(x), eps, lhs, std_error, rhs)
    logger.info(f"Ito check at t={t:g}, i={i}, x={x:g}: {lhs:.4g} vs {rhs:.4g} (z={report.z_score:.2f})")
    return report
