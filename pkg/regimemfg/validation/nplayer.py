import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from regimemfg.chain.base import sample_grid_states
from regimemfg.flow.base import DensityField, StrategyField
from regimemfg.flow.wasserstein import wasserstein2_samples
from regimemfg.paths.base import RegimePath
from regimemfg.paths.tree import PathNode, PathTree, TreeError
from regimemfg.scenario.base import Scenario
from regimemfg.validation.base import (
    empirical_moments,
    euler_step,
    feedback_at,
    mean_and_error,
    particle_drift,
    running_cost,
    terminal_cost,
)
from regimemfg.workers import NodeSweeper

CHAIN_SUBSTEPS = 4


@dataclass(frozen=True)
class DeviationGain:
    """
    ``(J(u0 then u*) - J(u*)) / eps`` for a tagged agent, averaged over the population of one chain draw with the
    measure frozen at the undeviated run.
    """

    time_index: int
    time: float
    u0: float
    gain: float
    std_error: float

    def to_dict(self) -> dict:
        return {
            "time_index": self.time_index,
            "time": self.time,
            "u0": self.u0,
            "gain": self.gain,
            "std_error": self.std_error,
        }


@dataclass(frozen=True)
class ChainDraw:
    draw: int
    path: RegimePath
    node_ids: Tuple[int, ...]
    signature: str
    mismatches: int
    w2: Tuple[float, ...]
    deviation_gains: Tuple[DeviationGain, ...] = ()

    @property
    def terminal_w2(self) -> float:
        return self.w2[-1]

    def to_dict(self) -> dict:
        return {
            "draw": self.draw,
            "signature": self.signature,
            "node_ids": list(self.node_ids),
            "mismatches": self.mismatches,
            "w2": list(self.w2),
            "deviation_gains": [gain.to_dict() for gain in self.deviation_gains],
        }


@dataclass(frozen=True)
class SimReport:
    n_agents: int
    n_chains: int
    draws: Tuple[ChainDraw, ...]
    excluded: int

    @property
    def median_terminal_w2(self) -> float:
        if not self.draws:
            return math.nan
        return float(np.median([draw.terminal_w2 for draw in self.draws]))

    @property
    def max_w2(self) -> float:
        return max((max(draw.w2) for draw in self.draws), default=math.nan)

    @property
    def deviation_gains(self) -> List[DeviationGain]:
        return [gain for draw in self.draws for gain in draw.deviation_gains]

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "n_chains": self.n_chains,
            "excluded": self.excluded,
            "median_terminal_w2": self.median_terminal_w2,
            "max_w2": self.max_w2,
            "draws": [draw.to_dict() for draw in self.draws],
        }


def majority_states(fine_states: np.ndarray, substeps: int, initial_regime: int) -> Tuple[np.ndarray, int]:
    """
    Grid regimes from a chain sampled ``substeps`` times per interval: the most frequent state of each interval,
    the initial regime on the first one and the final sample at the horizon.  Also returns how many samples
    disagree with the chosen states.
    """
    n_steps = (len(fine_states) - 1) // substeps
    intervals = fine_states[:-1].reshape(n_steps, substeps)
    chosen = np.empty(n_steps + 1, dtype=int)
    for k, samples in enumerate(intervals):
        chosen[k] = np.bincount(samples).argmax()
    chosen[0] = initial_regime
    chosen[-1] = fine_states[-1]
    mismatches = int(np.sum(intervals != chosen[:-1, None]))
    return chosen, mismatches


class _DrawSimulator:
    def __init__(
        self,
        scenario: Scenario,
        strategy: StrategyField,
        zeta: DensityField,
        tree: PathTree,
        n_agents: int,
        deviations: Sequence[Tuple[int, float]],
        eps_steps: int,
    ):
        self.scenario = scenario
        self.strategy = strategy
        self.zeta = zeta
        self.tree = tree
        self.n_agents = n_agents
        self.deviations = deviations
        self.eps_steps = eps_steps
        self.initial_masses = scenario.mu0.discretize(scenario.grid)

    def _match_nodes(self, grid_states: np.ndarray) -> Optional[List[PathNode]]:
        try:
            return [self.tree.find_node(grid_states[: k + 1]) for k in range(len(grid_states))]
        except TreeError:
            return None

    def __call__(self, job: Tuple[int, np.random.SeedSequence]) -> Optional[ChainDraw]:
        draw, seed = job
        scenario, tree = self.scenario, self.tree
        chain_seed, agent_seed = seed.spawn(2)
        fine_grid = np.linspace(0.0, scenario.horizon, tree.n_steps * CHAIN_SUBSTEPS + 1)
        fine_states = sample_grid_states(
            scenario.generator, scenario.initial_regime, fine_grid, np.random.default_rng(chain_seed)
        )[0]
        grid_states, mismatches = majority_states(fine_states, CHAIN_SUBSTEPS, scenario.initial_regime)
        nodes = self._match_nodes(grid_states)
        if nodes is None:
            logger.debug(f"Chain draw {draw} exceeds the jump cap and is excluded")
            return None

        rng = np.random.default_rng(agent_seed)
        x = rng.choice(scenario.grid.x, size=self.n_agents, p=self.initial_masses)
        noise = rng.standard_normal((tree.n_steps, self.n_agents))
        positions, moments = self._run(nodes, x, noise)

        w2 = tuple(
            wasserstein2_samples(positions[k], self.zeta.density(node), scenario.grid) for k, node in enumerate(nodes)
        )
        gains = tuple(
            self._deviation_gain(nodes, positions, moments, noise, k, u0)
            for k, u0 in self.deviations
            if k + self.eps_steps <= tree.n_steps
        )
        path = RegimePath.from_interval_states(grid_states[:-1], tree.time_grid)
        node_ids = tuple(node.node_id for node in nodes)
        return ChainDraw(draw, path, node_ids, nodes[-1].signature, mismatches, w2, gains)

    def _run(self, nodes: List[PathNode], x: np.ndarray, noise: np.ndarray):
        scenario, time_grid = self.scenario, self.tree.time_grid
        positions = [x]
        moments = []
        for k in range(self.tree.n_steps):
            node = nodes[k]
            t, dt = float(time_grid[k]), float(time_grid[k + 1] - time_grid[k])
            m1, m2 = empirical_moments(x)
            moments.append((m1, m2))
            drift = particle_drift(scenario, t, node.regime, x, feedback_at(self.strategy, node, x), m1, m2)
            x = euler_step(scenario, t, dt, drift, x, noise[k])
            positions.append(x)
        moments.append(empirical_moments(x))
        return positions, moments

    def _costs(self, nodes, start, moments, noise, k, u0=None) -> np.ndarray:
        """
        Discounted cost from ``t_k`` with the measure frozen at ``moments``; ``u0`` replaces the feedback for the
        first ``eps_steps`` steps.
        """
        scenario, time_grid = self.scenario, self.tree.time_grid
        tau = float(time_grid[k])
        x = start
        cost = np.zeros_like(x)
        for s in range(k, self.tree.n_steps):
            node = nodes[s]
            t, dt = float(time_grid[s]), float(time_grid[s + 1] - time_grid[s])
            m1, m2 = moments[s]
            if u0 is not None and s < k + self.eps_steps:
                u = np.full_like(x, u0)
            else:
                u = feedback_at(self.strategy, node, x)
            cost += running_cost(scenario, tau, t, node.regime, x, u, m1, m2) * dt
            x = euler_step(scenario, t, dt, particle_drift(scenario, t, node.regime, x, u, m1, m2), x, noise[s])
        m1, m2 = moments[-1]
        return cost + terminal_cost(scenario, tau, nodes[-1].regime, x, m1, m2)

    def _deviation_gain(self, nodes, positions, moments, noise, k, u0) -> DeviationGain:
        eps = float(self.tree.time_grid[k + self.eps_steps] - self.tree.time_grid[k])
        baseline = self._costs(nodes, positions[k], moments, noise, k)
        deviated = self._costs(nodes, positions[k], moments, noise, k, u0)
        gain, error = mean_and_error((deviated - baseline) / eps)
        return DeviationGain(k, float(self.tree.time_grid[k]), float(u0), gain, error)


def nplayer_simulate(
    scenario: Scenario,
    strategy: StrategyField,
    zeta: DensityField,
    tree: PathTree,
    n_agents: int,
    n_chains: int = 1,
    rng_seed: int = 0,
    deviations: Sequence[Tuple[int, float]] = (),
    eps_steps: int = 1,
    sweeper: Optional[NodeSweeper] = None,
) -> SimReport:
    """
    Simulate ``n_agents`` players sharing one realized chain path per draw.  Every player applies the feedback of
    the tree node matching the realized regime history; the drift feels the population through its empirical
    moments.  The empirical law is compared with ``zeta`` at every grid time.

    ``deviations`` lists ``(time_index, u0)`` pairs; for each, the report holds the gain of switching to the constant
    action ``u0`` for ``eps_steps`` steps, with common random numbers and the population frozen.

    Draws whose regime history exceeds the jump cap are excluded and counted.
    """
    if n_agents < 2:
        raise ValueError(f"At least two agents are needed, got {n_agents}")
    if n_chains < 1:
        raise ValueError(f"At least one chain draw is needed, got {n_chains}")
    assert eps_steps >= 1, f"Deviation length must be at least one step, got {eps_steps}"

    simulator = _DrawSimulator(scenario, strategy, zeta, tree, n_agents, deviations, eps_steps)
    jobs = list(enumerate(np.random.SeedSequence(rng_seed).spawn(n_chains)))
    sweeper = sweeper or NodeSweeper(1)
    results = sweeper.sweep(simulator, jobs)

    draws = tuple(draw for draw in results if draw is not None)
    report = SimReport(n_agents, n_chains, draws, excluded=n_chains - len(draws))
    if report.excluded:
        logger.warning(f"{report.excluded} of {n_chains} chain draws exceed the jump cap and were excluded")
    logger.info(f"N-player simulation with {n_agents} agents: median terminal W2 {report.median_terminal_w2:.4g}")
    return report
