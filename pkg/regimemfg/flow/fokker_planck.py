import math
from typing import List, Optional

import numpy as np
from loguru import logger
from scipy.linalg import solve_banded

from regimemfg.flow.base import LEAKAGE_WARNING, DensityField, StrategyField
from regimemfg.paths.tree import PathNode, PathTree
from regimemfg.scenario.base import Scenario, SpatialGrid
from regimemfg.workers import NodeSweeper

NEGATIVE_MASS_TOLERANCE = 1e-12
# Courant number per advection substep; keeps the limited upwind update positive
ADVECTION_CFL = 0.2
# nodes per task; fixed so results do not depend on the thread count
CHUNK_SIZE = 64


class SchemeInstabilityError(ArithmeticError):
    def __init__(self, msg=None, min_mass=None, row=None):
        super().__init__(msg)
        self.min_mass = min_mass
        self.row = row


def van_leer(ratio: np.ndarray) -> np.ndarray:
    return (ratio + np.abs(ratio)) / (1.0 + np.abs(ratio))


def _advect(masses: np.ndarray, interface_velocity: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """
    Conservative flux-limited upwind transport of each row, with zero flux through both ends.  Every row takes as
    many substeps as its own Courant number requires.
    """
    max_speed = np.max(np.abs(interface_velocity), axis=1)
    substeps = np.maximum(1, np.ceil(max_speed * dt / (dx * ADVECTION_CFL))).astype(int)
    sub_dt = dt / substeps
    ratio_dt = (sub_dt / dx)[:, None]
    courant = np.abs(interface_velocity) * ratio_dt
    forward = interface_velocity >= 0
    sign = np.where(forward, 1.0, -1.0)
    zeros = np.zeros((masses.shape[0], 1))

    for step in range(int(substeps.max())):
        jump = masses[:, 1:] - masses[:, :-1]
        padded = np.concatenate((zeros, jump, zeros), axis=1)
        neighbour_jump = np.where(forward, padded[:, :-2], padded[:, 2:])
        ratio = np.divide(neighbour_jump, jump, out=np.zeros_like(jump), where=jump != 0)
        upwind = np.where(forward, masses[:, :-1], masses[:, 1:])
        interface = upwind + sign * 0.5 * (1.0 - courant) * van_leer(ratio) * jump
        flux = np.concatenate((zeros, interface_velocity * interface, zeros), axis=1)
        updated = masses - ratio_dt * (flux[:, 1:] - flux[:, :-1])
        masses = np.where((step < substeps)[:, None], updated, masses)
    return masses


def _diffusion_bands(diffusion: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """
    Banded form of ``I - dt A`` with ``(A m)_j = (D_{j+1} m_{j+1} - 2 D_j m_j + D_{j-1} m_{j-1}) / dx^2`` and
    zero-flux ends.
    """
    coefficient = dt * diffusion / dx**2
    bands = np.zeros((3, len(diffusion)))
    bands[0, 1:] = -coefficient[1:]
    bands[1] = 1.0 + 2.0 * coefficient
    bands[1, 0] = 1.0 + coefficient[0]
    bands[1, -1] = 1.0 + coefficient[-1]
    bands[2, :-1] = -coefficient[:-1]
    return bands


def fokker_planck_step(
    density: np.ndarray, drift: np.ndarray, sigma: np.ndarray, dt: float, grid: SpatialGrid
) -> np.ndarray:
    """
    Advance grid densities by ``dt`` under ``dX = drift dt + sigma dW``.

    ``density`` and ``drift`` are ``(n_points,)`` or ``(n_rows, n_points)``; ``sigma`` is per grid point and shared by
    all rows.  Transport is explicit (flux-limited upwind with Courant substeps), diffusion implicit.  Both ends are
    reflecting.  The result is renormalized to unit mass.
    """
    assert dt > 0, f"Time step must be positive, got {dt}"
    single = np.ndim(density) == 1
    masses = np.atleast_2d(np.asarray(density, dtype=float))
    velocity = np.broadcast_to(np.asarray(drift, dtype=float), masses.shape)
    if not np.all(np.isfinite(velocity)):
        raise SchemeInstabilityError("Drift is not finite")

    interface_velocity = (velocity[:, 1:] + velocity[:, :-1]) / 2
    masses = _advect(masses, interface_velocity, dt, grid.dx)

    diffusion = np.broadcast_to(np.asarray(sigma, dtype=float) ** 2 / 2, (grid.n_points,))
    masses = solve_banded((1, 1), _diffusion_bands(diffusion, dt, grid.dx), masses.T).T

    lowest = float(np.min(masses))
    if lowest < -NEGATIVE_MASS_TOLERANCE or not np.all(np.isfinite(masses)):
        row = int(np.argmin(np.min(masses, axis=1)))
        raise SchemeInstabilityError(f"Negative mass {lowest:.3e} after a Fokker-Planck step", lowest, row)

    masses = np.clip(masses, 0.0, None)
    masses = masses / masses.sum(axis=1, keepdims=True)
    return masses[0] if single else masses


def _node_drift(scenario: Scenario, strategy: StrategyField, zeta: DensityField, node: PathNode) -> np.ndarray:
    t = node.time
    m1, m2 = zeta.node_moments(node)
    control = strategy.at(node)
    return scenario.b1_values(t, node.regime, control) + scenario.b2_values(t, node.regime, m1, m2)


def propagate_flow(
    scenario: Scenario,
    strategy: StrategyField,
    tree: PathTree,
    sweeper: Optional[NodeSweeper] = None,
) -> DensityField:
    """
    The conditional laws along every path of the tree.

    The root carries the discretized initial law.  Each node is advanced one step with the regime it holds over
    ``[t_k, t_{k+1})`` and the drift ``b1(u(node)) + b2(moments of the node's own density)``; all its children start
    from the result.
    """
    sweeper = sweeper or NodeSweeper(1)
    grid = scenario.grid
    zeta = DensityField(tree, grid)
    zeta.set_density(tree.root, scenario.mu0.discretize(grid))

    for k in range(tree.n_steps):
        dt = float(tree.time_grid[k + 1] - tree.time_grid[k])
        sigma = scenario.sigma_values(float(tree.time_grid[k]))
        level = tree.level(k)
        chunks = [level[start : start + CHUNK_SIZE] for start in range(0, len(level), CHUNK_SIZE)]

        def advance(chunk: List[PathNode]) -> np.ndarray:
            densities = np.stack([zeta.density(node) for node in chunk])
            drifts = np.stack([_node_drift(scenario, strategy, zeta, node) for node in chunk])
            return fokker_planck_step(densities, drifts, sigma, dt, grid)

        for chunk, stepped in zip(chunks, sweeper.sweep(advance, chunks)):
            for node, masses in zip(chunk, stepped):
                for link in node.children:
                    zeta.set_density(link.node, masses)
        logger.debug(f"Propagated level {k} ({len(level)} nodes)")

    diagnostics = zeta.diagnostics()
    if diagnostics.max_boundary_mass > LEAKAGE_WARNING:
        logger.warning(
            f"Boundary cells hold mass {diagnostics.max_boundary_mass:.2e} at node {diagnostics.worst_boundary_node}; "
            "consider a wider spatial domain"
        )
    return zeta


def expected_substeps(drift: np.ndarray, dt: float, dx: float) -> int:
    velocity = np.asarray(drift, dtype=float)
    interface = (velocity[1:] + velocity[:-1]) / 2
    return max(1, math.ceil(float(np.max(np.abs(interface))) * dt / (dx * ADVECTION_CFL)))
