from typing import Optional, Sequence

import numpy as np

from regimemfg.chain.base import Generator
from regimemfg.scenario.base import (
    SLOT_VARIABLES,
    Discount,
    DiscountKind,
    InitialDensity,
    PsiSpec,
    Scenario,
    SolverSettings,
    SpatialGrid,
)
from regimemfg.scenario.expressions import parse_expression


def symmetric_generator(m: int, rate: float) -> Generator:
    """
    Every regime leaves at total rate ``rate``, uniformly to the others.
    """
    if m == 1:
        return Generator([[0.0]])
    q = np.full((m, m), rate / (m - 1))
    np.fill_diagonal(q, -rate)
    return Generator(q)


def _slot(text: str, slot: str):
    return parse_expression(text, SLOT_VARIABLES[slot])


def lq_scenario(
    horizon: float = 0.5,
    n_steps: int = 40,
    x_min: float = -3.0,
    x_max: float = 3.0,
    x_points: int = 200,
    m: int = 2,
    rate: float = 1.0,
    jump_cap: int = 2,
    drift_coefficient: float = 0.0,
    mean_coupling: float = 0.2,
    sigma: float = 0.5,
    control_cost: float = 1.0,
    state_cost: float = 0.5,
    terminal_cost: float = 0.5,
    discount: Optional[Discount] = None,
    mu0: Optional[InitialDensity] = None,
    u_bounds: Sequence[float] = (-10.0, 10.0),
    solver: Optional[SolverSettings] = None,
    regime_amplitude: float = 0.0,
) -> Scenario:
    """
    A linear-quadratic scenario: ``dX = (a X + v + kappa m1 (1 + amp (i - 1))) dt + sigma dW`` with running cost
    ``control_cost v^2 / 2 + state_cost x^2`` and terminal cost ``terminal_cost x^2``.

    With ``regime_amplitude = 0`` nothing depends on the regime and the equilibrium is given by the coupled Riccati
    system.
    """
    if regime_amplitude == 0:
        b2 = _slot(f"{mean_coupling!r} * m1", "b2")
    else:
        b2 = _slot(f"{mean_coupling!r} * m1 * (1 + {regime_amplitude!r} * (i - 1))", "b2")

    return Scenario(
        horizon=horizon,
        n_steps=n_steps,
        generator=symmetric_generator(m, rate),
        grid=SpatialGrid(x_min, x_max, x_points),
        mu0=mu0 if mu0 is not None else InitialDensity.gaussian(0.5, 0.3),
        sigma=_slot(repr(float(sigma)), "sigma"),
        b1=(_slot(f"{drift_coefficient!r} * x + v", "b1"),),
        g1=(_slot(f"{control_cost!r} * v^2 / 2", "g1"),),
        h=(_slot(f"{terminal_cost!r} * x^2", "h"),),
        psi=PsiSpec(control_cost=control_cost),
        u_min=float(u_bounds[0]),
        u_max=float(u_bounds[1]),
        b2=(b2,),
        g2=(_slot(f"{state_cost!r} * x^2", "g2"),),
        initial_regime=1,
        jump_cap=jump_cap,
        discount=discount if discount is not None else Discount(DiscountKind.NONE, 0.0),
        solver=solver if solver is not None else SolverSettings(),
    )
