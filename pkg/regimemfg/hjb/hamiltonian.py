from dataclasses import dataclass
from typing import Tuple

from regimemfg.scenario.base import Scenario, psi_eval
from regimemfg.scenario.expressions import Number


@dataclass(frozen=True)
class HamiltonianEval:
    value: Number
    minimizer: Number


def hamiltonian(
    scenario: Scenario,
    tau: float,
    t: float,
    i: int,
    x: Number,
    moments: Tuple[float, float],
    p: Number,
    q: Number,
) -> HamiltonianEval:
    """
    The separated Hamiltonian ``p b1(v) + g1(v) + p b2 + g2(tau)`` with the control ``v = psi(t, i, x, q)`` chosen
    from the diagonal gradient ``q`` and the costs discounted from ``tau``.
    """
    m1, m2 = moments
    control = psi_eval(scenario, t, i, x, q)
    weight = scenario.discount(tau, t)
    b1 = scenario.b1[i - 1](t=t, i=i, x=x, v=control)
    g1 = scenario.g1[i - 1](t=t, i=i, x=x, v=control)
    b2 = scenario.b2[i - 1](t=t, i=i, x=x, m1=m1, m2=m2)
    g2 = scenario.g2[i - 1](tau=tau, t=t, i=i, x=x, m1=m1, m2=m2)
    return HamiltonianEval(value=p * b1 + weight * g1 + p * b2 + weight * g2, minimizer=control)
