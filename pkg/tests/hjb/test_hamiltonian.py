from dataclasses import replace

import numpy as np
import pytest

from regimemfg.hjb.hamiltonian import hamiltonian
from regimemfg.scenario.base import Discount, DiscountKind
from regimemfg.scenario.expressions import parse_expression
from regimemfg.scenario.presets import lq_scenario


@pytest.fixture(name="unit_box")
def fixture_unit_box():
    scenario = lq_scenario(u_bounds=(-1.0, 1.0), n_steps=4, x_points=21, mean_coupling=0.0)
    return replace(scenario, g2=(parse_expression("0"),) * 2)


class TestHamiltonian:
    def test_zero_gradients(self, unit_box):
        result = hamiltonian(unit_box, 0.0, 0.0, 1, 0.3, (0.0, 0.0), 0.0, 0.0)

        assert result.value == 0.0
        assert result.minimizer == 0.0

    def test_interior_minimizer(self, unit_box):
        result = hamiltonian(unit_box, 0.0, 0.0, 1, 0.3, (0.0, 0.0), 0.5, 0.5)

        assert result.minimizer == pytest.approx(-0.5)
        assert result.value == pytest.approx(-0.125)

    def test_boundary_minimizer(self, unit_box):
        result = hamiltonian(unit_box, 0.0, 0.0, 1, 0.3, (0.0, 0.0), 0.5, 3.0)

        assert result.minimizer == -1.0
        assert result.value == pytest.approx(0.0)

    def test_boundary_minimizer_agrees_with_grid_search(self, unit_box):
        controls = np.linspace(-1.0, 1.0, 2001)

        result = hamiltonian(unit_box, 0.0, 0.0, 1, 0.3, (0.0, 0.0), 3.0, 3.0)

        assert result.value == pytest.approx(np.min(3.0 * controls + controls**2 / 2))

    def test_mean_field_terms_are_added(self):
        scenario = lq_scenario(u_bounds=(-1.0, 1.0), n_steps=4, x_points=21, mean_coupling=0.2, state_cost=0.5)

        result = hamiltonian(scenario, 0.0, 0.0, 1, 2.0, (1.0, 1.5), 1.0, 0.0)

        assert result.value == pytest.approx(1.0 * 0.2 * 1.0 + 0.5 * 2.0**2)

    def test_costs_are_discounted_from_tau(self, unit_box):
        scenario = replace(
            unit_box, discount=Discount(DiscountKind.EXPONENTIAL, 1.0), g2=(parse_expression("x^2"),) * 2
        )

        result = hamiltonian(scenario, 0.0, 1.0, 1, 2.0, (0.0, 0.0), 0.0, 0.5)

        assert result.minimizer == pytest.approx(-0.5)
        assert result.value == pytest.approx(np.exp(-1.0) * (0.125 + 4.0))

    def test_vectorized_over_the_grid(self, unit_box):
        x = unit_box.grid.x

        result = hamiltonian(unit_box, 0.0, 0.0, 2, x, (0.0, 0.0), x, x)

        assert result.minimizer == pytest.approx(np.clip(-x, -1.0, 1.0))
        assert result.value == pytest.approx(x * result.minimizer + result.minimizer**2 / 2)
