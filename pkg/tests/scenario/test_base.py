import math
from dataclasses import replace

import numpy as np
import pytest

from regimemfg.scenario.base import (
    Discount,
    DiscountKind,
    InitialDensity,
    PsiSpec,
    ScenarioError,
    SpatialGrid,
    discount_factor,
    lint_psi,
    psi_eval,
)
from regimemfg.scenario.expressions import parse_expression
from regimemfg.scenario.presets import lq_scenario


@pytest.fixture(name="unit_box")
def fixture_unit_box():
    return lq_scenario(u_bounds=(-1.0, 1.0), n_steps=4, x_points=21)


class TestPsiEval:
    @pytest.mark.parametrize(
        "p, expected", [(0.0, 0.0), (0.5, -0.5), (3.0, -1.0)], ids=["zero", "interior", "boundary"]
    )
    def test_built_in_lq(self, unit_box, p, expected):
        assert psi_eval(unit_box, 0.0, 1, 0.0, p) == pytest.approx(expected)

    def test_built_in_lq_minimizes_over_the_action_set(self, unit_box):
        rng = np.random.default_rng(0)
        controls = np.linspace(-1.0, 1.0, 10_001)
        for p in rng.uniform(-3, 3, size=100):
            best = controls[np.argmin(p * controls + controls**2 / 2)]
            assert psi_eval(unit_box, 0.0, 1, 0.0, p) == pytest.approx(best, abs=1e-3)
            objective = p * psi_eval(unit_box, 0.0, 1, 0.0, p) + psi_eval(unit_box, 0.0, 1, 0.0, p) ** 2 / 2
            assert objective <= np.min(p * controls + controls**2 / 2) + 1e-9

    def test_built_in_lq_is_lipschitz_in_p(self):
        scenario = lq_scenario(control_cost=2.0, u_bounds=(-1.0, 1.0), n_steps=4, x_points=21)
        p = np.linspace(-5, 5, 2001)

        values = psi_eval(scenario, 0.0, 1, 0.0, p)

        assert np.max(np.abs(np.diff(values)) / np.diff(p)) <= 1 / 2.0 + 1e-12

    def test_expression_psi_is_clamped(self, unit_box):
        scenario = replace(unit_box, psi=PsiSpec(expression=parse_expression("-2 * p + x")))

        values = psi_eval(scenario, 0.0, 1, np.array([0.0, 0.0, 5.0]), np.array([0.1, 4.0, 0.0]))

        assert values.tolist() == pytest.approx([-0.2, -1.0, 1.0])

    def test_psi_values_broadcast_constant_expression(self, unit_box):
        scenario = replace(unit_box, psi=PsiSpec(expression=parse_expression("0.25")))

        assert scenario.psi_values(0.0, 1, np.zeros(21)).tolist() == [0.25] * 21


class TestDiscountFactor:
    @pytest.mark.parametrize(
        "kind, expected",
        [("none", 1.0), ("exponential", math.exp(-0.5)), ("hyperbolic", 1 / 1.5)],
        ids=["none", "exponential", "hyperbolic"],
    )
    def test_factor(self, kind, expected):
        assert discount_factor(kind, 1.0, 0.5, 1.0) == pytest.approx(expected)

    @pytest.mark.parametrize("kind", list(DiscountKind), ids=lambda kind: kind.value)
    def test_no_discount_at_the_evaluation_time(self, kind):
        assert Discount(kind, 3.0)(np.array([0.2, 0.7]), np.array([0.2, 0.7])) == pytest.approx([1.0, 1.0])


class TestInitialDensity:
    def test_gaussian_cell_averages_match_moments(self):
        grid = SpatialGrid(-4.0, 4.0, 401)

        masses = InitialDensity.gaussian(0.3, 0.2).discretize(grid)

        assert masses.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.dot(masses, grid.x) == pytest.approx(0.3, abs=1e-6)
        variance = np.dot(masses, (grid.x - 0.3) ** 2)
        # Sheppard: grouping at cell centres adds dx^2 / 12
        assert variance == pytest.approx(0.04 + grid.dx**2 / 12, rel=1e-4)

    def test_point_mass_sits_on_nearest_atom(self):
        grid = SpatialGrid(-1.0, 1.0, 21)

        masses = InitialDensity.point(0.33).discretize(grid)

        assert masses[grid.nearest_index(0.33)] == 1.0
        assert grid.x[np.argmax(masses)] == pytest.approx(0.3)


class TestValidate:
    def test_reference_scenario_is_valid(self):
        assert lq_scenario().validate() == []

    def test_empty_action_set_is_reported(self, unit_box):
        problems = replace(unit_box, u_min=1.0, u_max=1.0).validate()

        assert any("action set" in problem for problem in problems)

    def test_lq_psi_needs_matching_drift(self, unit_box):
        scenario = replace(unit_box, b1=(parse_expression("2 * v"),) * 2)

        assert any("b1 = v" in problem for problem in scenario.validate())

    def test_lq_psi_needs_matching_running_cost(self, unit_box):
        scenario = replace(unit_box, g1=(parse_expression("v^2"),) * 2)

        assert any("g1" in problem for problem in scenario.validate())

    def test_lq_psi_allows_control_free_terms(self, unit_box):
        scenario = replace(unit_box, g1=(parse_expression("v^2 / 2 + x^2 + i"),) * 2)

        assert scenario.validate() == []

    def test_tau_in_drift_is_reported(self, unit_box):
        scenario = replace(unit_box, b2=(parse_expression("tau"),) * 2)

        assert any("tau" in problem for problem in scenario.validate())

    def test_negative_discount_rate_is_reported(self, unit_box):
        scenario = replace(unit_box, discount=Discount(DiscountKind.EXPONENTIAL, -1.0))

        assert any("discount" in problem for problem in scenario.validate())

    def test_ensure_valid_raises_error(self, unit_box):
        with pytest.raises(ScenarioError):
            replace(unit_box, sigma=parse_expression("0 * x")).ensure_valid()

    def test_unbounded_sigma_is_reported(self, unit_box):
        scenario = replace(unit_box, sigma=parse_expression("2000 + x"))

        assert any("below" in problem for problem in scenario.validate())

    @pytest.mark.parametrize("count", [0, 1, 2, 3], ids=["empty", "broadcast", "per-regime", "too-many"])
    def test_coefficient_count_must_match_the_regimes(self, unit_box, count):
        expressions = (parse_expression("x"),) * count

        if count == 3:
            with pytest.raises(ScenarioError, match="3 expressions for 2 regimes"):
                replace(unit_box, b1=expressions)
        else:
            assert len(replace(unit_box, b1=expressions).b1) == 2


class TestLintPsi:
    def test_lq_psi_is_never_flagged(self, unit_box):
        assert lint_psi(unit_box) == []

    def test_discontinuous_psi_is_flagged(self, unit_box):
        scenario = replace(unit_box, psi=PsiSpec(expression=parse_expression("-clamp(1000 * p, -1, 1)")))

        jumps = lint_psi(scenario)

        assert len(jumps) > 0
        assert all(abs(jump.p) <= 0.1 for jump in jumps)

    def test_continuous_psi_is_not_flagged(self, unit_box):
        scenario = replace(unit_box, psi=PsiSpec(expression=parse_expression("-p / 2")))

        assert lint_psi(scenario) == []


class TestScenarioProperties:
    def test_tau_dependence(self, unit_box):
        assert not unit_box.tau_dependent
        assert replace(unit_box, discount=Discount(DiscountKind.HYPERBOLIC, 1.0)).tau_dependent
        assert replace(unit_box, h=(parse_expression("tau * x"),) * 2).tau_dependent

    def test_g2_and_h_values_are_tau_by_x(self, unit_box):
        scenario = replace(unit_box, g2=(parse_expression("tau + x"),) * 2)

        values = scenario.g2_values(np.array([0.0, 1.0, 2.0]), 0.0, 1, 0.0, 0.0)

        assert values.shape == (3, 21)
        assert values[2] == pytest.approx(2.0 + scenario.grid.x)
        assert unit_box.h_values(np.array([0.0, 1.0]), 2, 0.0, 0.0).shape == (2, 21)
