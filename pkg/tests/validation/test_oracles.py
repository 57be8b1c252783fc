import math
from dataclasses import replace

import numpy as np
import pytest

from regimemfg.equilibrium.base import fp_iteration
from regimemfg.flow.base import StrategyField
from regimemfg.flow.fokker_planck import propagate_flow
from regimemfg.hjb.base import hjb_backward_solve
from regimemfg.scenario.base import Discount, DiscountKind
from regimemfg.scenario.expressions import parse_expression
from regimemfg.scenario.presets import lq_scenario
from regimemfg.validation.oracles import (
    LqProblem,
    OracleDomainError,
    classical_hjb_oracle,
    lq_problem,
    riccati_oracle,
)


def scalar_problem(**changes):
    problem = LqProblem(a=0.0, bc=1.0, c_x=1.0, c_v=1.0, c_T=0.0, horizon=1.0, sigma=0.0)
    return replace(problem, **changes)


def frozen_flow(scenario):
    tree = scenario.build_tree()
    strategy = StrategyField.from_function(tree, scenario.grid, lambda node: -0.5 * scenario.grid.x)
    return tree, propagate_flow(scenario, strategy, tree)


class TestRiccatiOracle:
    def test_scalar_riccati_equation(self):
        solution = riccati_oracle(scalar_problem())

        assert solution.p[0] == pytest.approx(math.tanh(1.0), abs=1e-9)
        assert solution.p[0] == pytest.approx(0.76159, abs=1e-5)
        assert solution.p[-1] == pytest.approx(0.0, abs=1e-14)

    def test_zero_costs_give_zero_value(self):
        solution = riccati_oracle(scalar_problem(c_x=0.0, c_T=0.0, sigma=0.4))

        assert np.all(solution.p == 0.0)
        assert np.all(solution.r == 0.0)
        assert solution.value(0.3, np.linspace(-1.0, 1.0, 5)) == pytest.approx(0.0)

    def test_uncoupled_system_ignores_the_initial_mean(self):
        first = riccati_oracle(lq_problem(mean_coupling=0.0, m0=0.0))
        second = riccati_oracle(lq_problem(mean_coupling=0.0, m0=5.0))

        assert np.array_equal(first.p, second.p)
        assert np.array_equal(first.r, second.r)
        assert np.array_equal(first.s, second.s)
        assert second.mean[-1] != first.mean[-1]

    def test_reference_problem_has_a_stationary_gain(self):
        solution = riccati_oracle(lq_problem())

        assert solution.p == pytest.approx(0.5, abs=1e-9)
        assert solution.mean[0] == 0.5
        assert solution.mean_iterations > 1
        assert np.all(solution.r[:-1] > 0)

    def test_feedback_is_clamped(self):
        solution = riccati_oracle(lq_problem(u_bounds=(-0.1, 0.1)))

        assert solution.feedback(0.0, np.array([-3.0, 3.0])) == pytest.approx([0.1, -0.1])

    def test_blow_up_raises_error(self):
        with pytest.raises(OracleDomainError):
            riccati_oracle(scalar_problem(c_x=0.0, c_T=-1.0, horizon=2.0))

    @pytest.mark.parametrize("changes", [{"c_v": 0.0}, {"horizon": 0.0}], ids=["free-control", "empty-horizon"])
    def test_invalid_problem_raises_error(self, changes):
        with pytest.raises(OracleDomainError):
            riccati_oracle(scalar_problem(**changes))


class TestClassicalHjbOracle:
    @pytest.fixture(name="scenario")
    def fixture_scenario(self):
        return lq_scenario(n_steps=8, x_points=61, jump_cap=2, regime_amplitude=0.5)

    def test_matches_the_solver_without_discounting(self, scenario):
        tree, zeta = frozen_flow(scenario)

        theta, strategy = hjb_backward_solve(scenario, zeta, tree, retain=(0,))
        classical = classical_hjb_oracle(scenario, zeta, tree)

        assert classical.values == pytest.approx(theta.diagonal, abs=1e-10)
        assert classical.strategy.values == pytest.approx(strategy.values, abs=1e-10)
        for node in tree.nodes:
            assert classical.at(node) == pytest.approx(theta.value(0, node), abs=1e-10)

    def test_exponential_discounting_is_time_consistent(self, scenario):
        discounted = replace(scenario, discount=Discount(DiscountKind.EXPONENTIAL, 0.7))
        tree, zeta = frozen_flow(discounted)

        theta, strategy = hjb_backward_solve(discounted, zeta, tree, retain=(0,))
        classical = classical_hjb_oracle(discounted, zeta, tree)

        assert classical.values == pytest.approx(theta.diagonal, abs=1e-10)
        assert classical.strategy.values == pytest.approx(strategy.values, abs=1e-10)

    def test_zero_costs_give_zero_values(self, scenario):
        zero = parse_expression("0")
        scenario = replace(scenario, g2=(zero,) * scenario.m, h=(zero,) * scenario.m)
        tree, zeta = frozen_flow(scenario)

        assert np.all(classical_hjb_oracle(scenario, zeta, tree).values == 0.0)

    def test_hyperbolic_discounting_is_refused(self, scenario):
        scenario = replace(scenario, discount=Discount(DiscountKind.HYPERBOLIC, 1.0))
        tree, zeta = frozen_flow(scenario)

        with pytest.raises(OracleDomainError):
            classical_hjb_oracle(scenario, zeta, tree)

    def test_tau_dependent_costs_are_refused(self, scenario):
        scenario = replace(scenario, h=(parse_expression("x^2 * (1 + tau)"),) * scenario.m)
        tree, zeta = frozen_flow(scenario)

        with pytest.raises(OracleDomainError):
            classical_hjb_oracle(scenario, zeta, tree)


def compare_with_riccati(scenario, lam=0.0, levels=(0,)):
    """
    Largest relative interior errors of the equilibrium value and feedback over every node of ``levels``.
    """
    result = fp_iteration(scenario)
    assert result.converged
    oracle = riccati_oracle(lq_problem(lam=lam, m0=result.zeta.mean(result.tree.root)))

    x = scenario.grid.x
    interior = np.abs(x) <= 1.5
    value_error, control_error = 0.0, 0.0
    for k in levels:
        t = float(result.tree.time_grid[k])
        exact_value = oracle.value(t, x[interior])
        exact_control = oracle.feedback(t, x[interior])
        for node in result.tree.level(k):
            value = result.theta.at_diagonal(node)[interior]
            control = result.strategy.at(node)[interior]
            value_error = max(value_error, np.max(np.abs(value - exact_value)) / np.max(np.abs(exact_value)))
            control_error = max(control_error, np.max(np.abs(control - exact_control)) / np.max(np.abs(exact_control)))
    return value_error, control_error


class TestLqEquilibrium:
    def test_agrees_with_riccati_on_a_coarse_grid(self):
        value_error, control_error = compare_with_riccati(lq_scenario(n_steps=20, x_points=120, m=1))

        assert value_error <= 0.05
        assert control_error <= 0.05

    @pytest.mark.slow
    def test_agrees_with_riccati_on_the_reference_grid(self):
        value_error, control_error = compare_with_riccati(lq_scenario(n_steps=80, x_points=400, m=1))

        assert value_error <= 0.02
        assert control_error <= 0.02

    @pytest.mark.slow
    def test_switching_environment_with_regime_free_coefficients(self):
        scenario = lq_scenario(n_steps=40, x_points=200, m=2, rate=1.0, jump_cap=2)

        value_error, control_error = compare_with_riccati(scenario, levels=(0, 20))

        assert value_error <= 0.02
        assert control_error <= 0.02

    @pytest.mark.slow
    def test_exponential_discounting_matches_the_discounted_riccati_system(self):
        lam = 0.8
        scenario = lq_scenario(n_steps=200, x_points=200, m=1, discount=Discount(DiscountKind.EXPONENTIAL, lam))

        value_error, _ = compare_with_riccati(scenario, lam=lam)

        assert value_error <= 0.01
