import numpy as np
import pytest

from regimemfg.equilibrium.base import fp_iteration
from regimemfg.scenario.base import SolverSettings
from regimemfg.scenario.presets import lq_scenario
from regimemfg.validation.local_optimality import (
    EstimationMethod,
    Probe,
    ProbeError,
    extrapolate,
    improving_action,
    local_optimality_test,
    random_probes,
    splice,
)


@pytest.fixture(name="result", scope="module")
def fixture_result():
    scenario = lq_scenario(
        n_steps=10, x_points=61, jump_cap=1, regime_amplitude=0.5, u_bounds=(-2.0, 2.0), solver=SolverSettings(tol=1e-8)
    )
    return fp_iteration(scenario)


def probe_on(result, k, x_index, position=0):
    return Probe(k, result.tree.level(k)[position].node_id, x_index)


def central_probe(result, strategy, k):
    node = result.tree.level(k)[0]
    grid = result.scenario.grid
    interior = np.abs(grid.x) < 1.0
    candidates = np.flatnonzero(interior)
    x_index = int(candidates[np.argmin(np.abs(strategy.at(node)[interior]))])
    return Probe(k, node.node_id, x_index)


def test_extrapolation_of_linear_gains():
    eps = [0.4, 0.2, 0.1]

    assert extrapolate(eps, [1 + 2 * value for value in eps]) == pytest.approx(1.0)
    assert extrapolate([0.1], [0.7]) == 0.7


class TestSplice:
    def test_null_shift_keeps_the_strategy(self, result):
        node = result.tree.level(2)[0]
        u0 = result.strategy.at(node)[20]

        spliced = splice(result.strategy, node, 20, u0, 3, (-2.0, 2.0))

        assert spliced == result.strategy

    def test_shift_is_limited_to_the_window(self, result):
        tree = result.tree
        node = tree.level(2)[0]

        spliced = splice(result.strategy, node, 20, 2.0, 2, (-2.0, 2.0))

        changed = {
            other.node_id for other in tree.nodes if not np.array_equal(spliced.at(other), result.strategy.at(other))
        }
        window = {other.node_id for other in tree.subtree(node) if other.time_index < 4}
        assert changed == window
        assert spliced.at(node)[20] == pytest.approx(2.0)
        assert spliced.within(-2.0, 2.0)

    def test_feedback_is_shifted_by_a_constant(self, result):
        node = result.tree.level(2)[0]
        original = result.strategy.at(node)
        u0 = original[20] + 0.1

        spliced = splice(result.strategy, node, 20, u0, 1, (-2.0, 2.0))

        unclipped = np.abs(original + 0.1) < 2.0
        assert spliced.at(node)[unclipped] == pytest.approx(original[unclipped] + 0.1, abs=1e-14)
        assert not np.allclose(spliced.at(node), u0)


class TestLocalOptimality:
    def test_null_deviation_has_no_gain(self, result):
        probe = probe_on(result, 3, 30)
        node = result.tree.nodes[probe.node_id]

        report = local_optimality_test(result, probe, result.strategy.at(node)[30])

        assert report.gains == (0.0, 0.0, 0.0)
        assert report.limit == pytest.approx(0.0, abs=1e-12)
        assert report.passed

    @pytest.mark.parametrize("u0", [-2.0, 0.0, 2.0], ids=["lower", "zero", "upper"])
    def test_equilibrium_passes(self, result, u0):
        for probe in random_probes(result, 3, seed=1):
            report = local_optimality_test(result, probe, u0)

            assert report.passed, report.to_dict()
            assert report.eps == pytest.approx([0.2, 0.1, 0.05])

    def test_perturbed_strategy_is_detected(self, result):
        perturbed = result.strategy.copy()
        perturbed.values[:] = np.clip(result.strategy.values + 0.3, -2.0, 2.0)
        probe = central_probe(result, result.strategy, 2)

        report = local_optimality_test(result, probe, 0.0, strategy=perturbed)

        assert not report.passed
        assert report.improvement_rate > 1e-2

    def test_monte_carlo_null_deviation(self, result):
        probe = probe_on(result, 4, 30, position=1)
        node = result.tree.nodes[probe.node_id]

        report = local_optimality_test(
            result, probe, result.strategy.at(node)[30], method="monte_carlo", n_samples=500
        )

        assert report.method == EstimationMethod.MONTE_CARLO
        assert report.gains == (0.0, 0.0, 0.0)
        assert report.passed

    def test_monte_carlo_agrees_with_pde(self, result):
        probe = probe_on(result, 2, 30)

        pde = local_optimality_test(result, probe, 1.0, eps_steps=(2,))
        monte_carlo = local_optimality_test(
            result, probe, 1.0, eps_steps=(2,), method=EstimationMethod.MONTE_CARLO, n_samples=20_000, seed=3
        )

        assert monte_carlo.std_errors[0] > 0
        tolerance = max(5 * monte_carlo.std_errors[0], 0.2 * abs(pde.gains[0]))
        assert monte_carlo.gains[0] == pytest.approx(pde.gains[0], abs=tolerance)

    def test_report_serializes(self, result):
        report = local_optimality_test(result, probe_on(result, 0, 30), 1.0)

        data = report.to_dict()

        assert data["method"] == "pde"
        assert data["probe"] == {"time_index": 0, "node_id": 0, "x_index": 30}
        assert data["passed"] is True

    @pytest.mark.parametrize(
        "probe, u0, eps_steps",
        [
            (Probe(10, 0, 30), 0.0, (1,)),
            (Probe(3, 0, 30), 0.0, (1,)),
            (Probe(0, 0, 61), 0.0, (1,)),
            (Probe(0, 0, 30), 5.0, (1,)),
            (Probe(8, None, 30), 0.0, (4, 2, 1)),
        ],
        ids=["terminal-level", "wrong-level", "outside-grid", "outside-action-set", "window-too-long"],
    )
    def test_invalid_deviation_point_raises_error(self, result, probe, u0, eps_steps):
        if probe.node_id is None:
            probe = probe_on(result, probe.time_index, probe.x_index)

        with pytest.raises(ProbeError):
            local_optimality_test(result, probe, u0, eps_steps=eps_steps)


@pytest.mark.slow
def test_reference_equilibrium_is_locally_optimal():
    scenario = lq_scenario(u_bounds=(-2.0, 2.0))
    result = fp_iteration(scenario)
    assert result.converged

    for probe in random_probes(result, 5, seed=11):
        for u0 in (scenario.u_min, 0.0, scenario.u_max):
            assert local_optimality_test(result, probe, u0).passed

    perturbed = result.strategy.copy()
    perturbed.values[:] = np.clip(result.strategy.values + 0.3, scenario.u_min, scenario.u_max)
    probe = central_probe(result, result.strategy, 5)
    assert not local_optimality_test(result, probe, 0.0, strategy=perturbed).passed


class TestImprovingAction:
    def test_reproduces_the_equilibrium_strategy(self, result):
        probe = probe_on(result, 3, 35)
        node = result.tree.nodes[probe.node_id]

        assert improving_action(result, probe) == pytest.approx(result.strategy.at(node)[35], abs=0.05)
        assert local_optimality_test(result, probe, improving_action(result, probe)).passed

    def test_detects_a_perturbed_strategy_anywhere(self, result):
        perturbed = result.strategy.copy()
        perturbed.values[:] = np.clip(result.strategy.values + 0.3, -2.0, 2.0)

        for probe in random_probes(result, 3, seed=2):
            u0 = improving_action(result, probe, perturbed)
            report = local_optimality_test(result, probe, u0, strategy=perturbed)

            assert not report.passed, report.to_dict()
