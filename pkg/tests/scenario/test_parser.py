from pathlib import Path

import numpy as np
import pytest

from regimemfg.scenario.base import DiscountKind, InitialKind, ScenarioError, scenario_hash
from regimemfg.scenario.parser import load_scenario, parse_scenario

SCENARIO_DIR = Path(__file__).parents[2] / "scenarios"

MINIMAL = """\
[chain]
generator = [[-1, 1], [1, -1]]

[grids]
horizon = 1.0
time_steps = 10
x_min = -2
x_max = 2
x_points = 41

[dynamics]
sigma = "1"
b1 = "v"
mu0 = "gaussian(0, 0.5)"
u_min = -1
u_max = 1

[cost]
g1 = "v^2 / 2"
h = "0"
psi = lq
"""


def with_line(text, old, new):
    assert old in text
    return text.replace(old, new)


class TestParseScenario:
    def test_reference_scenario_file(self):
        scenario = load_scenario(SCENARIO_DIR / "lq_mfg.scn")

        assert scenario.m == 2
        assert scenario.horizon == 0.5
        assert scenario.n_steps == 40
        assert scenario.grid.n_points == 200
        assert scenario.jump_cap == 2
        assert scenario.psi.is_lq
        assert scenario.psi.control_cost == 1.0
        assert scenario.mu0.kind == InitialKind.GAUSSIAN
        assert scenario.b2[0](t=0.0, i=1, x=0.0, m1=1.0, m2=0.0) == pytest.approx(0.2)
        assert scenario.discount.kind == DiscountKind.NONE

    def test_hyperbolic_scenario_file(self):
        scenario = load_scenario(SCENARIO_DIR / "hyperbolic.scn")

        assert scenario.discount.kind == DiscountKind.HYPERBOLIC
        assert scenario.discount.rate == 2.0
        assert scenario.tau_dependent
        assert scenario.g2[1](tau=0.0, t=0.0, i=2, x=0.0, m1=0.0, m2=0.0) == pytest.approx(1.0)

    def test_minimal_scenario_uses_defaults(self):
        scenario = parse_scenario(MINIMAL)

        assert scenario.initial_regime == 1
        assert scenario.jump_cap == 2
        assert scenario.solver.inner_iters == 2
        assert scenario.solver.damping == 0.0
        assert scenario.b2[1](t=0.0, i=2, x=1.0, m1=3.0, m2=9.0) == 0.0
        assert not scenario.tau_dependent

    def test_regime_indexed_values(self):
        text = with_line(MINIMAL, 'b1 = "v"', 'b1 = "v"\nb2[1] = "1"\nb2[2] = "x"')

        scenario = parse_scenario(text)

        assert scenario.b2[0](t=0.0, i=1, x=5.0, m1=0.0, m2=0.0) == 1.0
        assert scenario.b2[1](t=0.0, i=2, x=5.0, m1=0.0, m2=0.0) == 5.0

    def test_missing_regime_value_raises_error(self):
        text = with_line(MINIMAL, 'h = "0"', 'h[1] = "0"')

        with pytest.raises(ScenarioError):
            parse_scenario(text)

    def test_tau_in_b1_is_rejected(self):
        text = with_line(MINIMAL, 'b1 = "v"', 'b1 = "v + tau"')

        with pytest.raises(ScenarioError) as error:
            parse_scenario(text)

        assert "tau" in str(error.value)
        assert error.value.line == 13
        assert error.value.column == 11

    def test_zero_sigma_is_rejected(self):
        text = with_line(MINIMAL, 'sigma = "1"', 'sigma = "0"')

        with pytest.raises(ScenarioError) as error:
            parse_scenario(text)

        assert "ellipticity" in str(error.value)

    def test_unvalidated_parse_keeps_degenerate_scenario(self):
        text = with_line(MINIMAL, 'sigma = "1"', 'sigma = "0"')

        scenario = parse_scenario(text, validate=False)

        assert np.all(scenario.sigma_values(0.0) == 0.0)

    def test_syntax_error_reports_line_and_column(self):
        text = with_line(MINIMAL, 'g1 = "v^2 / 2"', 'g1 = "v^2 / (2"')

        with pytest.raises(ScenarioError) as error:
            parse_scenario(text)

        assert error.value.line == 19
        assert error.value.column == 15
        assert str(error.value).startswith("line 19, column 15")

    @pytest.mark.parametrize(
        "old, new, line",
        [
            ("[grids]", "[grid]", 4),
            ("time_steps = 10", "timesteps = 10", 6),
            ("time_steps = 10", "time_steps = 10.5", 6),
            ("x_points = 41", "x_points 41", 9),
            ("u_min = -1", "u_min = [1]", 15),
            ('mu0 = "gaussian(0, 0.5)"', 'mu0 = "cauchy(0, 1)"', 14),
            ("psi = lq", 'psi = "clamp(-p, -1"', 21),
            ("generator = [[-1, 1], [1, -1]]", "generator = [[-1, 1], [1, -1]", 2),
        ],
        ids=[
            "unknown-section",
            "unknown-key",
            "non-integer",
            "missing-equals",
            "wrong-type",
            "unknown-initial-density",
            "psi-syntax",
            "broken-json",
        ],
    )
    def test_malformed_input_reports_line(self, old, new, line):
        with pytest.raises(ScenarioError) as error:
            parse_scenario(with_line(MINIMAL, old, new))

        assert error.value.line == line

    def test_missing_required_key_raises_error(self):
        with pytest.raises(ScenarioError) as error:
            parse_scenario(with_line(MINIMAL, 'h = "0"\n', ""))

        assert "'h'" in str(error.value)

    def test_duplicate_key_raises_error(self):
        with pytest.raises(ScenarioError) as error:
            parse_scenario(with_line(MINIMAL, 'h = "0"', 'h = "0"\nh = "1"'))

        assert error.value.line == 21

    def test_invalid_generator_is_rejected(self):
        with pytest.raises(ScenarioError) as error:
            parse_scenario(with_line(MINIMAL, "[[-1, 1], [1, -1]]", "[[-1, 0.5], [1, -1]]"))

        assert "generator" in str(error.value)

    def test_comments_are_ignored(self):
        text = "# header\n" + with_line(MINIMAL, 'b1 = "v"', 'b1 = "v"  # drift, "quoted" comment')

        assert parse_scenario(text).b1[0].text == "v"

    def test_expression_psi(self):
        text = with_line(MINIMAL, "psi = lq", 'psi = "-p"')

        scenario = parse_scenario(text)

        assert not scenario.psi.is_lq
        assert scenario.psi.expression(t=0.0, i=1, x=0.0, p=0.25) == -0.25

    def test_histogram_initial_density(self):
        masses = ", ".join(["1"] * 41)
        text = with_line(MINIMAL, 'mu0 = "gaussian(0, 0.5)"', f"mu0 = [{masses}]")

        scenario = parse_scenario(text)

        assert scenario.mu0.kind == InitialKind.HISTOGRAM
        assert scenario.mu0.discretize(scenario.grid) == pytest.approx(np.full(41, 1 / 41))

    def test_unreadable_file_raises_error(self, tmp_path):
        with pytest.raises(ScenarioError):
            load_scenario(tmp_path / "missing.scn")


class TestScenarioHash:
    def test_hash_ignores_line_endings_and_trailing_space(self):
        assert scenario_hash(MINIMAL) == scenario_hash(MINIMAL.replace("\n", "  \r\n"))

    def test_hash_changes_with_content(self):
        assert scenario_hash(MINIMAL) != scenario_hash(with_line(MINIMAL, 'h = "0"', 'h = "1"'))
