import itertools
import random

import numpy as np
import pytest

from regimemfg.paths.base import (
    PathError,
    RegimePath,
    SpanMismatchError,
    as_grid_states,
    concat,
    disagreement_time,
    extend,
    extend_restrict,
    jump_count,
    restrict,
    skorohod_distance,
    vertical_extension,
)

GRID = np.linspace(0.0, 1.0, 11)


def grid_paths(max_jumps=2, m=2):
    """
    Every path on the 10-step grid with at most ``max_jumps`` switches.
    """
    paths = []
    for initial in range(1, m + 1):
        for n_jumps in range(max_jumps + 1):
            for positions in itertools.combinations(range(1, len(GRID) - 1), n_jumps):
                for targets in itertools.product(range(1, m + 1), repeat=n_jumps):
                    states = [initial]
                    valid = True
                    for target in targets:
                        if target == states[-1]:
                            valid = False
                            break
                        states.append(target)
                    if not valid:
                        continue
                    jumps = tuple((GRID[p], s) for p, s in zip(positions, states[1:]))
                    paths.append(RegimePath(initial, jumps, span_end=1.0))
    return paths


def values_on(path, times):
    states = np.array(path.states)
    return states[np.searchsorted(np.array(path.jump_times), times, side="right")]


def brute_force_warp_distance(path1, path2, knots=np.linspace(0.05, 0.95, 19)):
    """
    Minimise sup |lambda(s) - s| + state mismatch over single-knot piecewise-linear warps.
    """
    samples = np.linspace(0.0005, 0.9995, 1000)
    reference = values_on(path1, samples)
    best = np.inf
    for a in knots:
        for b in knots:
            warped = np.where(samples <= a, samples * b / a, b + (samples - a) * (1 - b) / (1 - a))
            mismatch = np.any(reference != values_on(path2, warped))
            best = min(best, abs(a - b) + float(mismatch))
    return min(best, 1.0)


class TestRegimePath:
    def test_value_at_is_right_continuous(self):
        path = RegimePath(1, ((0.3, 2), (0.7, 1)), span_end=1.0)

        assert path.value_at(0.0) == 1
        assert path.value_at(0.29) == 1
        assert path.value_at(0.3) == 2
        assert path.value_at(0.69) == 2
        assert path.value_at(0.7) == 1

    @pytest.mark.parametrize(
        "jumps",
        [((0.5, 2), (0.4, 1)), ((0.5, 1),), ((0.0, 2),), ((1.0, 2),), ((0.5, 0),)],
        ids=["decreasing-times", "self-jump", "jump-at-start", "jump-at-end", "regime-zero"],
    )
    def test_invalid_jumps_are_rejected(self, jumps):
        with pytest.raises(PathError):
            RegimePath(1, jumps, span_end=1.0)

    def test_value_outside_span_raises_error(self):
        with pytest.raises(PathError):
            RegimePath.constant(1, 0.0, 1.0).value_at(1.5)

    def test_from_interval_states(self):
        path = RegimePath.from_interval_states([1, 1, 2, 2, 1], GRID)

        assert path.jump_times == pytest.approx((0.2, 0.4))
        assert path.states == (1, 2, 1)
        assert path.span_end == pytest.approx(0.5)

    def test_as_grid_states_inverts_from_interval_states(self):
        states = [2, 1, 1, 2, 2, 2, 1, 1, 1, 2]
        path = RegimePath.from_interval_states(states, GRID)

        assert as_grid_states(path, GRID).tolist() == states


class TestJumpCount:
    def test_constant_path_has_no_jumps(self):
        assert jump_count(RegimePath.constant(1, 0.0, 1.0)) == 0

    def test_two_jumps(self):
        assert jump_count(RegimePath(1, ((0.3, 2), (0.7, 1)), span_end=1.0)) == 2


class TestSkorohodDistance:
    def test_distance_to_itself_is_zero(self):
        path = RegimePath(1, ((0.3, 2), (0.7, 1)), span_end=1.0)

        assert skorohod_distance(path, path) == 0.0

    def test_different_jump_structure_costs_one(self):
        constant = RegimePath.constant(1, 0.0, 1.0)
        jumping = RegimePath(1, ((0.5, 2),), span_end=1.0)

        assert skorohod_distance(constant, jumping) == 1.0

    def test_shifted_jump_costs_the_shift(self):
        early = RegimePath(1, ((0.4, 2),), span_end=1.0)
        late = RegimePath(1, ((0.5, 2),), span_end=1.0)

        assert skorohod_distance(early, late) == pytest.approx(0.1)

    @pytest.mark.parametrize(
        "path1, path2",
        [
            (RegimePath(1, ((0.4, 2),), span_end=1.0), RegimePath(1, ((0.5, 2),), span_end=1.0)),
            (RegimePath.constant(1, 0.0, 1.0), RegimePath(1, ((0.5, 2),), span_end=1.0)),
            (RegimePath(2, ((0.3, 1),), span_end=1.0), RegimePath(2, ((0.6, 1),), span_end=1.0)),
        ],
        ids=["shift", "structure-mismatch", "larger-shift"],
    )
    def test_matches_brute_force_warp_search(self, path1, path2):
        assert skorohod_distance(path1, path2) == pytest.approx(brute_force_warp_distance(path1, path2), abs=1e-9)

    def test_mismatched_spans_raise_error(self):
        with pytest.raises(SpanMismatchError):
            skorohod_distance(RegimePath.constant(1, 0.0, 1.0), RegimePath.constant(1, 0.0, 0.5))

    def test_disagreement_is_bounded_by_jump_count_times_distance(self):
        paths = grid_paths()
        for path1, path2 in itertools.product(paths, repeat=2):
            distance = skorohod_distance(path1, path2)
            if distance < 1:
                assert disagreement_time(path1, path2) <= jump_count(path1) * distance + 1e-12

    def test_common_prefix_does_not_increase_distance(self):
        prefixes = [RegimePath.constant(1, 0.0, 0.5), RegimePath(2, ((0.2, 1),), span_end=0.5)]
        suffixes = [
            RegimePath(1, ((0.6, 2),), span_end=1.0, span_start=0.5),
            RegimePath(1, ((0.8, 2),), span_end=1.0, span_start=0.5),
            RegimePath(2, ((0.7, 1), (0.9, 2)), span_end=1.0, span_start=0.5),
            RegimePath.constant(2, 0.5, 1.0),
        ]
        for prefix in prefixes:
            for suffix1, suffix2 in itertools.product(suffixes, repeat=2):
                combined = skorohod_distance(concat(prefix, suffix1), concat(prefix, suffix2))
                assert combined <= skorohod_distance(suffix1, suffix2) + 1e-12

    def test_metric_axioms_on_equal_jump_count_paths(self):
        rng = random.Random(7)
        two_jump_paths = [path for path in grid_paths() if jump_count(path) == 2]
        for _ in range(300):
            a, b, c = rng.sample(two_jump_paths, 3)
            assert skorohod_distance(a, b) == skorohod_distance(b, a)
            assert skorohod_distance(a, c) <= skorohod_distance(a, b) + skorohod_distance(b, c) + 1e-12


class TestConcat:
    def test_concat_with_empty_path_is_identity(self):
        path = RegimePath(1, ((0.2, 2),), span_end=0.5)

        assert concat(path, RegimePath.constant(2, 0.5, 0.5)) == path

    def test_concat_of_different_constants_records_a_jump(self):
        result = concat(RegimePath.constant(1, 0.0, 0.5), RegimePath.constant(2, 0.5, 1.0))

        assert result.jumps == ((0.5, 2),)
        assert result.span_end == 1.0

    def test_concat_of_equal_constants_records_no_jump(self):
        result = concat(RegimePath.constant(1, 0.0, 0.5), RegimePath.constant(1, 0.5, 1.0))

        assert result.jumps == ()

    def test_non_abutting_paths_raise_error(self):
        with pytest.raises(PathError):
            concat(RegimePath.constant(1, 0.0, 0.5), RegimePath.constant(1, 0.6, 1.0))

    def test_jump_count_of_concatenation(self):
        first_half = [RegimePath.from_interval_states(states, GRID) for states in itertools.product([1, 2], repeat=5)]
        second_half = [
            RegimePath.from_interval_states(states, GRID[5:]) for states in itertools.product([1, 2], repeat=5)
        ]
        for path1 in first_half:
            for path2 in second_half:
                if jump_count(path1) > 2 or jump_count(path2) > 2:
                    continue
                total = jump_count(path1) + jump_count(path2)
                assert jump_count(concat(path1, path2)) in (total, total + 1)


class TestExtendRestrict:
    def test_extend_by_zero_is_identity(self):
        path = RegimePath(1, ((0.4, 2),), span_end=0.5)

        assert extend(path, 0.0) == path

    def test_restrict_undoes_extend(self):
        path = RegimePath(1, ((0.4, 2),), span_end=0.5)

        assert restrict(extend(path, 0.3), 0.3) == path

    def test_extend_holds_the_terminal_regime(self):
        path = RegimePath(1, ((0.4, 2),), span_end=0.5)

        extended = extend_restrict(path, 0.3)

        assert extended.jumps == ((0.4, 2),)
        assert extended.span_end == pytest.approx(0.8)
        assert extended.value_at(0.75) == 2

    def test_restrict_drops_jumps_at_the_new_end(self):
        path = RegimePath(1, ((0.4, 2),), span_end=0.5)

        restricted = extend_restrict(path, -0.1)

        assert restricted.jumps == ()
        assert restricted.span_end == pytest.approx(0.4)

    def test_restrict_beyond_span_raises_error(self):
        with pytest.raises(PathError):
            restrict(RegimePath.constant(1, 0.0, 0.5), 0.6)

    def test_vertical_extension(self):
        bumped = vertical_extension(RegimePath.constant(1, 0.0, 0.5), 2, 0.1)

        assert bumped.jumps == ((0.5, 2),)
        assert bumped.span_end == pytest.approx(0.6)
