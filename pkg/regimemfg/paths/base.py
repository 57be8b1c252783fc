from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

TIME_TOLERANCE = 1e-12

JumpType = Tuple[float, int]


class PathError(ValueError):
    pass


class SpanMismatchError(PathError):
    pass


@dataclass(frozen=True)
class RegimePath:
    """
    A piecewise-constant, right-continuous regime trajectory on ``[span_start, span_end)``.

    ``initial_state`` is the regime at ``span_start`` and ``jumps`` is an ordered tuple of ``(time, new_state)``
    pairs.  Regimes are numbered from 1.
    """

    initial_state: int
    jumps: Tuple[JumpType, ...] = ()
    span_end: float = 0.0
    span_start: float = 0.0

    def __post_init__(self):
        if self.initial_state < 1:
            raise PathError(f"Regimes are numbered from 1, got initial state {self.initial_state!r}")
        if self.span_end < self.span_start - TIME_TOLERANCE:
            raise PathError(f"Span end {self.span_end} is before span start {self.span_start}")

        object.__setattr__(self, "jumps", tuple((float(time), int(state)) for time, state in self.jumps))

        previous_time = self.span_start
        previous_state = self.initial_state
        for time, state in self.jumps:
            if not previous_time < time < self.span_end:
                raise PathError(
                    f"Jump times must be strictly increasing inside ({self.span_start}, {self.span_end}), got {time}"
                )
            if state == previous_state:
                raise PathError(f"Self-jump to regime {state} at time {time}")
            if state < 1:
                raise PathError(f"Regimes are numbered from 1, got {state!r}")
            previous_time = time
            previous_state = state

    @classmethod
    def constant(cls, state: int, span_start: float, span_end: float) -> "RegimePath":
        return cls(state, (), span_end=span_end, span_start=span_start)

    @classmethod
    def from_interval_states(cls, states: Sequence[int], time_grid: Sequence[float]) -> "RegimePath":
        """
        Build the path that holds ``states[k]`` on ``[time_grid[k], time_grid[k + 1])``.  The path spans
        ``[time_grid[0], time_grid[len(states)])``.
        """
        assert len(states) > 0, "At least one interval state is needed"
        assert len(time_grid) > len(states), "The time grid is shorter than the list of interval states"

        jumps = []
        for k in range(1, len(states)):
            if states[k] != states[k - 1]:
                jumps.append((float(time_grid[k]), int(states[k])))
        return cls(int(states[0]), tuple(jumps), span_end=float(time_grid[len(states)]), span_start=float(time_grid[0]))

    @property
    def span(self) -> float:
        return self.span_end - self.span_start

    @property
    def is_empty(self) -> bool:
        return self.span <= TIME_TOLERANCE

    @property
    def states(self) -> Tuple[int, ...]:
        """
        The ordered sequence of regimes visited (consecutive entries always differ).
        """
        return (self.initial_state,) + tuple(state for _, state in self.jumps)

    @property
    def jump_times(self) -> Tuple[float, ...]:
        return tuple(time for time, _ in self.jumps)

    @property
    def terminal_state(self) -> int:
        """
        The left limit of the path at ``span_end``.
        """
        return self.jumps[-1][1] if self.jumps else self.initial_state

    def value_at(self, time: float) -> int:
        """
        The regime in force at ``time`` (the last state whose jump time is not after ``time``).
        """
        if not self.span_start - TIME_TOLERANCE <= time <= self.span_end + TIME_TOLERANCE:
            raise PathError(f"Time {time} is outside the span [{self.span_start}, {self.span_end})")
        state = self.initial_state
        for jump_time, new_state in self.jumps:
            if jump_time <= time:
                state = new_state
            else:
                break
        return state

    def __len__(self) -> int:
        return len(self.jumps)


def jump_count(path: RegimePath) -> int:
    return len(path.jumps)


def _check_same_span(path1: RegimePath, path2: RegimePath) -> None:
    if (
        abs(path1.span_start - path2.span_start) > TIME_TOLERANCE
        or abs(path1.span_end - path2.span_end) > TIME_TOLERANCE
    ):
        raise SpanMismatchError(
            f"Paths have different spans: [{path1.span_start}, {path1.span_end}) "
            f"and [{path2.span_start}, {path2.span_end})"
        )


def skorohod_distance(path1: RegimePath, path2: RegimePath) -> float:
    """
    The Skorohod-type distance between two regime paths on the same span.

    A time warp either aligns the two state sequences exactly (then only the warp's displacement counts) or leaves a
    mismatch somewhere, which costs at least the diameter 1 of the discrete metric.  Paths visiting the same sequence
    of regimes are therefore at distance ``max |t_a - s_a|`` over paired jump times (the piecewise-linear warp through
    the pairs attains it), and every other pair sits at the capped value 1.
    """
    _check_same_span(path1, path2)

    if path1.states != path2.states:
        return 1.0
    if not path1.jumps:
        return 0.0

    displacement = max(abs(t1 - t2) for t1, t2 in zip(path1.jump_times, path2.jump_times))
    return min(displacement, 1.0)


def disagreement_time(path1: RegimePath, path2: RegimePath) -> float:
    """
    The Lebesgue measure of the set of times where the two paths are in different regimes.
    """
    _check_same_span(path1, path2)

    breakpoints = sorted({path1.span_start, path1.span_end, *path1.jump_times, *path2.jump_times})
    total = 0.0
    for start, stop in zip(breakpoints[:-1], breakpoints[1:]):
        if stop - start <= 0:
            continue
        if path1.value_at(start) != path2.value_at(start):
            total += stop - start
    return total


def concat(path1: RegimePath, path2: RegimePath) -> RegimePath:
    """
    The combination ``path1 ⊕ path2`` of a path on ``[r, t)`` with a path on ``[t, s)``.

    A jump is recorded at ``t`` only when ``path2`` starts in a different regime from where ``path1`` ends.
    """
    if abs(path1.span_end - path2.span_start) > TIME_TOLERANCE:
        raise PathError(
            f"Paths do not abut: first ends at {path1.span_end}, second starts at {path2.span_start}"
        )

    if path2.is_empty:
        return path1
    if path1.is_empty:
        return RegimePath(path2.initial_state, path2.jumps, span_end=path2.span_end, span_start=path1.span_start)

    jumps = list(path1.jumps)
    if path2.initial_state != path1.terminal_state:
        jumps.append((path2.span_start, path2.initial_state))
    jumps.extend(path2.jumps)
    return RegimePath(path1.initial_state, tuple(jumps), span_end=path2.span_end, span_start=path1.span_start)


def extend(path: RegimePath, epsilon: float) -> RegimePath:
    """
    The continuous extension of ``path`` by ``epsilon``: the terminal regime is held on the added interval.
    """
    if epsilon < 0:
        raise PathError(f"Extension length must be non-negative, got {epsilon}")
    return RegimePath(path.initial_state, path.jumps, span_end=path.span_end + epsilon, span_start=path.span_start)


def restrict(path: RegimePath, epsilon: float) -> RegimePath:
    """
    The restriction of ``path`` to ``[span_start, span_end - epsilon)``; jumps at or after the new end are dropped.
    """
    if epsilon < 0:
        raise PathError(f"Restriction length must be non-negative, got {epsilon}")
    if epsilon > path.span + TIME_TOLERANCE:
        raise PathError(f"Cannot restrict a path of span {path.span} by {epsilon}")

    new_end = max(path.span_end - epsilon, path.span_start)
    jumps = tuple((time, state) for time, state in path.jumps if time < new_end - TIME_TOLERANCE)
    return RegimePath(path.initial_state, jumps, span_end=new_end, span_start=path.span_start)


def extend_restrict(path: RegimePath, epsilon: float) -> RegimePath:
    """
    Extend the path by ``epsilon`` when it is non-negative, otherwise restrict it by ``-epsilon``.
    """
    if epsilon >= 0:
        return extend(path, epsilon)
    return restrict(path, -epsilon)


def vertical_extension(path: RegimePath, state: int, epsilon: float) -> RegimePath:
    """
    ``path ⊕ state`` held on ``[span_end, span_end + epsilon)``.
    """
    return concat(path, RegimePath.constant(state, path.span_end, path.span_end + epsilon))


def as_grid_states(path: RegimePath, time_grid: Sequence[float]) -> np.ndarray:
    """
    The regime in force at the start of every grid interval covered by the path.
    """
    grid = np.asarray(time_grid, dtype=float)
    covered = grid[grid < path.span_end - TIME_TOLERANCE]
    return np.array([path.value_at(time) for time in covered], dtype=int)
