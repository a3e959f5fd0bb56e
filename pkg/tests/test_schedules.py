import numpy as np
from numpy.testing import assert_allclose
import pytest

from iwverify.schedules import (
    AffineMarkMap,
    ConfigError,
    JumpBoundError,
    Schedule,
    ScheduleMismatchError,
    as_number,
    read_keys,
)


def test_bare_value_is_a_single_piece():
    schedule = Schedule.from_config([1.0, 2.0], "drift")
    assert schedule.breakpoints == ()
    assert schedule.shape == (2,)
    assert schedule.to_config() == [1.0, 2.0]


def test_piecewise_round_trip():
    raw = {"breakpoints": [0.5], "values": [[1.0], [2.0]]}
    assert Schedule.from_config(raw, "drift").to_config() == raw


def test_on_grid_switches_at_breakpoint():
    schedule = Schedule((0.5,), np.array([1.0, 2.0]))
    assert_allclose(schedule.on_grid(1.0, 4), [1.0, 1.0, 2.0, 2.0])
    # refining keeps the switch on the same node
    assert_allclose(schedule.on_grid(1.0, 8), [1.0] * 4 + [2.0] * 4)


def test_on_grid_rejects_misaligned_breakpoint():
    schedule = Schedule((0.3,), np.array([1.0, 2.0]))
    with pytest.raises(ScheduleMismatchError):
        schedule.on_grid(1.0, 4)


def test_at_is_right_continuous_by_default():
    schedule = Schedule((0.5,), np.array([1.0, 2.0]))
    assert schedule.at(0.5) == 2.0
    assert schedule.at(0.5, left_continuous=True) == 1.0
    assert schedule.at(0.25) == 1.0


def test_problems_collects_everything():
    schedule = Schedule((0.3, 0.2), np.array([[1.0], [2.0]]))
    found = schedule.problems((2,), 1.0, 4, "state.drift")
    kinds = [v.kind for v in found]
    assert "InvalidDimension" in kinds
    assert kinds.count("InvalidSchedule") >= 3
    assert any("misalignment" in v.message for v in found)
    assert all(v.where == "state.drift" for v in found)


def test_read_keys_rejects_unknown_and_missing():
    with pytest.raises(ConfigError, match="unknown"):
        read_keys({"a": 1, "b": 2}, "x", ("a",))
    with pytest.raises(ConfigError, match="missing"):
        read_keys({}, "x", ("a",))
    with pytest.raises(ConfigError, match="mapping"):
        read_keys([1], "x", ("a",))


def test_as_number():
    assert as_number(3, "n", int) == 3
    assert as_number(3.0, "n", int) == 3
    with pytest.raises(ConfigError):
        as_number(True, "n")
    with pytest.raises(ConfigError):
        as_number("3", "n")
    with pytest.raises(ConfigError):
        as_number(2.5, "n", int)


def test_affine_mark_map():
    jump = AffineMarkMap(
        Schedule.constant([[2.0, 0.0], [0.0, 1.0]]),
        Schedule.constant([0.5, 0.0]),
        bound=10.0,
    )
    marks = np.array([[1.0, 1.0], [-1.0, 2.0]])
    values = jump.evaluate(1.0, 4, np.array([0, 3]), marks)
    assert_allclose(values, [[2.5, 1.0], [-1.5, 2.0]])
    jump.check_bound(values, "state.jump")
    with pytest.raises(JumpBoundError):
        AffineMarkMap(jump.linear, jump.offset, 1.0).check_bound(values, "state.jump")


def test_zero_mark_map():
    jump = AffineMarkMap.zero((), 3)
    assert jump.is_zero
    assert jump.linear.shape == (3,)
    assert jump.offset.shape == ()
    assert jump.problems((), 3, 1.0, 4, "f", "weights") == []
