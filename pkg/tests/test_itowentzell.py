from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from conftest import scenario_doc
from iwverify.field import FieldState, eval_field, evolve_field
from iwverify.itowentzell import (
    CLASSICAL_GROUPS,
    LEDGER_GROUPS,
    FrozenField,
    RhsLedger,
    accumulate_rhs,
    chain_rule_ledger,
    classical_ito_increment,
    classical_iw_ledger,
    itemwise_difference,
    lhs_increment,
    reduction_check,
    residual,
    simulate,
)
from iwverify.noise import CheckpointKind, JumpStream, NoiseMismatchError, NoisePath
from iwverify.scenario import ScenarioConfig, draw_path_noise, validate_scenario
from iwverify.schedules import AffineMarkMap, Schedule
from iwverify.state import evolve_state


def test_zero_scenario_has_zero_residual(zero_cfg):
    for index in range(3):
        trace = residual(zero_cfg, draw_path_noise(zero_cfg, index))
        assert_array_equal(trace.residual, 0.0)
        assert_array_equal(trace.lhs, 0.0)


def test_jumps_are_booked_exactly(jump_only_cfg):
    for index in range(10):
        path = draw_path_noise(jump_only_cfg, index)
        trace = residual(jump_only_cfg, path)
        assert len(trace.jump_lhs) == path.jumps.count
        assert trace.max_jump_deviation <= 1e-12
        assert np.max(np.abs(trace.residual)) <= 1e-12 * max(
            1.0, float(np.max(np.abs(trace.lhs)))
        ) * (1 + path.jumps.count)


def test_ledger_is_consistent(small_cfg):
    path = draw_path_noise(small_cfg, 0)
    trace = residual(small_cfg, path)
    ledger = trace.ledger
    assert ledger.groups == LEDGER_GROUPS
    assert ledger.consistent()
    assert_array_equal(ledger.items[0], 0.0)
    assert ledger.total == pytest.approx(sum(ledger.group_totals().values()))
    # jump groups live on post_jump rows only
    off_jump = ledger.kinds != CheckpointKind.POST_JUMP
    assert_array_equal(ledger.group("jump_F")[off_jump], 0.0)
    assert_array_equal(ledger.group("jump_G")[off_jump], 0.0)
    assert_array_equal(ledger.group("missing"), 0.0)


def test_residual_shrinks_under_refinement(small_cfg):
    paths = [draw_path_noise(small_cfg, index) for index in range(20)]
    coarse = [residual(small_cfg, path.coarsen(4)).final for path in paths]
    fine = [residual(small_cfg, path).final for path in paths]
    assert np.all(np.isfinite(coarse))
    assert np.sqrt(np.mean(np.square(fine))) < np.sqrt(np.mean(np.square(coarse)))


def test_deterministic_path_misses_by_left_point_error(jump_free_cfg):
    n = jump_free_cfg.state_dim
    cfg = replace(
        jump_free_cfg,
        initial_state=np.zeros(n),
        state_coeffs=replace(
            jump_free_cfg.state_coeffs,
            drift=Schedule.constant(np.ones(n)),
            diffusion=Schedule.constant(np.zeros((n, 1))),
        ),
        field_spec=replace(
            jump_free_cfg.field_spec,
            basis=tuple(
                replace(e, q=Schedule.constant(0.0), d=Schedule.constant([0.0]))
                for e in jump_free_cfg.field_spec.basis[1:]
            ),
        ),
    )
    # F = 0.5 x², x(t) = t: the left-point rule misses ∫ x dt by T·dt / 2
    for steps in (8, 16, 32):
        trace = residual(cfg, draw_path_noise(cfg, 0, steps))
        assert trace.final == pytest.approx(0.5 / steps, rel=1e-12)


def test_lhs_increment_uses_post_jump_value(small_cfg):
    path = NoisePath(
        draw_path_noise(small_cfg, 0).wiener,
        JumpStream(1.0, np.array([0.4]), np.array([[0.5]])),
    )
    trajectory, field = simulate(small_cfg, path)
    spec = small_cfg.field_spec
    post = trajectory.layout.post_rows[0]
    expected = float(
        eval_field(field[post], spec, trajectory.values[post])
        - eval_field(field[0], spec, trajectory.initial)
    )
    assert lhs_increment(field, spec, trajectory, 0.4) == pytest.approx(expected)
    with pytest.raises(ValueError):
        lhs_increment(field, spec, trajectory, 0.41)


def test_mismatched_noise_is_rejected(small_cfg):
    path = draw_path_noise(small_cfg, 0)
    other = draw_path_noise(small_cfg, 1)
    trajectory, _ = simulate(small_cfg, path)
    field = evolve_field(small_cfg.field_spec, *other)
    with pytest.raises(NoiseMismatchError):
        accumulate_rhs(small_cfg, trajectory, field, *path)


def test_reductions_on_jump_free_scenario(jump_free_cfg):
    path = draw_path_noise(jump_free_cfg, 0)
    results = reduction_check(jump_free_cfg, path)
    assert list(results) == ["classical-iw"]
    assert results["classical-iw"].passed


def test_classical_ledger_matches_generalized(jump_free_cfg):
    path = draw_path_noise(jump_free_cfg, 2)
    trajectory, field = simulate(jump_free_cfg, path)
    general = accumulate_rhs(jump_free_cfg, trajectory, field, *path)
    classical = classical_iw_ledger(jump_free_cfg, trajectory, field, *path)
    assert classical.groups == CLASSICAL_GROUPS
    assert itemwise_difference(general, classical) <= 1e-14
    assert_array_equal(general.group("jump_F"), 0.0)


def test_classical_ledger_refuses_jumps(small_cfg):
    path = NoisePath(
        draw_path_noise(small_cfg, 0).wiener,
        JumpStream(1.0, np.array([0.4]), np.array([[0.5]])),
    )
    trajectory, field = simulate(small_cfg, path)
    with pytest.raises(ValueError):
        classical_iw_ledger(small_cfg, trajectory, field, *path)
    with pytest.raises(ValueError):
        reduction_check(small_cfg, path)


def test_chain_rule_needs_noise_free_scenario(jump_free_cfg):
    path = draw_path_noise(jump_free_cfg, 0)
    trajectory, field = simulate(jump_free_cfg, path)
    with pytest.raises(ValueError):
        chain_rule_ledger(jump_free_cfg, trajectory, field)


def test_frozen_field_matches_generalized_ito(jump_free_cfg):
    spec = jump_free_cfg.field_spec
    cfg = replace(
        jump_free_cfg,
        field_spec=replace(
            spec,
            basis=tuple(
                replace(e, q=Schedule.constant(0.0), d=Schedule.constant([0.0]))
                for e in spec.basis
            ),
        ),
    )
    results = reduction_check(cfg, draw_path_noise(cfg, 0))
    assert set(results) == {"classical-iw", "generalized-ito"}
    assert all(result.passed for result in results.values())


def test_ito_increment_books_jumps(small_cfg):
    path = draw_path_noise(small_cfg, 5)
    trajectory = evolve_state(small_cfg.state_coeffs, small_cfg.initial_state, *path)
    func = FrozenField(small_cfg.field_spec, small_cfg.field_spec.c0)
    ledger = classical_ito_increment(func, small_cfg.state_coeffs, trajectory, *path)
    assert isinstance(ledger, RhsLedger)
    post = trajectory.layout.post_rows
    values = func.value(trajectory.times, trajectory.values)
    assert_allclose(ledger.group("jump_F")[post], values[post] - values[post - 1])
    state = FieldState(0.0, small_cfg.field_spec.c0)
    assert_allclose(
        values, eval_field(state, small_cfg.field_spec, trajectory.values)
    )


def test_itemwise_difference_is_relative():
    times = np.array([0.0, 1.0])
    kinds = np.zeros(2, dtype=int)
    left = RhsLedger(("a",), times, kinds, np.array([[0.0], [1e6]]))
    right = RhsLedger(("a",), times, kinds, np.array([[0.0], [1e6 + 1e-4]]))
    assert itemwise_difference(left, right) == pytest.approx(1e-10, rel=1e-3)
    shifted = RhsLedger(("a",), times + 1, kinds, right.items)
    with pytest.raises(NoiseMismatchError):
        itemwise_difference(left, shifted)


def _square_with_unit_jumps() -> ScenarioConfig:
    # F = x², dx = dw + a unit jump per event, frozen coefficients
    doc = scenario_doc()
    doc["state"] = {
        "drift": [0.0],
        "diffusion": [[1.0]],
        "jump": {"matrix": [[0.0]], "offset": [1.0], "bound": 1.0},
    }
    doc["field"]["basis"] = [
        {
            "family": "polynomial",
            "powers": [2],
            "c0": 1.0,
            "q": 0.0,
            "d": [0.0],
            "jump": {"weights": [0.0], "offset": 0.0, "bound": 0.0},
        }
    ]
    return validate_scenario(ScenarioConfig.from_config(doc))


def test_jump_step_integrands_use_pre_step_state():
    cfg = _square_with_unit_jumps()
    wiener = draw_path_noise(cfg, 0, 8).wiener
    path = NoisePath(wiener, JumpStream(1.0, np.array([0.4]), np.array([[0.5]])))
    trajectory, field = simulate(cfg, path)
    ledger = accumulate_rhs(cfg, trajectory, field, *path)
    layout = trajectory.layout

    # the event cuts step 3, [0.375, 0.5]
    opening, closing = layout.grid_rows[3], layout.grid_rows[4]
    (post,) = layout.post_rows
    assert opening < post - 1 < post < closing
    dw = wiener.increments[3, 0]
    x_open, x_post = trajectory.values[opening, 0], trajectory.values[post, 0]
    assert x_post == pytest.approx(x_open + 1.0)

    grad_noise = ledger.group("grad_noise")
    assert grad_noise[closing] == pytest.approx(2 * x_open * dw, rel=1e-12)
    assert abs(grad_noise[closing] - 2 * x_post * dw) == pytest.approx(
        2 * abs(dw), rel=1e-12
    )
    # the ito term of F = x² is dt whatever the state
    assert ledger.group("ito")[closing] == pytest.approx(0.5 - 0.4, rel=1e-12)
    x_minus = trajectory.values[post - 1, 0]
    assert ledger.group("jump_F")[post] == pytest.approx(
        (x_minus + 1.0) ** 2 - x_minus**2, rel=1e-12
    )


def test_ito_increment_uses_pre_step_state():
    cfg = _square_with_unit_jumps()
    wiener = draw_path_noise(cfg, 1, 8).wiener
    path = NoisePath(wiener, JumpStream(1.0, np.array([0.4]), np.array([[0.5]])))
    trajectory = evolve_state(cfg.state_coeffs, cfg.initial_state, *path)
    func = FrozenField(cfg.field_spec, cfg.field_spec.c0)
    ledger = classical_ito_increment(func, cfg.state_coeffs, trajectory, *path)
    opening, closing = trajectory.layout.grid_rows[[3, 4]]
    expected = 2 * trajectory.values[opening, 0] * wiener.increments[3, 0]
    assert ledger.group("grad_noise")[closing] == pytest.approx(expected, rel=1e-12)


def _without(cfg: ScenarioConfig, term: str) -> ScenarioConfig:
    state, spec = cfg.state_coeffs, cfg.field_spec
    n, m = cfg.state_dim, cfg.wiener_dim
    match term:
        case "A":
            state = replace(state, drift=Schedule.constant(np.zeros(n)))
        case "B":
            state = replace(state, diffusion=Schedule.constant(np.zeros((n, m))))
        case "g":
            state = replace(state, jump=AffineMarkMap.zero((n,), cfg.mark_dim))
        case "Q" | "D" | "G":
            zeroed = {
                "Q": {"q": Schedule.constant(0.0)},
                "D": {"d": Schedule.constant(np.zeros(m))},
                "G": {"jump": AffineMarkMap.zero((), cfg.mark_dim)},
            }[term]
            spec = replace(
                spec, basis=tuple(replace(e, **zeroed) for e in spec.basis)
            )
    return replace(cfg, state_coeffs=state, field_spec=spec)


@pytest.mark.parametrize(
    "term, groups",
    [
        ("A", {"drift"}),
        ("B", {"ito", "cross", "grad_noise"}),
        ("Q", {"Q"}),
        ("D", {"D", "cross"}),
        ("g", {"jump_F"}),
        ("G", {"jump_G"}),
    ],
)
def test_zeroed_coefficient_silences_its_groups(small_cfg, term, groups):
    cfg = _without(small_cfg, term)
    path = NoisePath(
        draw_path_noise(cfg, 0, 8).wiener,
        JumpStream(1.0, np.array([0.4, 0.7]), np.array([[0.5], [0.25]])),
    )
    trajectory, field = simulate(cfg, path)
    ledger = accumulate_rhs(cfg, trajectory, field, *path)
    for name in LEDGER_GROUPS:
        column = ledger.group(name)
        if name in groups:
            assert_array_equal(column, 0.0, err_msg=name)
        else:
            assert np.any(column != 0.0), name
