from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
import numpy as np
from numpy.testing import assert_allclose
import pytest

from iwverify.field import (
    BasisElement,
    FieldSpec,
    FieldState,
    GaussianBump,
    Polynomial,
    Sinusoid,
    StateBoxError,
    eval_D,
    eval_D_grad,
    eval_field,
    eval_G,
    eval_grad,
    eval_hess,
    eval_Q,
    evolve_field,
)
from iwverify.noise import JumpStream, TimeGrid, sample_wiener
from iwverify.schedules import AffineMarkMap, ConfigError, JumpBoundError, Schedule

FUNCTIONS = [
    Polynomial(np.array([2.0, 1.0, 0.0])),
    Polynomial(np.array([3.0, 0.0, 2.0])),
    GaussianBump(np.array([0.1, -0.2, 0.3]), 0.8),
    Sinusoid(np.array([1.0, -2.0, 0.5]), 0.4),
]
points = arrays(
    float, (3,), elements=st.floats(-2, 2, allow_nan=False, allow_infinity=False)
)


def _element(
    function, c0=1.0, q=0.0, d=(0.0,), weights=(0.0,), offset=0.0, bound=1.0
):
    jump = AffineMarkMap(
        Schedule.constant(list(weights)), Schedule.constant(offset), bound
    )
    return BasisElement(
        function, c0, Schedule.constant(q), Schedule.constant(list(d)), jump
    )


@pytest.mark.parametrize("function", FUNCTIONS, ids=lambda f: f.family)
@given(x=points)
@settings(max_examples=30, deadline=None)
def test_hessian_is_symmetric(function, x):
    hess = function.hess(x)
    assert hess.shape == (3, 3)
    assert_allclose(hess, hess.T, rtol=0, atol=1e-12)


@pytest.mark.parametrize("function", FUNCTIONS, ids=lambda f: f.family)
def test_derivatives_match_finite_differences(function):
    x, h = np.array([0.4, -0.7, 1.1]), 1e-6
    steps = h * np.eye(3)
    fd_grad = (function.value(x + steps) - function.value(x - steps)) / (2 * h)
    assert_allclose(function.grad(x), fd_grad, rtol=1e-6, atol=1e-8)
    fd_hess = (function.grad(x + steps) - function.grad(x - steps)) / (2 * h)
    assert_allclose(function.hess(x), fd_hess, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("function", FUNCTIONS, ids=lambda f: f.family)
def test_batched_evaluation(function):
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert function.value(x).shape == (5,)
    assert function.grad(x).shape == (5, 3)
    assert function.hess(x).shape == (5, 3, 3)
    assert_allclose(function.hess(x)[2], function.hess(x[2]))


@given(
    x=points,
    a=st.floats(-3, 3, allow_nan=False),
    b=st.floats(-3, 3, allow_nan=False),
)
@settings(max_examples=30, deadline=None)
def test_field_is_linear_in_coefficients(x, a, b):
    spec = FieldSpec(10.0, tuple(_element(f) for f in FUNCTIONS))
    c1, c2 = np.arange(4.0), np.array([1.0, -1.0, 0.5, 2.0])
    combined = eval_field(FieldState(0.0, a * c1 + b * c2), spec, x)
    separate = a * eval_field(FieldState(0.0, c1), spec, x) + b * eval_field(
        FieldState(0.0, c2), spec, x
    )
    assert combined == pytest.approx(separate, rel=1e-9, abs=1e-9)


def test_coefficients_follow_their_drivers():
    wiener = sample_wiener(TimeGrid(1.0, 8), 1, 5)
    jumps = JumpStream(1.0, np.array([0.3, 0.8]), np.array([[1.0], [-1.0]]))
    spec = FieldSpec(
        10.0,
        (
            _element(FUNCTIONS[2], c0=1.0, q=0.5, d=(0.2,)),
            _element(FUNCTIONS[3], c0=0.0, weights=(0.4,), offset=0.1),
        ),
    )
    field = evolve_field(spec, wiener, jumps)
    assert len(field) == 9 + 4
    assert_allclose(
        field.final.coeffs,
        [1.0 + 0.5 + 0.2 * wiener.values[-1, 0], 0.5 - 0.3],
        rtol=1e-12,
    )
    assert field.final.time == 1.0
    post = field.layout.post_rows
    assert_allclose(field.coeffs[post, 1] - field.coeffs[post - 1, 1], [0.5, -0.3])


def test_field_jump_bound():
    wiener = sample_wiener(TimeGrid(1.0, 8), 1, 5)
    jumps = JumpStream(1.0, np.array([0.3]), np.array([[2.0]]))
    spec = FieldSpec(10.0, (_element(FUNCTIONS[2], weights=(1.0,), bound=1.0),))
    with pytest.raises(JumpBoundError, match=r"basis\[0\]"):
        evolve_field(spec, wiener, jumps)


def test_field_drivers():
    spec = FieldSpec(
        10.0,
        (
            BasisElement(
                Polynomial(np.array([1.0, 1.0])),
                2.0,
                Schedule((0.5,), np.array([1.0, 3.0])),
                Schedule.constant([0.5, -0.5]),
                AffineMarkMap(
                    Schedule((0.5,), np.array([[1.0, 0.0], [0.0, 1.0]])),
                    Schedule.constant(0.0),
                    5.0,
                ),
            ),
        ),
    )
    x = np.array([2.0, 3.0])
    state = FieldState(0.0, spec.c0)
    assert eval_field(state, spec, x) == pytest.approx(12.0)
    assert_allclose(eval_grad(state, spec, x), [6.0, 4.0])
    assert_allclose(eval_hess(state, spec, x), [[0.0, 2.0], [2.0, 0.0]])
    assert eval_Q(0.25, spec, x) == pytest.approx(6.0)
    assert eval_Q(0.5, spec, x) == pytest.approx(18.0)
    assert_allclose(eval_D(0.0, spec, x), [3.0, -3.0])
    assert_allclose(eval_D_grad(0.0, spec, x), [[1.5, 1.0], [-1.5, -1.0]])
    gamma = np.array([1.0, 2.0])
    # a jump at a breakpoint uses the piece that the breakpoint closes
    assert eval_G(0.5, spec, x, gamma) == pytest.approx(6.0)
    assert eval_G(0.75, spec, x, gamma) == pytest.approx(12.0)


def test_state_box_applies_to_polynomials_only():
    poly = FieldSpec(5.0, (_element(FUNCTIONS[0]),))
    poly.check_state_box(np.array([[1.0, 2.0, -5.0]]))
    with pytest.raises(StateBoxError):
        poly.check_state_box(np.array([[1.0, 6.0, 0.0]]))
    FieldSpec(5.0, (_element(FUNCTIONS[2]),)).check_state_box(np.full((1, 3), 1e6))


def test_config_round_trip_and_errors():
    raw = {
        "state_box": 5.0,
        "basis": [
            {
                "family": "sinusoid",
                "frequency": [1.0],
                "phase": 0.5,
                "c0": 1.0,
                "q": 0.0,
                "d": [0.1],
                "jump": {"weights": [0.0], "offset": 0.0, "bound": 0.0},
            }
        ],
    }
    spec = FieldSpec.from_config(raw)
    assert spec.to_config() == raw
    assert spec.bounded and spec.size == 1

    raw["basis"][0]["family"] = "wavelet"
    with pytest.raises(ConfigError, match="family"):
        FieldSpec.from_config(raw)
    raw["basis"][0]["family"] = "polynomial"
    with pytest.raises(ConfigError, match="unknown"):
        FieldSpec.from_config(raw)


def test_problems_name_the_element():
    spec = FieldSpec(
        -1.0,
        (_element(Polynomial(np.array([1.5])), d=(0.0, 0.0)),),
    )
    found = spec.problems(1, 1, 1, 1.0, 4)
    wheres = {v.where for v in found}
    assert "field.state_box" in wheres
    assert "field.basis[0]" in wheres
    assert "field.basis[0].d" in wheres
    assert {v.kind for v in found} <= {"InvalidFieldSpec", "InvalidDimension"}
