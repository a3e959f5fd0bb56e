from collections import abc
from dataclasses import dataclass
from functools import cached_property
import logging
from typing import NamedTuple, Protocol

import numpy as np

from iwverify.field import (
    FieldSpec,
    FieldState,
    FieldTrajectory,
    eval_field,
    evolve_field,
)
from iwverify.noise import (
    JumpStream,
    NoiseMismatchError,
    NoisePath,
    WienerPath,
    build_layout,
    noise_fingerprint,
)
from iwverify.scenario import ScenarioConfig
from iwverify.state import StateCoefficients, StateTrajectory, evolve_state


logger = logging.getLogger("iwverify.itowentzell")

LEDGER_GROUPS = ("Q", "D", "drift", "ito", "cross", "grad_noise", "jump_F", "jump_G")
CLASSICAL_GROUPS = LEDGER_GROUPS[:6]
CHAIN_RULE_GROUPS = ("Q", "drift")
ITO_GROUPS = ("time", "drift", "ito", "grad_noise", "jump_F")


@dataclass(frozen=True, eq=False)
class RhsLedger:
    """
    Itemized right-hand side of a differentiation formula along one path.

    `items[r, g]` is the contribution of group `groups[g]` booked on the
    segment that ends at checkpoint `r` (row 0 is all zeros). The groups of
    the generalized Itô–Wentzell formula are

    * `Q`: `Q·dt`
    * `D`: `Σ_k D_k·Δw_k`
    * `drift`: `Σ_i a_i·∂F/∂x_i·dt`
    * `ito`: `½ Σ b_{i,k} b_{j,k}·∂²F/∂x_i∂x_j·dt`
    * `cross`: `Σ b_{i,k}·∂D_k/∂x_i·dt`
    * `grad_noise`: `Σ b_{i,k}·∂F/∂x_i·Δw_k`
    * `jump_F`: `F(τ, x⁻ + g) − F(τ, x⁻)` at each event
    * `jump_G`: `G(τ, x⁻ + g; γ)` at each event
    """

    groups: tuple[str, ...]
    times: np.ndarray
    kinds: np.ndarray
    items: np.ndarray

    @cached_property
    def running(self) -> np.ndarray:
        return np.cumsum(self.items.sum(axis=1))

    @property
    def total(self) -> float:
        return float(self.running[-1])

    def group(self, name: str) -> np.ndarray:
        """Column of `name`; zeros if this ledger has no such group."""
        if name not in self.groups:
            return np.zeros(len(self.times))
        return self.items[:, self.groups.index(name)]

    def group_totals(self) -> dict[str, float]:
        return dict(zip(self.groups, map(float, self.items.sum(axis=0))))

    def consistent(self, rtol: float = 1e-13) -> bool:
        """Whether the running total matches the sum of all itemized entries."""
        itemized = float(np.sum(self.items))
        return abs(self.total - itemized) <= rtol * max(
            1.0, float(np.sum(np.abs(self.items)))
        )


def itemwise_difference(
    left: RhsLedger, right: RhsLedger, pairs: abc.Mapping[str, str] | None = None
) -> float:
    """
    Largest relative itemwise difference `|a − b| / max(1, |a|, |b|)`
    between two ledgers over the same checkpoints.

    Args:
        left: A ledger.
        right: Another ledger on the same layout.
        pairs: Map from groups of `left` to groups of `right`; by default,
            every group of either ledger is compared with its namesake. Groups
            of `left` not in `pairs` are compared against zero.
    """
    if len(left.times) != len(right.times) or np.any(left.times != right.times):
        raise NoiseMismatchError("ledgers do not share checkpoints")
    if pairs is None:
        pairs = {name: name for name in dict.fromkeys(left.groups + right.groups)}
    else:
        pairs = {name: pairs.get(name) for name in left.groups} | dict(pairs)
    worst = 0.0
    for mine, theirs in pairs.items():
        a = left.group(mine)
        b = right.group(theirs) if theirs else np.zeros_like(a)
        scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
        worst = max(worst, float(np.max(np.abs(a - b) / scale, initial=0.0)))
    return worst


def _check_noise(
    trajectory: StateTrajectory,
    field: FieldTrajectory | None,
    wiener: WienerPath,
    jumps: JumpStream,
):
    fingerprint = noise_fingerprint(wiener, jumps)
    if trajectory.layout.fingerprint != fingerprint or (
        field is not None and field.layout.fingerprint != fingerprint
    ):
        raise NoiseMismatchError(
            "state trajectory, field coefficients and noise must come from one "
            "noise realization"
        )


class _Segments(NamedTuple):
    """
    Integrand data of every segment, one row per checkpoint r >= 1. State and
    coefficients are those at the grid node that opens the segment's step.
    """

    x: np.ndarray
    c: np.ndarray
    dt: np.ndarray
    dw: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray
    q: np.ndarray
    d: np.ndarray


def _segments(
    coeffs: StateCoefficients,
    spec: FieldSpec,
    trajectory: StateTrajectory,
    field: FieldTrajectory,
) -> _Segments:
    layout = trajectory.layout
    horizon, steps = layout.grid.horizon, layout.grid.steps
    s = layout.steps[1:]
    opening = layout.opening_rows[1:]
    return _Segments(
        x=trajectory.values[opening],
        c=field.coeffs[opening],
        dt=layout.dt[1:],
        dw=layout.dw[1:],
        drift=coeffs.drift.on_grid(horizon, steps)[s],
        diffusion=coeffs.diffusion.on_grid(horizon, steps)[s],
        q=spec.q_on_grid(horizon, steps)[s],
        d=spec.d_on_grid(horizon, steps)[s],
    )


def _jump_rows(trajectory: StateTrajectory) -> tuple[np.ndarray, np.ndarray]:
    post = trajectory.layout.post_rows
    # a post_jump row always follows its pre_jump row
    return post - 1, post


def accumulate_rhs(
    cfg: ScenarioConfig,
    trajectory: StateTrajectory,
    field: FieldTrajectory,
    wiener: WienerPath,
    jumps: JumpStream,
) -> RhsLedger:
    """
    Left-point (Itô) accumulation of the generalized Itô–Wentzell formula.

    Every dt- and dw-integrand is evaluated with the pre-step state and field
    coefficients, those at the grid node that opens its step, including on
    the sub-segments of a step cut by jumps. Jump terms are booked on
    post_jump rows from the pre-jump state `x⁻` and pre-jump coefficients
    `c(τ⁻)`.

    Raises:
        NoiseMismatchError: If the inputs come from different noise.
    """
    _check_noise(trajectory, field, wiener, jumps)
    spec = cfg.field_spec
    seg = _segments(cfg.state_coeffs, spec, trajectory, field)
    phi = spec.basis_values(seg.x)
    dphi = spec.basis_values(seg.x, 1)
    d2phi = spec.basis_values(seg.x, 2)

    grad_f = np.einsum("rpi,rp->ri", dphi, seg.c)
    hess_f = np.einsum("rpij,rp->rij", d2phi, seg.c)
    d_field = np.einsum("rp,rpk->rk", phi, seg.d)
    d_grad = np.einsum("rpi,rpk->rki", dphi, seg.d)
    b = seg.diffusion

    items = np.zeros((len(trajectory.times), len(LEDGER_GROUPS)))
    continuous = items[1:]
    continuous[:, 0] = np.sum(phi * seg.q, axis=1) * seg.dt
    continuous[:, 1] = np.sum(d_field * seg.dw, axis=1)
    continuous[:, 2] = np.sum(seg.drift * grad_f, axis=1) * seg.dt
    continuous[:, 3] = 0.5 * np.einsum("rik,rjk,rij->r", b, b, hess_f) * seg.dt
    continuous[:, 4] = np.einsum("rik,rki->r", b, d_grad) * seg.dt
    continuous[:, 5] = np.einsum("rik,ri,rk->r", b, grad_f, seg.dw)

    pre, post = _jump_rows(trajectory)
    if len(post):
        events = trajectory.layout.events[post]
        x_minus, c_minus = trajectory.values[pre], field.coeffs[pre]
        shifted = spec.basis_values(x_minus + trajectory.jump_sizes[events])
        items[post, 6] = np.sum(shifted * c_minus, axis=1) - np.sum(
            spec.basis_values(x_minus) * c_minus, axis=1
        )
        items[post, 7] = np.sum(shifted * field.jump_sizes[events], axis=1)

    return RhsLedger(LEDGER_GROUPS, trajectory.times, trajectory.layout.kinds, items)


def lhs_path(
    field: FieldTrajectory, spec: FieldSpec, trajectory: StateTrajectory
) -> np.ndarray:
    """`F(t, x(t)) − F(0, x(0))` at every checkpoint."""
    values = eval_field(
        FieldState(trajectory.times, field.coeffs), spec, trajectory.values
    )
    return values - values[0]


def lhs_increment(
    field: FieldTrajectory,
    spec: FieldSpec,
    trajectory: StateTrajectory,
    t: float,
) -> float:
    """
    `F(t, x(t)) − F(0, x(0))` at the checkpoint time `t`; at a jump time the
    post-jump (right-continuous) value is used.

    Raises:
        ValueError: If `t` is not a checkpoint time.
    """
    rows = np.flatnonzero(trajectory.times == t)
    if not len(rows):
        raise ValueError(f"{t!r} is not a checkpoint time")
    row = rows[-1]
    return float(
        eval_field(field[row], spec, trajectory.values[row])
        - eval_field(field[0], spec, trajectory.values[0])
    )


class ResidualTrace(NamedTuple):
    """
    Pathwise residual `lhs − rhs` of the generalized Itô–Wentzell formula
    at every checkpoint, together with its itemized right side and the
    per-event check of the jump bookkeeping.
    """

    lhs: np.ndarray
    ledger: RhsLedger
    residual: np.ndarray
    jump_lhs: np.ndarray
    jump_rhs: np.ndarray

    @property
    def final(self) -> float:
        return float(self.residual[-1])

    @property
    def jump_deviation(self) -> np.ndarray:
        scale = np.maximum(
            1.0, np.maximum(np.abs(self.jump_lhs), np.abs(self.jump_rhs))
        )
        return np.abs(self.jump_lhs - self.jump_rhs) / scale

    @property
    def max_jump_deviation(self) -> float:
        return float(np.max(self.jump_deviation, initial=0.0))


def simulate(
    cfg: ScenarioConfig, path: NoisePath
) -> tuple[StateTrajectory, FieldTrajectory]:
    """Evolve state and field along `path` on one shared checkpoint layout."""
    layout = build_layout(*path)
    trajectory = evolve_state(
        cfg.state_coeffs, cfg.initial_state, *path, layout=layout
    )
    field = evolve_field(cfg.field_spec, *path, layout=layout)
    cfg.field_spec.check_state_box(trajectory.values)
    return trajectory, field


def residual(cfg: ScenarioConfig, path: NoisePath) -> ResidualTrace:
    """
    Simulate `path` and compare both sides of the generalized Itô–Wentzell
    formula at every checkpoint.

    Raises:
        ScheduleMismatchError: If a breakpoint is not a node of the path's grid.
        JumpBoundError: If a jump exceeds its declared bound.
        StateBoxError: If a polynomial basis leaves the state box.
    """
    trajectory, field = simulate(cfg, path)
    ledger = accumulate_rhs(cfg, trajectory, field, *path)
    lhs = lhs_path(field, cfg.field_spec, trajectory)

    pre, post = _jump_rows(trajectory)
    jump_lhs = lhs[post] - lhs[pre]
    jump_rhs = ledger.items[post, 6] + ledger.items[post, 7]
    logger.debug(
        "residual over %d checkpoints and %d jumps: %g",
        len(lhs),
        len(post),
        lhs[-1] - ledger.total,
    )
    return ResidualTrace(lhs, ledger, lhs - ledger.running, jump_lhs, jump_rhs)


class SmoothFunction(Protocol):
    """
    A function `F(t, x)` with closed-form derivatives, vectorized over a
    batch: `t` has shape `(R,)` and `x` has shape `(R, n)`.
    """

    def value(self, t: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    def time_derivative(self, t: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    def grad(self, t: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    def hess(self, t: np.ndarray, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class FrozenField:
    """The separable field with its coefficients held fixed at `coeffs`."""

    spec: FieldSpec
    coeffs: np.ndarray

    def value(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.einsum("rp,p->r", self.spec.basis_values(x), self.coeffs)

    def time_derivative(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.zeros(len(x))

    def grad(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.einsum("rpi,p->ri", self.spec.basis_values(x, 1), self.coeffs)

    def hess(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.einsum("rpij,p->rij", self.spec.basis_values(x, 2), self.coeffs)


def classical_ito_increment(
    func: SmoothFunction,
    coeffs: StateCoefficients,
    trajectory: StateTrajectory,
    wiener: WienerPath,
    jumps: JumpStream,
) -> RhsLedger:
    """
    Left-point accumulation of the generalized Itô formula for a
    deterministic smooth `F(t, x)` along `trajectory`: groups `time`,
    `drift`, `ito`, `grad_noise` and `jump_F` (`F(τ, x⁻ + g) − F(τ, x⁻)`).
    Continuous integrands are taken at the grid node that opens each step.

    Raises:
        NoiseMismatchError: If `trajectory` was not built from the noise.
    """
    _check_noise(trajectory, None, wiener, jumps)
    layout = trajectory.layout
    horizon, steps = layout.grid.horizon, layout.grid.steps
    s = layout.steps[1:]
    a = coeffs.drift.on_grid(horizon, steps)[s]
    b = coeffs.diffusion.on_grid(horizon, steps)[s]
    opening = layout.opening_rows[1:]
    t, x = layout.times[opening], trajectory.values[opening]
    dt, dw = layout.dt[1:], layout.dw[1:]
    grad_f = func.grad(t, x)

    items = np.zeros((len(layout.times), len(ITO_GROUPS)))
    items[1:, 0] = func.time_derivative(t, x) * dt
    items[1:, 1] = np.sum(a * grad_f, axis=1) * dt
    items[1:, 2] = 0.5 * np.einsum("rik,rjk,rij->r", b, b, func.hess(t, x)) * dt
    items[1:, 3] = np.einsum("rik,ri,rk->r", b, grad_f, dw)

    pre, post = _jump_rows(trajectory)
    if len(post):
        tau, x_minus = layout.times[post], trajectory.values[pre]
        g = trajectory.jump_sizes[layout.events[post]]
        items[post, 4] = func.value(tau, x_minus + g) - func.value(tau, x_minus)
    return RhsLedger(ITO_GROUPS, layout.times, layout.kinds, items)


def _pointwise_terms(
    cfg: ScenarioConfig, trajectory: StateTrajectory, field: FieldTrajectory
) -> abc.Iterator[dict[str, float]]:
    """The continuous groups segment by segment, one point at a time."""
    spec = cfg.field_spec
    seg = _segments(cfg.state_coeffs, spec, trajectory, field)
    for x, c, dt, dw, a, b, q, d in zip(*seg):
        phi = spec.basis_values(x)
        grad_f = spec.basis_values(x, 1).T @ c
        hess_f = np.tensordot(c, spec.basis_values(x, 2), axes=1)
        d_grad = d.T @ spec.basis_values(x, 1)
        yield {
            "Q": float(q @ phi) * dt,
            "D": float((d.T @ phi) @ dw),
            "drift": float(a @ grad_f) * dt,
            "ito": 0.5 * float(np.sum((b @ b.T) * hess_f)) * dt,
            "cross": float(np.sum(b * d_grad.T)) * dt,
            "grad_noise": float(grad_f @ b @ dw),
        }


def _pointwise_ledger(
    cfg: ScenarioConfig,
    trajectory: StateTrajectory,
    field: FieldTrajectory,
    groups: tuple[str, ...],
) -> RhsLedger:
    items = np.zeros((len(trajectory.times), len(groups)))
    for r, terms in enumerate(_pointwise_terms(cfg, trajectory, field), start=1):
        items[r] = [terms[name] for name in groups]
    return RhsLedger(groups, trajectory.times, trajectory.layout.kinds, items)


def classical_iw_ledger(
    cfg: ScenarioConfig,
    trajectory: StateTrajectory,
    field: FieldTrajectory,
    wiener: WienerPath,
    jumps: JumpStream,
) -> RhsLedger:
    """
    The Itô–Wentzell formula without jumps (groups `Q`, `D`, `drift`, `ito`,
    `cross`, `grad_noise`), accumulated one checkpoint at a time.

    Raises:
        ValueError: If the path has jump events.
        NoiseMismatchError: If the inputs come from different noise.
    """
    _check_noise(trajectory, field, wiener, jumps)
    if jumps.count:
        raise ValueError("the classical Itô–Wentzell formula has no jump terms")
    return _pointwise_ledger(cfg, trajectory, field, CLASSICAL_GROUPS)


def chain_rule_ledger(
    cfg: ScenarioConfig, trajectory: StateTrajectory, field: FieldTrajectory
) -> RhsLedger:
    """
    The deterministic chain rule `dF = Q dt + Σ a_j ∂F/∂x_j dt`.

    Raises:
        ValueError: If the scenario has diffusion, field noise or jumps.
    """
    if not (cfg.state_coeffs.diffusion.is_zero and _field_noise_free(cfg)):
        raise ValueError("the chain rule needs B = 0 and D = 0")
    if len(trajectory.layout.post_rows):
        raise ValueError("the chain rule has no jump terms")
    return _pointwise_ledger(cfg, trajectory, field, CHAIN_RULE_GROUPS)


def _field_noise_free(cfg: ScenarioConfig) -> bool:
    return all(element.d.is_zero for element in cfg.field_spec.basis)


def _field_frozen(cfg: ScenarioConfig) -> bool:
    return _field_noise_free(cfg) and all(
        element.q.is_zero and element.jump.is_zero
        for element in cfg.field_spec.basis
    )


class ReductionResult(NamedTuple):
    reduction: str
    max_difference: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_difference <= self.tolerance


def reduction_check(
    cfg: ScenarioConfig, path: NoisePath
) -> dict[str, ReductionResult]:
    """
    Compare the generalized ledger with each classical formula that applies
    to a jump-free scenario.

    * `classical-iw`: always; six groups agree itemwise and both jump groups
      are empty.
    * `chain-rule`: when also `B = D = 0`.
    * `generalized-ito`: when the field is frozen (`Q = D = G = 0`), against
      `classical_ito_increment` of the frozen `F`.

    Raises:
        ValueError: If the scenario can jump.
    """
    if path.jumps.count or not all(
        element.jump.is_zero for element in cfg.field_spec.basis
    ):
        raise ValueError("reductions need a jump-free scenario (Λ = 0, G = 0)")
    trajectory, field = simulate(cfg, path)
    general = accumulate_rhs(cfg, trajectory, field, *path)

    results = {
        "classical-iw": ReductionResult(
            "classical-iw",
            itemwise_difference(
                general, classical_iw_ledger(cfg, trajectory, field, *path)
            ),
            1e-14,
        )
    }
    if cfg.state_coeffs.diffusion.is_zero and _field_noise_free(cfg):
        results["chain-rule"] = ReductionResult(
            "chain-rule",
            itemwise_difference(general, chain_rule_ledger(cfg, trajectory, field)),
            1e-14,
        )
    if _field_frozen(cfg):
        ito = classical_ito_increment(
            FrozenField(cfg.field_spec, cfg.field_spec.c0),
            cfg.state_coeffs,
            trajectory,
            *path,
        )
        results["generalized-ito"] = ReductionResult(
            "generalized-ito",
            itemwise_difference(
                general,
                ito,
                {
                    "drift": "drift",
                    "ito": "ito",
                    "grad_noise": "grad_noise",
                    "jump_F": "jump_F",
                    "Q": "time",
                },
            ),
            1e-12,
        )
    for result in results.values():
        logger.debug("%s: max difference %g", result.reduction, result.max_difference)
    return results
