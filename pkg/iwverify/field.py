from collections import abc
from dataclasses import dataclass
import logging
from typing import Any, ClassVar, NamedTuple

try:
    from typing import Self  # Python 3.11+
except ImportError:
    from typing import TypeAlias

    Self: TypeAlias = "FieldSpec"

import numpy as np

from iwverify.noise import CheckpointLayout, JumpStream, WienerPath, build_layout
from iwverify.schedules import (
    AffineMarkMap,
    ConfigError,
    Schedule,
    Violation,
    as_array,
    as_number,
    read_keys,
)
from iwverify.state import check_layout


logger = logging.getLogger("iwverify.field")


class StateBoxError(Exception):
    """An unbounded basis was evaluated outside the configured state box."""


@dataclass(frozen=True, eq=False)
class Polynomial:
    """The monomial `Π_i x_i^{α_i}`."""

    family: ClassVar[str] = "polynomial"
    keys: ClassVar[tuple[str, ...]] = ("powers",)

    powers: np.ndarray

    @property
    def bounded(self) -> bool:
        return not np.any(self.powers)

    def problems(self, state_dim: int) -> list[str]:
        if self.powers.shape != (state_dim,):
            return [f"powers must have length {state_dim}"]
        if np.any(self.powers < 0) or np.any(self.powers != np.round(self.powers)):
            return [
                f"powers must be non-negative integers; got {self.powers.tolist()}"
            ]
        return []

    def to_config(self) -> dict:
        return {"powers": [int(p) for p in self.powers]}

    def _derivative(self, x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
        powers = self.powers.astype(float)
        coef = 1.0
        for axis in axes:
            coef *= powers[axis]
            powers[axis] = max(powers[axis] - 1, 0.0)
        return coef * np.prod(x**powers, axis=-1)

    def value(self, x: np.ndarray) -> np.ndarray:
        return self._derivative(x, ())

    def grad(self, x: np.ndarray) -> np.ndarray:
        return np.stack(
            [self._derivative(x, (i,)) for i in range(x.shape[-1])], axis=-1
        )

    def hess(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[-1]
        out = np.empty((*x.shape[:-1], n, n))
        for i in range(n):
            for j in range(i, n):
                out[..., i, j] = out[..., j, i] = self._derivative(x, (i, j))
        return out


@dataclass(frozen=True, eq=False)
class GaussianBump:
    """`exp(−|x − center|² / (2 width²))`."""

    family: ClassVar[str] = "gaussian-bump"
    keys: ClassVar[tuple[str, ...]] = ("center", "width")

    center: np.ndarray
    width: float

    bounded: ClassVar[bool] = True

    def problems(self, state_dim: int) -> list[str]:
        found = []
        if self.center.shape != (state_dim,):
            found.append(f"center must have length {state_dim}")
        if not (np.isfinite(self.width) and self.width > 0):
            found.append(f"width must be positive; got {self.width!r}")
        return found

    def to_config(self) -> dict:
        return {"center": self.center.tolist(), "width": self.width}

    def value(self, x: np.ndarray) -> np.ndarray:
        u = x - self.center
        return np.exp(-np.sum(u * u, axis=-1) / (2 * self.width**2))

    def grad(self, x: np.ndarray) -> np.ndarray:
        u = x - self.center
        return -u / self.width**2 * np.expand_dims(self.value(x), -1)

    def hess(self, x: np.ndarray) -> np.ndarray:
        u = x - self.center
        w2 = self.width**2
        outer = u[..., :, np.newaxis] * u[..., np.newaxis, :] / w2**2
        scale = np.expand_dims(self.value(x), (-2, -1))
        return (outer - np.eye(x.shape[-1]) / w2) * scale


@dataclass(frozen=True, eq=False)
class Sinusoid:
    """`sin(frequency · x + phase)`."""

    family: ClassVar[str] = "sinusoid"
    keys: ClassVar[tuple[str, ...]] = ("frequency", "phase")

    frequency: np.ndarray
    phase: float

    bounded: ClassVar[bool] = True

    def problems(self, state_dim: int) -> list[str]:
        found = []
        if self.frequency.shape != (state_dim,):
            found.append(f"frequency must have length {state_dim}")
        elif not np.all(np.isfinite(self.frequency)):
            found.append("frequency must be finite")
        if not np.isfinite(self.phase):
            found.append(f"phase must be finite; got {self.phase!r}")
        return found

    def to_config(self) -> dict:
        return {"frequency": self.frequency.tolist(), "phase": self.phase}

    def _argument(self, x: np.ndarray) -> np.ndarray:
        return np.sum(x * self.frequency, axis=-1) + self.phase

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.sin(self._argument(x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.frequency * np.expand_dims(np.cos(self._argument(x)), -1)

    def hess(self, x: np.ndarray) -> np.ndarray:
        k = self.frequency
        scale = np.expand_dims(np.sin(self._argument(x)), (-2, -1))
        return -np.outer(k, k) * scale


BasisFunction = Polynomial | GaussianBump | Sinusoid
basis_families = {cls.family: cls for cls in (Polynomial, GaussianBump, Sinusoid)}


def basis_from_config(raw: abc.Mapping, where: str) -> BasisFunction:
    match raw["family"]:
        case "polynomial":
            return Polynomial(as_array(raw["powers"], f"{where}.powers"))
        case "gaussian-bump":
            return GaussianBump(
                as_array(raw["center"], f"{where}.center"),
                as_number(raw["width"], f"{where}.width"),
            )
        case "sinusoid":
            return Sinusoid(
                as_array(raw["frequency"], f"{where}.frequency"),
                as_number(raw["phase"], f"{where}.phase"),
            )


@dataclass(frozen=True, eq=False)
class BasisElement:
    """
    One term `c_p(t)·φ_p(x)` of the field together with the drivers of its
    coefficient: `dc_p = q_p dt + Σ_k d_{p,k} dw_k + ∫ G_p(t;γ) ν(dt;dγ)`.
    """

    function: BasisFunction
    c0: float
    q: Schedule
    d: Schedule
    jump: AffineMarkMap

    @classmethod
    def from_config(cls, raw: Any, where: str) -> Self:
        if not isinstance(raw, abc.Mapping):
            raise ConfigError(f"{where}: expected a mapping; got {raw!r}")
        if (family := raw.get("family")) not in basis_families:
            raise ConfigError(
                f"{where}.family: unknown basis family {family!r}; "
                f"expected one of {list(basis_families)}"
            )
        keys = basis_families[family].keys
        raw = read_keys(raw, where, ("family", *keys, "c0", "q", "d", "jump"))
        return cls(
            basis_from_config(raw, where),
            as_number(raw["c0"], f"{where}.c0"),
            Schedule.from_config(raw["q"], f"{where}.q"),
            Schedule.from_config(raw["d"], f"{where}.d"),
            AffineMarkMap.from_config(raw["jump"], f"{where}.jump", "weights"),
        )

    def to_config(self) -> dict:
        return {
            "family": self.function.family,
            **self.function.to_config(),
            "c0": self.c0,
            "q": self.q.to_config(),
            "d": self.d.to_config(),
            "jump": self.jump.to_config("weights"),
        }


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """
    A separable random field `F(t,x) = Σ_p c_p(t)·φ_p(x)`.

    Its coefficients of `dF = Q dt + Σ_k D_k dw_k + ∫ G ν` are
    `Q = Σ q_p φ_p`, `D_k = Σ d_{p,k} φ_p` and `G = Σ G_p φ_p`.
    Unbounded (polynomial) bases may only be evaluated inside the box
    `[−state_box, state_box]ⁿ`.
    """

    state_box: float
    basis: tuple[BasisElement, ...]

    @classmethod
    def from_config(cls, raw: Any, where: str = "field") -> Self:
        raw = read_keys(raw, where, ("state_box", "basis"))
        if not isinstance(raw["basis"], abc.Sequence) or isinstance(
            raw["basis"], str
        ):
            raise ConfigError(f"{where}.basis: expected a list of basis elements")
        return cls(
            as_number(raw["state_box"], f"{where}.state_box"),
            tuple(
                BasisElement.from_config(element, f"{where}.basis[{p}]")
                for p, element in enumerate(raw["basis"])
            ),
        )

    def to_config(self) -> dict:
        return {
            "state_box": self.state_box,
            "basis": [element.to_config() for element in self.basis],
        }

    @property
    def size(self) -> int:
        return len(self.basis)

    @property
    def bounded(self) -> bool:
        return all(element.function.bounded for element in self.basis)

    @property
    def c0(self) -> np.ndarray:
        return np.array([element.c0 for element in self.basis])

    def problems(
        self,
        state_dim: int,
        wiener_dim: int,
        mark_dim: int,
        horizon: float,
        base_steps: int,
        where: str = "field",
    ) -> list[Violation]:
        found = []
        if not (np.isfinite(self.state_box) and self.state_box > 0):
            found.append(
                Violation(
                    "InvalidFieldSpec",
                    f"{where}.state_box",
                    f"state box must be positive; got {self.state_box!r}",
                )
            )
        if not self.basis:
            found.append(
                Violation("InvalidFieldSpec", f"{where}.basis", "basis is empty")
            )
        for p, element in enumerate(self.basis):
            at = f"{where}.basis[{p}]"
            found += [
                Violation("InvalidFieldSpec", at, message)
                for message in element.function.problems(state_dim)
            ]
            if not np.isfinite(element.c0):
                found.append(
                    Violation("InvalidFieldSpec", f"{at}.c0", "c0 must be finite")
                )
            found += element.q.problems((), horizon, base_steps, f"{at}.q")
            found += element.d.problems((wiener_dim,), horizon, base_steps, f"{at}.d")
            found += element.jump.problems(
                (),
                mark_dim,
                horizon,
                base_steps,
                f"{at}.jump",
                "weights",
                bound_kind="InvalidFieldSpec",
            )
        return found

    def basis_values(self, x: np.ndarray, order: int = 0) -> np.ndarray:
        """
        Evaluate every basis function, or its gradient or Hessian, at `x`.

        Args:
            x: Points of shape `(..., n)`.
            order: 0 for values, 1 for gradients, 2 for Hessians.

        Returns:
            np.ndarray: Shape `(..., P)`, `(..., P, n)` or `(..., P, n, n)`.
        """
        x = np.asarray(x, dtype=float)
        method = ("value", "grad", "hess")[order]
        return np.stack(
            [getattr(element.function, method)(x) for element in self.basis],
            axis=x.ndim - 1,
        )

    def check_state_box(self, x: np.ndarray) -> None:
        if self.bounded:
            return
        if (worst := float(np.max(np.abs(x), initial=0.0))) > self.state_box:
            raise StateBoxError(
                f"state reached |x_i| = {worst!r} outside the box "
                f"[-{self.state_box}, {self.state_box}] of a polynomial basis"
            )

    def q_on_grid(self, horizon: float, steps: int) -> np.ndarray:
        return np.stack(
            [element.q.on_grid(horizon, steps) for element in self.basis], axis=1
        )

    def d_on_grid(self, horizon: float, steps: int) -> np.ndarray:
        return np.stack(
            [element.d.on_grid(horizon, steps) for element in self.basis], axis=1
        )

    def jumps_at(
        self, horizon: float, steps: int, event_steps: np.ndarray, marks: np.ndarray
    ) -> np.ndarray:
        """`G_p(τ_j; γ_j)` for every event, shape `(J, P)`."""
        columns = []
        for p, element in enumerate(self.basis):
            values = element.jump.evaluate(horizon, steps, event_steps, marks)
            element.jump.check_bound(values, f"field.basis[{p}].jump")
            columns.append(values)
        return np.stack(columns, axis=1).reshape(len(marks), self.size)

    def q_at(self, t: float) -> np.ndarray:
        return np.array([element.q.at(t) for element in self.basis])

    def d_at(self, t: float) -> np.ndarray:
        return np.stack([element.d.at(t) for element in self.basis])

    def jump_at(self, t: float, gamma: np.ndarray) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        return np.array(
            [
                element.jump.linear.at(t, left_continuous=True) @ gamma
                + element.jump.offset.at(t, left_continuous=True)
                for element in self.basis
            ]
        )


class FieldState(NamedTuple):
    time: float
    coeffs: np.ndarray


@dataclass(frozen=True, eq=False)
class FieldTrajectory(abc.Sequence):
    """Field coefficients `c(t)` at every checkpoint of `layout`."""

    layout: CheckpointLayout
    coeffs: np.ndarray
    jump_sizes: np.ndarray

    def __len__(self) -> int:
        return len(self.coeffs)

    def __getitem__(self, row):
        if isinstance(row, slice):
            return [self[r] for r in range(*row.indices(len(self)))]
        return FieldState(float(self.layout.times[row]), self.coeffs[row])

    @property
    def final(self) -> FieldState:
        return self[-1]


def evolve_field(
    spec: FieldSpec,
    wiener: WienerPath,
    jumps: JumpStream,
    layout: CheckpointLayout | None = None,
) -> FieldTrajectory:
    """
    Accumulate the field coefficients exactly along one noise realization,
    on the same checkpoints as `evolve_state`.

    Raises:
        ScheduleMismatchError: If a breakpoint is not a node of the grid.
        JumpBoundError: If some `|G_p(τ;γ)|` exceeds its declared bound.
        NoiseMismatchError: If `layout` belongs to other noise.
    """
    if layout is None:
        layout = build_layout(wiener, jumps)
    else:
        check_layout(layout, wiener, jumps)
    grid = wiener.grid
    q = spec.q_on_grid(grid.horizon, grid.steps)
    d = spec.d_on_grid(grid.horizon, grid.steps)

    steps = layout.steps[1:]
    increments = np.empty((len(layout.times), spec.size))
    increments[0] = spec.c0
    increments[1:] = q[steps] * layout.dt[1:, np.newaxis]
    increments[1:] += np.einsum("rpk,rk->rp", d[steps], layout.dw[1:])

    jump_sizes = spec.jumps_at(
        grid.horizon, grid.steps, layout.event_steps, jumps.marks
    )
    post = layout.post_rows
    increments[post] = jump_sizes[layout.events[post]]
    logger.debug("evolved %d field coefficients over %d jumps", spec.size, jumps.count)
    return FieldTrajectory(layout, np.cumsum(increments, axis=0), jump_sizes)


def eval_field(state: FieldState, spec: FieldSpec, x: np.ndarray) -> np.ndarray:
    """`F(t,x) = Σ_p c_p(t)·φ_p(x)`; broadcasts over leading axes of `x`."""
    return np.einsum("...p,...p->...", spec.basis_values(x), state.coeffs)


def eval_grad(state: FieldState, spec: FieldSpec, x: np.ndarray) -> np.ndarray:
    return np.einsum("...pi,...p->...i", spec.basis_values(x, 1), state.coeffs)


def eval_hess(state: FieldState, spec: FieldSpec, x: np.ndarray) -> np.ndarray:
    return np.einsum("...pij,...p->...ij", spec.basis_values(x, 2), state.coeffs)


def eval_Q(t: float, spec: FieldSpec, x: np.ndarray) -> np.ndarray:
    return np.einsum("...p,p->...", spec.basis_values(x), spec.q_at(t))


def eval_D(t: float, spec: FieldSpec, x: np.ndarray) -> np.ndarray:
    """`D_k(t,x)` for k = 1..m, shape `(..., m)`."""
    return np.einsum("...p,pk->...k", spec.basis_values(x), spec.d_at(t))


def eval_D_grad(t: float, spec: FieldSpec, x: np.ndarray) -> np.ndarray:
    """`∂D_k/∂x_i (t,x)`, shape `(..., m, n)`."""
    return np.einsum("...pi,pk->...ki", spec.basis_values(x, 1), spec.d_at(t))


def eval_G(t: float, spec: FieldSpec, x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """
    `G(t,x;γ) = Σ_p G_p(t;γ)·φ_p(x)`. The schedules of `G_p` are read
    left-continuously, so a jump at a breakpoint uses the piece it closes.
    """
    return np.einsum("...p,p->...", spec.basis_values(x), spec.jump_at(t, gamma))
