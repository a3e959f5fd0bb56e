import csv
from dataclasses import dataclass
import logging
from typing import Any, NamedTuple, TextIO

try:
    from typing import Self  # Python 3.11+
except ImportError:
    from typing import TypeAlias

    Self: TypeAlias = "StateCoefficients"

import numpy as np

from iwverify.noise import (
    CheckpointKind,
    CheckpointLayout,
    JumpStream,
    NoiseMismatchError,
    WienerPath,
    build_layout,
    noise_fingerprint,
)
from iwverify.schedules import (
    AffineMarkMap,
    Schedule,
    Violation,
    read_keys,
)


logger = logging.getLogger("iwverify.state")


@dataclass(frozen=True, eq=False)
class StateCoefficients:
    """
    Coefficients of `dx = A(t)dt + B(t)dw + ∫ g(t;γ) ν(dt;dγ)`.

    `drift` has piece shape `(n,)`, `diffusion` has piece shape `(n, m)` and
    `jump` maps marks to jumps of shape `(n,)`.
    """

    drift: Schedule
    diffusion: Schedule
    jump: AffineMarkMap

    @classmethod
    def from_config(cls, raw: Any, where: str = "state") -> Self:
        raw = read_keys(raw, where, ("drift", "diffusion", "jump"))
        return cls(
            Schedule.from_config(raw["drift"], f"{where}.drift"),
            Schedule.from_config(raw["diffusion"], f"{where}.diffusion"),
            AffineMarkMap.from_config(raw["jump"], f"{where}.jump", "matrix"),
        )

    def to_config(self) -> dict:
        return {
            "drift": self.drift.to_config(),
            "diffusion": self.diffusion.to_config(),
            "jump": self.jump.to_config("matrix"),
        }

    def problems(
        self,
        state_dim: int,
        wiener_dim: int,
        mark_dim: int,
        horizon: float,
        base_steps: int,
        where: str = "state",
    ) -> list[Violation]:
        found = self.drift.problems(
            (state_dim,), horizon, base_steps, f"{where}.drift"
        )
        found += self.diffusion.problems(
            (state_dim, wiener_dim), horizon, base_steps, f"{where}.diffusion"
        )
        found += self.jump.problems(
            (state_dim,), mark_dim, horizon, base_steps, f"{where}.jump", "matrix"
        )
        return found


class Checkpoint(NamedTuple):
    time: float
    x: np.ndarray
    kind: CheckpointKind


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    """
    Values of x at every checkpoint of `layout`, right-continuous with left
    limits: a jump's pre_jump row holds `x(τ⁻)` and its post_jump row `x(τ)`.
    """

    layout: CheckpointLayout
    values: np.ndarray
    jump_sizes: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.layout.times

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    @property
    def checkpoints(self) -> list[Checkpoint]:
        return [
            Checkpoint(float(t), x, CheckpointKind(kind))
            for t, x, kind in zip(self.layout.times, self.values, self.layout.kinds)
        ]

    def grid_values(self) -> np.ndarray:
        return self.values[self.layout.grid_rows]

    def dump_csv(self, fh: TextIO) -> None:
        """Write one row per checkpoint: `time, kind, x_1, ..., x_n`."""
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["time", "kind"] + [f"x_{i + 1}" for i in range(self.values.shape[1])]
        )
        for t, x, kind in zip(self.layout.times, self.values, self.layout.kinds):
            writer.writerow(
                [repr(float(t)), CheckpointKind(kind).name.lower()]
                + [repr(float(v)) for v in x]
            )


def check_layout(layout: CheckpointLayout, wiener: WienerPath, jumps: JumpStream):
    if layout.fingerprint != noise_fingerprint(wiener, jumps):
        raise NoiseMismatchError(
            "checkpoint layout was built from a different noise realization"
        )


def evolve_state(
    coeffs: StateCoefficients,
    x0: np.ndarray,
    wiener: WienerPath,
    jumps: JumpStream,
    layout: CheckpointLayout | None = None,
) -> StateTrajectory:
    """
    Evolve x exactly along one noise realization.

    Drift is integrated up to each event time, the event's jump is applied
    between its pre/post checkpoints, and a step's whole Wiener increment is
    booked on the grid checkpoint that closes the step.

    Args:
        coeffs: State coefficients; breakpoints must be nodes of `wiener.grid`.
        x0: Initial state, shape `(n,)`.
        wiener: Wiener path.
        jumps: Events of the Poisson measure on the same horizon.
        layout: Checkpoint layout of `(wiener, jumps)`; built when omitted.

    Raises:
        ScheduleMismatchError: If a breakpoint is not a node of the grid.
        JumpBoundError: If some `|g(τ;γ)|` exceeds the declared bound.
        NoiseMismatchError: If `layout` belongs to other noise.
    """
    if layout is None:
        layout = build_layout(wiener, jumps)
    else:
        check_layout(layout, wiener, jumps)
    grid = wiener.grid
    drift = coeffs.drift.on_grid(grid.horizon, grid.steps)
    diffusion = coeffs.diffusion.on_grid(grid.horizon, grid.steps)

    steps = layout.steps[1:]
    increments = np.empty((len(layout.times), len(x0)))
    increments[0] = x0
    increments[1:] = drift[steps] * layout.dt[1:, np.newaxis]
    increments[1:] += np.einsum("rij,rj->ri", diffusion[steps], layout.dw[1:])

    jump_sizes = coeffs.jump.evaluate(
        grid.horizon, grid.steps, layout.event_steps, jumps.marks
    )
    coeffs.jump.check_bound(jump_sizes, "state.jump")
    post = layout.post_rows
    # post rows carry no dt or dw, so x_post = x_pre + g exactly
    increments[post] = jump_sizes[layout.events[post]]

    values = np.cumsum(increments, axis=0)
    logger.debug(
        "evolved state over %d steps and %d jumps", grid.steps, jumps.count
    )
    return StateTrajectory(layout, values, jump_sizes)
