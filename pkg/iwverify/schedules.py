from collections import abc
from dataclasses import dataclass
import logging
from typing import Any, NamedTuple

try:
    from typing import Self  # Python 3.11+
except ImportError:
    from typing import TypeAlias

    Self: TypeAlias = "Schedule"

import numpy as np


logger = logging.getLogger("iwverify.schedules")

# tolerance (in units of the coarsest step) for a breakpoint to count as a node
ALIGN_TOL = 1e-9


class ConfigError(Exception):
    """A config document is structurally malformed (keys, types, shapes)."""


class ScheduleMismatchError(Exception):
    """A schedule's breakpoints do not fall on the nodes of the grid in use."""


class JumpBoundError(Exception):
    """A jump map exceeded its declared bound at a sampled mark."""


class Violation(NamedTuple):
    """
    One semantic problem found while validating a scenario.

    * `kind` is one of `InvalidDimension`, `InvalidSchedule`,
      `InvalidIntensity` or `InvalidFieldSpec`.
    * `where` is the dotted config path of the offending entry.
    * `message` says what is wrong with it.
    """

    kind: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind}({self.where}): {self.message}"


def read_keys(
    raw: Any,
    where: str,
    required: abc.Iterable[str],
    optional: abc.Iterable[str] = (),
) -> abc.Mapping:
    """Check that `raw` is a mapping with exactly the allowed keys."""
    if not isinstance(raw, abc.Mapping):
        raise ConfigError(f"{where}: expected a mapping; got {raw!r}")
    required = tuple(required)
    unknown = set(raw) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(map(str, unknown))}")
    missing = [key for key in required if key not in raw]
    if missing:
        raise ConfigError(f"{where}: missing key(s) {missing}")
    return raw


def as_array(raw: Any, where: str) -> np.ndarray:
    if isinstance(raw, (bool, str)) or raw is None:
        raise ConfigError(f"{where}: expected numbers; got {raw!r}")
    try:
        return np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected numbers; got {raw!r}") from None


def as_number(raw: Any, where: str, kind: type = float) -> float | int:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"{where}: expected {kind.__name__}; got {raw!r}")
    if kind is int and not float(raw).is_integer():
        raise ConfigError(f"{where}: expected int; got {raw!r}")
    return kind(raw)


def grid_misalignment(times: abc.Iterable[float], horizon: float, steps: int) -> list:
    """Return the entries of `times` that are not nodes of the uniform grid."""
    dt = horizon / steps
    return [t for t in times if abs(t / dt - round(t / dt)) > ALIGN_TOL]


@dataclass(frozen=True, eq=False)
class Schedule:
    """
    A piecewise-constant function of time on [0, T].

    Piece `i` covers `[breakpoints[i-1], breakpoints[i])`, so `values` holds
    one more entry than `breakpoints`. Each entry has the same shape (a
    scalar, a vector or a matrix).
    """

    breakpoints: tuple[float, ...]
    values: np.ndarray

    def __post_init__(self):
        if not isinstance(self.values, np.ndarray) or self.values.ndim < 1:
            raise TypeError(
                f"values must be an array with a leading piece axis; "
                f"got {self.values!r}"
            )

    @classmethod
    def constant(cls, value: Any) -> Self:
        return cls((), np.asarray(value, dtype=float)[np.newaxis])

    @classmethod
    def from_config(cls, raw: Any, where: str) -> Self:
        """
        Read a schedule from its config form.

        Args:
            raw: Either a bare value (a single piece on [0, T]) or a mapping
                with `breakpoints` and `values` keys.
            where: Config path used in error messages.

        Raises:
            ConfigError: If `raw` is not a valid schedule document.
        """
        if isinstance(raw, abc.Mapping):
            raw = read_keys(raw, where, ("breakpoints", "values"))
            breakpoints = as_array(raw["breakpoints"], f"{where}.breakpoints")
            if breakpoints.ndim != 1:
                raise ConfigError(f"{where}.breakpoints: expected a flat list")
            values = as_array(raw["values"], f"{where}.values")
            if values.ndim < 1:
                raise ConfigError(f"{where}.values: expected a list of pieces")
            return cls(tuple(breakpoints.tolist()), values)
        return cls((), as_array(raw, where)[np.newaxis])

    def to_config(self) -> Any:
        if not self.breakpoints:
            return self.values[0].tolist()
        return {"breakpoints": list(self.breakpoints), "values": self.values.tolist()}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def problems(
        self, shape: tuple[int, ...], horizon: float, base_steps: int, where: str
    ) -> list[Violation]:
        found = []
        if self.shape != tuple(shape):
            found.append(
                Violation(
                    "InvalidDimension",
                    where,
                    f"values must have shape {tuple(shape)}; got {self.shape}",
                )
            )
        if len(self.values) != len(self.breakpoints) + 1:
            found.append(
                Violation(
                    "InvalidSchedule",
                    where,
                    f"{len(self.breakpoints)} breakpoint(s) need "
                    f"{len(self.breakpoints) + 1} value(s); got {len(self.values)}",
                )
            )
        if not np.all(np.isfinite(self.values)):
            found.append(Violation("InvalidSchedule", where, "non-finite value"))
        bps = np.asarray(self.breakpoints, dtype=float)
        if np.any(np.diff(bps) <= 0):
            found.append(
                Violation("InvalidSchedule", where, "breakpoints must increase")
            )
        if horizon > 0 and base_steps >= 1:
            if np.any((bps <= 0) | (bps >= horizon)):
                found.append(
                    Violation(
                        "InvalidSchedule",
                        where,
                        f"breakpoints must lie strictly inside (0, {horizon})",
                    )
                )
            if bad := grid_misalignment(self.breakpoints, horizon, base_steps):
                found.append(
                    Violation(
                        "InvalidSchedule",
                        where,
                        f"breakpoint misalignment: {bad} are not nodes of the "
                        f"{base_steps}-step grid",
                    )
                )
        return found

    def on_grid(self, horizon: float, steps: int) -> np.ndarray:
        """
        Values of the schedule on each step of a uniform grid.

        Returns:
            np.ndarray: Array of shape `(steps, *shape)`; row `i` is the value
                on `[t_i, t_{i+1})`.

        Raises:
            ScheduleMismatchError: If a breakpoint is not a grid node.
        """
        if bad := grid_misalignment(self.breakpoints, horizon, steps):
            raise ScheduleMismatchError(
                f"breakpoints {bad} are not nodes of the {steps}-step grid on "
                f"[0, {horizon}]"
            )
        # midpoints keep floating nodes off the breakpoints
        mids = (np.arange(steps) + 0.5) * (horizon / steps)
        return self.values[np.searchsorted(self.breakpoints, mids, side="right")]

    def at(self, t: float, *, left_continuous: bool = False) -> np.ndarray:
        """Value at time `t`; right-continuous unless `left_continuous`."""
        side = "left" if left_continuous else "right"
        return self.values[np.searchsorted(self.breakpoints, t, side=side)]


@dataclass(frozen=True, eq=False)
class AffineMarkMap:
    """
    A jump map `m(t; γ) = linear(t)·γ + offset(t)` that does not depend on
    the state, together with a declared bound on its norm.

    `linear` has piece shape `(*out, n')` and `offset` has piece shape `out`.
    """

    linear: Schedule
    offset: Schedule
    bound: float

    @classmethod
    def zero(cls, out: tuple[int, ...], mark_dim: int, bound: float = 0.0) -> Self:
        return cls(
            Schedule.constant(np.zeros((*out, mark_dim))),
            Schedule.constant(np.zeros(out)),
            bound,
        )

    @classmethod
    def from_config(cls, raw: Any, where: str, linear_key: str) -> Self:
        raw = read_keys(raw, where, (linear_key, "offset", "bound"))
        return cls(
            Schedule.from_config(raw[linear_key], f"{where}.{linear_key}"),
            Schedule.from_config(raw["offset"], f"{where}.offset"),
            as_number(raw["bound"], f"{where}.bound"),
        )

    def to_config(self, linear_key: str) -> dict:
        return {
            linear_key: self.linear.to_config(),
            "offset": self.offset.to_config(),
            "bound": self.bound,
        }

    @property
    def is_zero(self) -> bool:
        return self.linear.is_zero and self.offset.is_zero

    def problems(
        self,
        out: tuple[int, ...],
        mark_dim: int,
        horizon: float,
        base_steps: int,
        where: str,
        linear_key: str,
        bound_kind: str = "InvalidSchedule",
    ) -> list[Violation]:
        found = self.linear.problems(
            (*out, mark_dim), horizon, base_steps, f"{where}.{linear_key}"
        )
        found += self.offset.problems(out, horizon, base_steps, f"{where}.offset")
        if not np.isfinite(self.bound) or self.bound < 0:
            found.append(
                Violation(
                    bound_kind,
                    f"{where}.bound",
                    f"declared bound must be finite and non-negative; "
                    f"got {self.bound!r}",
                )
            )
        return found

    def evaluate(
        self,
        horizon: float,
        steps: int,
        event_steps: np.ndarray,
        marks: np.ndarray,
    ) -> np.ndarray:
        """
        Evaluate the map at a batch of events.

        Args:
            horizon: End time of the grid.
            steps: Number of steps of the grid.
            event_steps: Index of the step containing each event.
            marks: Marks of the events, shape `(J, n')`.

        Returns:
            np.ndarray: Shape `(J, *out)`.
        """
        linear = self.linear.on_grid(horizon, steps)[event_steps]
        offset = self.offset.on_grid(horizon, steps)[event_steps]
        return np.einsum("j...b,jb->j...", linear, marks) + offset

    def check_bound(self, values: np.ndarray, where: str) -> None:
        if not len(values):
            return
        norms = np.linalg.norm(values.reshape(len(values), -1), axis=1)
        worst = float(norms.max())
        logger.debug("%s: largest jump norm %g, bound %g", where, worst, self.bound)
        if worst > self.bound * (1 + 1e-12):
            raise JumpBoundError(
                f"{where}: jump of norm {worst!r} exceeds the declared bound "
                f"{self.bound!r}"
            )
