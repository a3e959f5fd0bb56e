from collections import abc
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
import hashlib
import inspect
import logging
from typing import Any, NamedTuple, TextIO

try:
    from typing import Self  # Python 3.11+
except ImportError:
    from typing import TypeAlias

    Self: TypeAlias = "MarkDistribution"

import numpy as np

from iwverify.schedules import (
    ConfigError,
    Violation,
    as_array,
    as_number,
    read_keys,
)


logger = logging.getLogger("iwverify.noise")


class FactorMismatchError(Exception):
    pass


class NoiseMismatchError(Exception):
    """Inputs that must share one noise realization come from different ones."""


def make_rng(seed: int | list[int]) -> np.random.Generator:
    """A generator on numpy's counter-based Philox bit generator."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """A uniform grid `0 = t_0 < t_1 < ... < t_M = T`."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive; got {self.horizon!r}")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ValueError(f"steps must be a positive integer; got {self.steps!r}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @cached_property
    def nodes(self) -> np.ndarray:
        # linspace pins the last node to T exactly
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.steps % factor:
            raise FactorMismatchError(
                f"factor {factor!r} does not divide {self.steps} steps"
            )
        return TimeGrid(self.horizon, self.steps // factor)


@dataclass(frozen=True, eq=False)
class WienerPath:
    """
    One realization of an m-dimensional Wiener process on a grid.

    The path is stored by its values at the grid nodes (`values[0] == 0`);
    `increments[i, k]` is the increment of component `k` over step `i`.
    Keeping node values makes coarsening an exact subsampling.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.values) != self.grid.steps + 1:
            raise ValueError(
                f"values must have shape ({self.grid.steps + 1}, m); "
                f"got {self.values.shape}"
            )

    @classmethod
    def from_increments(cls, grid: TimeGrid, increments: np.ndarray) -> Self:
        increments = np.asarray(increments, dtype=float)
        values = np.zeros((len(increments) + 1, increments.shape[1]))
        np.cumsum(increments, axis=0, out=values[1:])
        return cls(grid, values)

    @property
    def wiener_dim(self) -> int:
        return self.values.shape[1]

    @cached_property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True, eq=False)
class JumpStream:
    """Events `(τ_j, γ_j)` of the Poisson measure on (0, T], in time order."""

    horizon: float
    times: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        if self.times.ndim != 1 or self.marks.ndim != 2:
            raise ValueError("times must be 1-D and marks 2-D")
        if len(self.times) != len(self.marks):
            raise ValueError(
                f"{len(self.times)} times but {len(self.marks)} marks given"
            )
        if len(self.times) and (
            self.times[0] <= 0 or self.times[-1] > self.horizon
        ):
            raise ValueError(f"jump times must lie in (0, {self.horizon}]")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("jump times must be strictly increasing")

    @classmethod
    def empty(cls, horizon: float, mark_dim: int) -> Self:
        return cls(horizon, np.zeros(0), np.zeros((0, mark_dim)))

    @property
    def count(self) -> int:
        return len(self.times)

    @property
    def mark_dim(self) -> int:
        return self.marks.shape[1]

    def restrict(self, start: float, stop: float) -> Self:
        """Events in (start, stop], with times shifted to start at 0."""
        keep = (self.times > start) & (self.times <= stop)
        return JumpStream(stop - start, self.times[keep] - start, self.marks[keep])


class NoisePath(NamedTuple):
    """One realization of the driving noise: a Wiener path and a jump stream."""

    wiener: WienerPath
    jumps: JumpStream

    def coarsen(self, factor: int) -> "NoisePath":
        if factor == 1:
            return self
        return NoisePath(coarsen_wiener(self.wiener, factor), self.jumps)


def _marks_uniform_box(
    rng: np.random.Generator, size: int, low: np.ndarray, high: np.ndarray
) -> np.ndarray:
    return rng.uniform(low, high, size=(size, len(low)))


def _marks_isotropic_gaussian(
    rng: np.random.Generator, size: int, mean: np.ndarray, scale: np.ndarray
) -> np.ndarray:
    return mean + scale * rng.standard_normal((size, len(mean)))


def _marks_discrete_atoms(
    rng: np.random.Generator, size: int, atoms: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    return atoms[rng.choice(len(atoms), size=size, p=weights)]


@dataclass(frozen=True, eq=False)
class MarkDistribution:
    """
    The finite intensity measure `Π = Λ·P` of the Poisson measure.

    `intensity` is the total jump rate `Λ`; `kind` names the mark law `P`
    (one of `mark_kinds`) and `params` holds its parameters as arrays.
    """

    intensity: float
    kind: str
    params: dict[str, np.ndarray]

    @classmethod
    def from_config(cls, raw: Any, where: str) -> Self:
        raw = read_keys(raw, where, ("intensity", "marks"))
        intensity = as_number(raw["intensity"], f"{where}.intensity")
        marks = raw["marks"]
        if not isinstance(marks, abc.Mapping) or "kind" not in marks:
            raise ConfigError(f"{where}.marks: expected a mapping with a 'kind'")
        kind = marks["kind"]
        if kind not in mark_params:
            raise ConfigError(
                f"{where}.marks.kind: unknown mark law {kind!r}; "
                f"expected one of {mark_kinds}"
            )
        marks = read_keys(marks, f"{where}.marks", ("kind", *mark_params[kind]))
        params = {
            name: as_array(marks[name], f"{where}.marks.{name}")
            for name in mark_params[kind]
        }
        return cls(intensity, kind, params)

    def to_config(self) -> dict:
        marks = {"kind": self.kind}
        marks.update((name, value.tolist()) for name, value in self.params.items())
        return {"intensity": self.intensity, "marks": marks}

    @property
    def mark_dim(self) -> int:
        match self.kind:
            case "uniform-box":
                return len(self.params["low"])
            case "isotropic-gaussian":
                return len(self.params["mean"])
            case "discrete-atoms":
                return self.params["atoms"].shape[-1]
        raise ValueError(f"unknown mark law {self.kind!r}")

    def problems(self, mark_dim: int, where: str) -> list[Violation]:
        found = []

        def bad(message: str, key: str = "marks"):
            found.append(Violation("InvalidIntensity", f"{where}.{key}", message))

        if not (np.isfinite(self.intensity) and self.intensity >= 0):
            bad(
                f"total intensity must be finite and >= 0; got {self.intensity!r}",
                "intensity",
            )
        params = self.params
        match self.kind:
            case "uniform-box":
                low, high = params["low"], params["high"]
                if low.shape != (mark_dim,) or high.shape != (mark_dim,):
                    bad(f"box bounds must both have length {mark_dim}")
                elif not np.all(low < high):
                    bad("box bounds must be ordered (low < high)")
            case "isotropic-gaussian":
                if params["mean"].shape != (mark_dim,):
                    bad(f"mean must have length {mark_dim}")
                if params["scale"].ndim or not params["scale"] > 0:
                    bad("scale must be a positive number")
            case "discrete-atoms":
                atoms, weights = params["atoms"], params["weights"]
                if atoms.ndim != 2 or atoms.shape[1] != mark_dim:
                    bad(f"atoms must be a list of length-{mark_dim} marks")
                elif weights.shape != (len(atoms),):
                    bad(f"{len(atoms)} atoms need {len(atoms)} weights")
                if np.any(weights < 0):
                    bad("weights must be non-negative")
                if abs((total := float(weights.sum())) - 1) > 1e-12:
                    bad(f"weights sum {total!r}, not 1")
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                bad(f"non-finite entries in {name}")
        return found

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return _mark_samplers[self.kind](rng, size, **self.params)


def sample_wiener(grid: TimeGrid, wiener_dim: int, seed: int) -> WienerPath:
    """
    Draw a Wiener path with i.i.d. N(0, dt) increments per component.

    Args:
        grid: The time grid.
        wiener_dim: Number of independent components `m`.
        seed: Seed of the Philox stream; equal seeds give identical paths.
    """
    draws = make_rng(seed).normal(0.0, np.sqrt(grid.dt), (grid.steps, wiener_dim))
    return WienerPath.from_increments(grid, draws)


def coarsen_wiener(path: WienerPath, factor: int) -> WienerPath:
    """
    Aggregate each block of `factor` consecutive increments into one.

    Raises:
        FactorMismatchError: If `factor` < 2 or does not divide the step count.
    """
    if factor < 2:
        raise FactorMismatchError(f"coarsening factor must be >= 2; got {factor!r}")
    coarse = path.grid.coarsen(factor)
    logger.debug("coarsened %d steps to %d", path.grid.steps, coarse.steps)
    return WienerPath(coarse, path.values[::factor])


def sample_jumps(
    horizon: float, law: MarkDistribution, seed_time: int, seed_mark: int
) -> JumpStream:
    """
    Draw the events of a Poisson measure with finite intensity on (0, T].

    The count is Poisson(ΛT); given the count, times are sorted i.i.d.
    uniforms on (0, T] and marks are i.i.d. from the mark law. Times and
    marks come from separate streams.
    """
    mark_dim = law.mark_dim
    if law.intensity == 0:
        return JumpStream.empty(horizon, mark_dim)
    rng = make_rng(seed_time)
    count = int(rng.poisson(law.intensity * horizon))
    # T - U maps [0, T) onto (0, T]
    times = np.sort(horizon - rng.uniform(0.0, horizon, count))
    marks = law.sample(make_rng(seed_mark), count).reshape(count, mark_dim)
    return JumpStream(horizon, times, marks)


class CheckpointKind(IntEnum):
    GRID = 0
    PRE_JUMP = 1
    POST_JUMP = 2


class CheckpointLayout(NamedTuple):
    """
    The ordered checkpoints at which a path is tracked: grid nodes plus a
    (pre_jump, post_jump) pair at every event.

    Row `r > 0` books the segment that ends at checkpoint `r`:

    * `dt[r]` is its duration (0 on post_jump rows),
    * `steps[r]` is the grid step it lies in,
    * `dw[r]` is the Wiener increment booked on it; a step's whole increment
      is booked on the grid row that closes the step,
    * `events[r]` is the event index on pre/post rows and -1 elsewhere.

    Rows are sorted by time and then by kind, so an event that coincides with
    a grid node is processed after that node's Wiener booking.
    """

    times: np.ndarray
    kinds: np.ndarray
    steps: np.ndarray
    events: np.ndarray
    dt: np.ndarray
    dw: np.ndarray
    event_steps: np.ndarray
    grid: TimeGrid
    fingerprint: str

    @property
    def post_rows(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == CheckpointKind.POST_JUMP)

    @property
    def grid_rows(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == CheckpointKind.GRID)

    @property
    def opening_rows(self) -> np.ndarray:
        """For every row, the grid row at the start of the step it lies in."""
        return self.grid_rows[self.steps]


def noise_fingerprint(wiener: WienerPath, jumps: JumpStream) -> str:
    digest = hashlib.blake2b(digest_size=16)
    digest.update(repr((wiener.grid.horizon, wiener.grid.steps)).encode())
    for array in (wiener.values, jumps.times, jumps.marks):
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def build_layout(wiener: WienerPath, jumps: JumpStream) -> CheckpointLayout:
    """
    Merge the grid of `wiener` with the events of `jumps` into one ordered
    checkpoint layout shared by the state and field evolutions.

    Raises:
        NoiseMismatchError: If the two noise objects cover different horizons.
    """
    grid = wiener.grid
    if not np.isclose(jumps.horizon, grid.horizon, rtol=1e-12, atol=0):
        raise NoiseMismatchError(
            f"jump stream horizon {jumps.horizon!r} differs from grid horizon "
            f"{grid.horizon!r}"
        )
    nodes, n_events = grid.nodes, jumps.count
    event_steps = np.clip(
        np.searchsorted(nodes, jumps.times, side="left") - 1, 0, grid.steps - 1
    )

    times = np.concatenate([nodes, jumps.times, jumps.times])
    kinds = np.concatenate(
        [
            np.full(grid.steps + 1, int(CheckpointKind.GRID)),
            np.full(n_events, int(CheckpointKind.PRE_JUMP)),
            np.full(n_events, int(CheckpointKind.POST_JUMP)),
        ]
    )
    events = np.concatenate(
        [np.full(grid.steps + 1, -1), np.arange(n_events), np.arange(n_events)]
    )
    node_steps = np.concatenate([[0], np.arange(grid.steps)])
    steps = np.concatenate([node_steps, event_steps, event_steps])
    order = np.lexsort((events, kinds, times))
    times, kinds = times[order], kinds[order]
    events, steps = events[order], steps[order]

    dt = np.diff(times, prepend=0.0)
    dt[kinds == CheckpointKind.POST_JUMP] = 0.0
    dw = np.zeros((len(times), wiener.wiener_dim))
    closing = np.flatnonzero(kinds == CheckpointKind.GRID)[1:]
    dw[closing] = wiener.increments
    logger.debug(
        "layout of %d checkpoints over %d steps and %d events",
        len(times),
        grid.steps,
        n_events,
    )

    return CheckpointLayout(
        times=times,
        kinds=kinds,
        steps=steps,
        events=events,
        dt=dt,
        dw=dw,
        event_steps=event_steps,
        grid=grid,
        fingerprint=noise_fingerprint(wiener, jumps),
    )


def dump_noise(wiener: WienerPath, jumps: JumpStream, fh: TextIO) -> None:
    """
    Write a noise realization as text: a header line
    `steps wiener_dim horizon n_events mark_dim`, then the increments one step
    per line, then one event per line as `time mark_1 ... mark_n'`.
    """
    grid = wiener.grid
    fh.write(
        f"{grid.steps} {wiener.wiener_dim} {grid.horizon!r} {jumps.count} "
        f"{jumps.mark_dim}\n"
    )
    np.savetxt(fh, wiener.increments, fmt="%.17g")
    if jumps.count:
        np.savetxt(fh, np.column_stack([jumps.times, jumps.marks]), fmt="%.17g")


def load_noise(fh: TextIO) -> tuple[WienerPath, JumpStream]:
    """Read a noise realization written by `dump_noise`."""
    try:
        steps, wiener_dim, horizon, n_events, mark_dim = map(
            float, fh.readline().split()
        )
        grid = TimeGrid(horizon, int(steps))
        rows = [line.split() for line in fh if line.strip()]
        increments = np.array(rows[: grid.steps], dtype=float).reshape(
            grid.steps, int(wiener_dim)
        )
        events = np.array(rows[grid.steps :], dtype=float).reshape(
            int(n_events), int(mark_dim) + 1
        )
    except ValueError as e:
        raise ValueError(f"malformed noise dump: {e}") from None
    jumps = JumpStream(grid.horizon, events[:, 0], events[:, 1:])
    return WienerPath.from_increments(grid, increments), jumps


_mark_samplers = {}
for name in list(globals()):
    if name.startswith("_marks_"):
        _mark_samplers[name[7:].replace("_", "-")] = globals()[name]
mark_kinds = list(_mark_samplers)
# parameter names of each mark law, as they appear in config documents
mark_params = {
    kind: tuple(inspect.signature(sampler).parameters)[2:]
    for kind, sampler in _mark_samplers.items()
}
