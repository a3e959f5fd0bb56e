from dataclasses import dataclass, replace
from enum import IntEnum
import logging
from os import PathLike
from typing import Any

try:
    from typing import Self  # Python 3.11+
except ImportError:
    from typing import TypeAlias

    Self: TypeAlias = "ScenarioConfig"

import numpy as np
import yaml

from iwverify.field import FieldSpec
from iwverify.noise import (
    MarkDistribution,
    NoisePath,
    TimeGrid,
    sample_jumps,
    sample_wiener,
)
from iwverify.schedules import (
    ConfigError,
    Violation,
    as_array,
    as_number,
    read_keys,
)
from iwverify.state import StateCoefficients


logger = logging.getLogger("iwverify.scenario")

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


class ScenarioError(Exception):
    """A scenario is well-formed but violates one or more semantic invariants."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__(
            f"{len(self.violations)} violation(s):\n"
            + "\n".join(f"  {v}" for v in self.violations)
        )


class StreamTag(IntEnum):
    WIENER = 0
    JUMPS = 1
    MARKS = 2


def derive_path_seed(master_seed: int, path_index: int, stream_tag) -> int:
    """
    Derive the seed of one random stream of one Monte Carlo path.

    The counter `4·path_index + tag + 1` is spread by the golden-ratio
    increment and mixed with the splitmix64 finalizer. Both maps are
    bijections of 64-bit words, so distinct `(path_index, tag)` pairs with
    `path_index < 2**62` give distinct seeds.

    Args:
        master_seed: 64-bit master seed of the experiment.
        path_index: Index of the path, >= 0.
        stream_tag: A `StreamTag`, or its name (`"wiener"`, `"jumps"`,
            `"marks"`).

    Returns:
        int: A 64-bit seed.
    """
    if path_index < 0:
        raise ValueError(f"path index must be >= 0; got {path_index!r}")
    if isinstance(stream_tag, str):
        try:
            stream_tag = StreamTag[stream_tag.upper()]
        except KeyError:
            raise ValueError(f"unknown stream tag {stream_tag!r}") from None
    z = (master_seed + (4 * path_index + int(stream_tag) + 1) * GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """
    A complete experiment: dimensions, grid, Monte Carlo size, seeds and the
    coefficients of the state SDE, the Poisson measure and the random field.

    Instances are immutable; overrides go through `dataclasses.replace`.
    """

    state_dim: int
    wiener_dim: int
    mark_dim: int
    horizon: float
    base_steps: int
    refinement_levels: int
    n_paths: int
    master_seed: int
    initial_state: np.ndarray
    state_coeffs: StateCoefficients
    jump_law: MarkDistribution
    field_spec: FieldSpec

    @classmethod
    def from_config(cls, raw: Any) -> Self:
        """
        Build a scenario from a parsed config document.

        Raises:
            ConfigError: On unknown or missing keys and wrongly typed entries.
        """
        raw = read_keys(
            raw,
            "scenario",
            (
                "dimensions",
                "horizon",
                "steps",
                "levels",
                "n_paths",
                "master_seed",
                "initial_state",
                "state",
                "jump_law",
                "field",
            ),
        )
        dims = read_keys(raw["dimensions"], "dimensions", ("state", "wiener", "mark"))
        return cls(
            state_dim=as_number(dims["state"], "dimensions.state", int),
            wiener_dim=as_number(dims["wiener"], "dimensions.wiener", int),
            mark_dim=as_number(dims["mark"], "dimensions.mark", int),
            horizon=as_number(raw["horizon"], "horizon"),
            base_steps=as_number(raw["steps"], "steps", int),
            refinement_levels=as_number(raw["levels"], "levels", int),
            n_paths=as_number(raw["n_paths"], "n_paths", int),
            master_seed=as_number(raw["master_seed"], "master_seed", int),
            initial_state=as_array(raw["initial_state"], "initial_state"),
            state_coeffs=StateCoefficients.from_config(raw["state"]),
            jump_law=MarkDistribution.from_config(raw["jump_law"], "jump_law"),
            field_spec=FieldSpec.from_config(raw["field"]),
        )

    def to_config(self) -> dict:
        return {
            "dimensions": {
                "state": self.state_dim,
                "wiener": self.wiener_dim,
                "mark": self.mark_dim,
            },
            "horizon": self.horizon,
            "steps": self.base_steps,
            "levels": self.refinement_levels,
            "n_paths": self.n_paths,
            "master_seed": self.master_seed,
            "initial_state": self.initial_state.tolist(),
            "state": self.state_coeffs.to_config(),
            "jump_law": self.jump_law.to_config(),
            "field": self.field_spec.to_config(),
        }

    @property
    def finest_steps(self) -> int:
        return self.level_steps(self.refinement_levels - 1)

    def level_steps(self, level: int) -> int:
        return self.base_steps * 2**level

    def with_overrides(
        self,
        master_seed: int | None = None,
        n_paths: int | None = None,
        refinement_levels: int | None = None,
    ) -> Self:
        changes = {
            name: value
            for name, value in (
                ("master_seed", master_seed),
                ("n_paths", n_paths),
                ("refinement_levels", refinement_levels),
            )
            if value is not None
        }
        return replace(self, **changes)


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"unreadable scenario document: {e}") from None
    return ScenarioConfig.from_config(raw)


def serialize_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_config(), sort_keys=False, default_flow_style=None)


def load_scenario(path: str | PathLike) -> ScenarioConfig:
    with open(path) as f:
        return parse_scenario(f.read())


def scenario_violations(cfg: ScenarioConfig) -> list[Violation]:
    """Every semantic problem of `cfg`, in document order."""
    found = []

    def need(ok: bool, where: str, message: str):
        if not ok:
            found.append(Violation("InvalidDimension", where, message))

    for where, value in (
        ("dimensions.state", cfg.state_dim),
        ("dimensions.wiener", cfg.wiener_dim),
        ("dimensions.mark", cfg.mark_dim),
    ):
        need(value >= 1, where, f"dimension must be >= 1; got {value!r}")
    need(
        np.isfinite(cfg.horizon) and cfg.horizon > 0,
        "horizon",
        f"horizon must be positive; got {cfg.horizon!r}",
    )
    for where, value in (
        ("steps", cfg.base_steps),
        ("levels", cfg.refinement_levels),
        ("n_paths", cfg.n_paths),
    ):
        need(value >= 1, where, f"must be >= 1; got {value!r}")
    need(
        0 <= cfg.master_seed <= MASK64,
        "master_seed",
        f"seed must be an unsigned 64-bit integer; got {cfg.master_seed!r}",
    )
    need(
        cfg.initial_state.shape == (cfg.state_dim,),
        "initial_state",
        f"initial state must have length {cfg.state_dim}",
    )
    if not np.all(np.isfinite(cfg.initial_state)):
        found.append(
            Violation("InvalidSchedule", "initial_state", "non-finite initial state")
        )

    grid = (cfg.horizon, cfg.base_steps)
    found += cfg.state_coeffs.problems(
        cfg.state_dim, cfg.wiener_dim, cfg.mark_dim, *grid
    )
    found += cfg.jump_law.problems(cfg.mark_dim, "jump_law")
    found += cfg.field_spec.problems(
        cfg.state_dim, cfg.wiener_dim, cfg.mark_dim, *grid
    )
    return found


def validate_scenario(cfg: ScenarioConfig) -> ScenarioConfig:
    """
    Check every invariant of `cfg`.

    Returns:
        ScenarioConfig: `cfg` itself, unchanged.

    Raises:
        ScenarioError: Carrying the complete list of violations.
    """
    if violations := scenario_violations(cfg):
        logger.warning("scenario has %d violation(s)", len(violations))
        raise ScenarioError(violations)
    logger.debug(
        "scenario is valid: %d-d state, %d-step coarsest grid, %d level(s)",
        cfg.state_dim,
        cfg.base_steps,
        cfg.refinement_levels,
    )
    return cfg


def draw_path_noise(
    cfg: ScenarioConfig, path_index: int, steps: int | None = None
) -> NoisePath:
    """
    Draw the noise of one path, by default on the finest refinement grid;
    coarser levels are obtained with `NoisePath.coarsen`.
    """
    grid = TimeGrid(cfg.horizon, steps or cfg.finest_steps)
    seed = cfg.master_seed
    wiener = sample_wiener(
        grid,
        cfg.wiener_dim,
        derive_path_seed(seed, path_index, StreamTag.WIENER),
    )
    jumps = sample_jumps(
        cfg.horizon,
        cfg.jump_law,
        derive_path_seed(seed, path_index, StreamTag.JUMPS),
        derive_path_seed(seed, path_index, StreamTag.MARKS),
    )
    return NoisePath(wiener, jumps)
