from collections import abc
from dataclasses import dataclass
from functools import partial
import logging
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from iwverify.field import FieldState, FieldSpec, eval_field, eval_grad, evolve_field
from iwverify.mollifier import (
    HolderWitness,
    MollifierParams,
    holder_error_bound,
    mollify,
    within_bound,
)
from iwverify.noise import build_layout
from iwverify.scenario import ScenarioConfig, draw_path_noise
from iwverify.state import evolve_state


logger = logging.getLogger("iwverify.feps")

Z99 = norm.ppf(0.995)
# quadrature may move the smallest MSE by at most this share of it
QUADRATURE_SHARE = 0.01
REFINED_NODES = 16
REFINED_RADIUS = 2.0


@dataclass(frozen=True)
class FepsParams:
    """
    Settings of the mean-square study of `F_ε(T; x(T))`.

    Attributes:
        epsilons: Strictly decreasing mollifier widths.
        nodes: Quadrature nodes per axis.
        radius: Quadrature cutoff radius in units of ε.
        n_paths: Monte Carlo sample size.
    """

    epsilons: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    nodes: int = 64
    radius: float = 8.0
    n_paths: int = 1000

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if eps.ndim != 1 or not len(eps):
            raise ValueError("epsilons must be a non-empty list")
        if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
            raise ValueError(
                f"epsilons must be positive and strictly decreasing; "
                f"got {self.epsilons!r}"
            )
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1; got {self.n_paths!r}")
        self.mollifier(eps[0], 1)

    def mollifier(self, epsilon: float, dim: int) -> MollifierParams:
        return MollifierParams(float(epsilon), dim, self.nodes, self.radius)


class FepsRow(NamedTuple):
    epsilon: float
    mse: float
    ci_halfwidth: float
    n_paths: int
    seed: int


class FepsPath(NamedTuple):
    """
    Signed errors `F_ε − F` of one path, checked against the smoothing bound,
    and the error at the smallest ε recomputed with a finer rule.
    """

    errors: np.ndarray
    bound_violations: np.ndarray
    refined_error: float = np.nan


class FepsTable(NamedTuple):
    """
    Per-ε rows of the study. `quadrature_shift` is how far the finer rule
    moves the MSE at the smallest ε; NaN when it was not measured.
    """

    rows: list[FepsRow]
    bound_violations: int
    quadrature_shift: float = np.nan

    @property
    def quadrature_budget(self) -> float:
        return QUADRATURE_SHARE * min(row.mse for row in self.rows)

    @property
    def within_budget(self) -> bool:
        return within_bound(self.quadrature_shift, self.quadrature_budget)


def f_eps(
    state: FieldState,
    spec: FieldSpec,
    x: np.ndarray,
    epsilon: float,
    nodes: int = 64,
    radius: float = 8.0,
) -> float:
    """
    `∫ Π_i δ_ε(y_i − x_i)·F(t, y) dy` over the cutoff box around `x`.

    Raises:
        QuadratureOverflowError: If F is not finite on some node.
    """
    params = MollifierParams(epsilon, len(x), nodes, radius)
    return mollify(lambda y: eval_field(state, spec, y), x, params)


def field_lipschitz(
    state: FieldState, spec: FieldSpec, x: np.ndarray, params: MollifierParams
) -> float:
    """Largest gradient norm of F over the quadrature nodes of the cutoff box."""
    z, _ = params.rule
    grads = eval_grad(state, spec, np.asarray(x) + params.epsilon * z)
    return float(np.max(np.linalg.norm(grads, axis=-1)))


def feps_path_errors(
    cfg: ScenarioConfig, params: FepsParams, path_index: int
) -> FepsPath:
    """Simulate one path on the coarsest grid and mollify F at x(T) for every ε."""
    noise = draw_path_noise(cfg, path_index).coarsen(2 ** (cfg.refinement_levels - 1))
    layout = build_layout(*noise)
    trajectory = evolve_state(
        cfg.state_coeffs, cfg.initial_state, *noise, layout=layout
    )
    field = evolve_field(cfg.field_spec, *noise, layout=layout)
    spec = cfg.field_spec
    spec.check_state_box(trajectory.values)

    x, state = trajectory.final, field.final
    exact = float(eval_field(state, spec, x))
    errors, violations = [], []
    for epsilon in params.epsilons:
        mollifier = params.mollifier(epsilon, cfg.state_dim)
        error = f_eps(state, spec, x, epsilon, params.nodes, params.radius) - exact
        bound = holder_error_bound(
            mollifier, HolderWitness(field_lipschitz(state, spec, x, mollifier))
        )
        errors.append(error)
        violations.append(not within_bound(abs(error), bound, exact))
    refined = f_eps(
        state,
        spec,
        x,
        params.epsilons[-1],
        params.nodes + REFINED_NODES,
        params.radius + REFINED_RADIUS,
    )
    return FepsPath(np.array(errors), np.array(violations), refined - exact)


def summarize_feps(
    cfg: ScenarioConfig, params: FepsParams, paths: abc.Iterable[FepsPath]
) -> FepsTable:
    paths = list(paths)
    squared = np.array([path.errors for path in paths]) ** 2
    violations = int(sum(np.sum(path.bound_violations) for path in paths))
    n = len(paths)
    mse = squared.mean(axis=0)
    spread = squared.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mse)
    rows = [
        FepsRow(float(eps), float(m), float(Z99 * s / np.sqrt(n)), n, cfg.master_seed)
        for eps, m, s in zip(params.epsilons, mse, spread)
    ]
    if violations:
        logger.warning("%d smoothing-bound violation(s) in F_eps study", violations)
    refined = np.array([path.refined_error for path in paths])
    shift = float(abs(mse[-1] - np.mean(refined**2)))
    table = FepsTable(rows, violations, shift)
    if np.isfinite(shift) and not table.within_budget:
        logger.warning(
            "quadrature moves the smallest MSE by %g, over the budget %g",
            shift,
            table.quadrature_budget,
        )
    return table


def ms_convergence_study(
    cfg: ScenarioConfig, params: FepsParams, mapper: abc.Callable = map
) -> FepsTable:
    """
    Estimate `E|F_ε(T; x(T)) − F(T; x(T))|²` for every ε of `params`.
    The smallest ε is also run with a finer rule; the table's
    `within_budget` says whether that moves the MSE by less than 1%.

    Args:
        cfg: A validated scenario; at most three state dimensions.
        params: Study settings.
        mapper: `map`-like callable used to run the paths, e.g. a process
            pool's `map`; results must come back in path order.
    """
    logger.debug("F_eps study over %d paths", params.n_paths)
    return summarize_feps(
        cfg,
        params,
        mapper(partial(feps_path_errors, cfg, params), range(params.n_paths)),
    )
