from collections import abc
from dataclasses import dataclass
from functools import cache, cached_property
import logging
from typing import NamedTuple

import numpy as np
from scipy.special import roots_legendre


logger = logging.getLogger("iwverify.mollifier")

SQRT_2PI = np.sqrt(2 * np.pi)
MAX_DIM = 3
# relative rounding of a weighted quadrature sum
QUADRATURE_SLACK = 1e-12


class QuadratureOverflowError(Exception):
    """The integrand returned non-finite values on quadrature nodes."""


@dataclass(frozen=True)
class MollifierParams:
    """
    The Gaussian mollifier `δ_ε` and the tensor Gauss–Legendre rule used to
    integrate against it on the cutoff box `[x − Rε, x + Rε]ⁿ`.

    Attributes:
        epsilon: Width ε of the mollifier.
        dim: Dimension n of the integration domain (at most 3).
        nodes: Nodes per axis H; split evenly over `[−R, 0]` and `[0, R]`.
        radius: Cutoff radius R in units of ε.
    """

    epsilon: float
    dim: int = 1
    nodes: int = 64
    radius: float = 8.0

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be positive; got {self.epsilon!r}")
        if not 1 <= self.dim <= MAX_DIM:
            raise ValueError(f"dim must be in 1..{MAX_DIM}; got {self.dim!r}")
        if self.nodes < 8 or self.nodes % 2:
            raise ValueError(f"nodes must be an even number >= 8; got {self.nodes!r}")
        if not self.radius >= 4:
            raise ValueError(f"radius must be >= 4; got {self.radius!r}")

    @cached_property
    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        return quadrature_rule(self)


class HolderWitness(NamedTuple):
    """Witness of `|f(y₁) − f(y₂)| ≤ constant·|y₁ − y₂|^exponent`."""

    constant: float
    exponent: float = 1.0

    def check(self) -> None:
        if not self.constant >= 0:
            raise ValueError(f"Hölder constant must be >= 0; got {self.constant!r}")
        if not 0 < self.exponent <= 1:
            raise ValueError(
                f"Hölder exponent must be in (0, 1]; got {self.exponent!r}"
            )


class TransferPair(NamedTuple):
    axis: int
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


@cache
def _legendre_panels(nodes: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    # two panels meet at z = 0, where test functions may have a kink
    t, w = roots_legendre(nodes // 2)
    half = radius / 2
    z = np.concatenate([half * (t - 1), half * (t + 1)])
    weights = np.concatenate([half * w, half * w])
    z.flags.writeable = weights.flags.writeable = False
    return z, weights


@cache
def _tensor_rule(
    nodes: int, radius: float, dim: int
) -> tuple[np.ndarray, np.ndarray]:
    z, w = _legendre_panels(nodes, radius)
    w = w * np.exp(-0.5 * z**2) / SQRT_2PI
    axes = np.meshgrid(*([z] * dim), indexing="ij")
    points = np.stack([a.ravel() for a in axes], axis=-1)
    weights = w
    for _ in range(dim - 1):
        weights = np.multiply.outer(weights, w)
    weights = weights.ravel()
    points.flags.writeable = weights.flags.writeable = False
    logger.debug("built a %d-point rule in %d dimension(s)", len(weights), dim)
    return points, weights


def quadrature_rule(params: MollifierParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Nodes `z` (shape `(Hⁿ, n)`) and weights for `∫ h(z)·φ(z) dz` over
    `[−R, R]ⁿ`, where φ is the standard normal density. With the substitution
    `y = x + εz` this is `∫ h·δ_ε(y − x) dy` over the cutoff box.
    """
    return _tensor_rule(params.nodes, float(params.radius), params.dim)


def delta_eps(u: np.ndarray, params: MollifierParams) -> np.ndarray:
    """`Π_i exp(−u_i²/(2ε²)) / (ε√(2π))` over the last axis of `u`."""
    eps = params.epsilon
    u = np.asarray(u, dtype=float)
    return np.prod(np.exp(-(u**2) / (2 * eps**2)) / (eps * SQRT_2PI), axis=-1)


def delta_mass(params: MollifierParams) -> float:
    """Quadrature of `δ_ε` itself over the cutoff box."""
    z, w = _legendre_panels(params.nodes, float(params.radius))
    eps = params.epsilon
    # plain Legendre rule on [−Rε, Rε], one axis at a time
    axis_mass = float(np.sum(w * eps * delta_eps(eps * z[:, np.newaxis], params)))
    return axis_mass**params.dim


def _evaluate(f: abc.Callable, points: np.ndarray) -> np.ndarray:
    values = np.asarray(f(points), dtype=float)
    if not np.all(np.isfinite(values)):
        raise QuadratureOverflowError(
            f"integrand is non-finite at {int(np.sum(~np.isfinite(values)))} "
            "quadrature node(s)"
        )
    return values


def mollify(f: abc.Callable, x: np.ndarray, params: MollifierParams) -> float:
    """
    Approximate `∫ f(y)·δ_ε(y − x) dy`.

    Args:
        f: Vectorized function mapping points of shape `(K, n)` to `(K,)`.
        x: Evaluation point, shape `(n,)`.
        params: Mollifier and quadrature parameters; `params.dim == n`.

    Raises:
        QuadratureOverflowError: If `f` is not finite on every node.
    """
    z, w = params.rule
    values = _evaluate(f, np.asarray(x, dtype=float) + params.epsilon * z)
    return float(w @ values)


def holder_error_bound(params: MollifierParams, witness: HolderWitness) -> float:
    """
    `4·ε^ς·L/√(2π)`, which bounds `|mollify(f, x) − f(x)|` for an
    (L, ς)-Hölder f.
    """
    witness.check()
    return 4 * params.epsilon**witness.exponent * witness.constant / SQRT_2PI


def within_bound(error: float, bound: float, scale: float = 1.0) -> bool:
    """
    `error ≤ bound` up to the rounding of a quadrature whose integrand is of
    size `scale`; a zero bound still admits that rounding.
    """
    return error <= bound + QUADRATURE_SLACK * max(1.0, abs(scale))


def mollify_grad_transfer(
    f: abc.Callable, grad: abc.Callable, x: np.ndarray, params: MollifierParams
) -> list[TransferPair]:
    """
    Both sides of `−∫ f ∂_i δ_ε dy = ∫ δ_ε ∂_i f dy`, one pair per axis.

    Args:
        f: Vectorized function `(K, n) -> (K,)`.
        grad: Its gradient, `(K, n) -> (K, n)`.
        x: Evaluation point.
        params: Mollifier and quadrature parameters.
    """
    z, w = params.rule
    points = np.asarray(x, dtype=float) + params.epsilon * z
    values, grads = _evaluate(f, points), _evaluate(grad, points)
    return [
        TransferPair(
            i,
            float(w @ (values * z[:, i])) / params.epsilon,
            float(w @ grads[:, i]),
        )
        for i in range(params.dim)
    ]


def mollify_hess_transfer(
    f: abc.Callable, hess: abc.Callable, x: np.ndarray, params: MollifierParams
) -> list[TransferPair]:
    """
    Both sides of `∫ f ∂_i² δ_ε dy = ∫ δ_ε ∂_i² f dy`, one pair per axis;
    `hess` maps `(K, n)` to `(K, n, n)`.
    """
    z, w = params.rule
    points = np.asarray(x, dtype=float) + params.epsilon * z
    values, hessians = _evaluate(f, points), _evaluate(hess, points)
    return [
        TransferPair(
            i,
            float(w @ (values * (z[:, i] ** 2 - 1))) / params.epsilon**2,
            float(w @ hessians[:, i, i]),
        )
        for i in range(params.dim)
    ]


class Benchmark(NamedTuple):
    """A closed-form test function with its derivatives and regularity."""

    name: str
    dim: int
    point: tuple[float, ...]
    value: abc.Callable
    grad: abc.Callable | None = None
    hess: abc.Callable | None = None
    witness: HolderWitness | None = None
    # |mollify(f, point) − f(point)| / ε^ς, when known in closed form
    scaled_error: float | None = None


def holder_benchmarks() -> list[Benchmark]:
    """Hölder-continuous functions with a kink at the evaluation point."""
    return [
        Benchmark(
            "abs",
            1,
            (0.0,),
            lambda y: np.abs(y[:, 0]),
            witness=HolderWitness(1.0, 1.0),
            scaled_error=np.sqrt(2 / np.pi),
        ),
        Benchmark(
            "sqrt-abs",
            1,
            (0.0,),
            lambda y: np.sqrt(np.abs(y[:, 0])),
            witness=HolderWitness(1.0, 0.5),
        ),
        Benchmark(
            "constant",
            1,
            (0.0,),
            lambda y: np.full(len(y), 5.0),
            witness=HolderWitness(0.0, 1.0),
            scaled_error=0.0,
        ),
        Benchmark(
            "abs-sum-2d",
            2,
            (0.0, 0.0),
            lambda y: np.abs(y).sum(axis=1) / np.sqrt(2),
            witness=HolderWitness(1.0, 1.0),
            scaled_error=2 / np.sqrt(np.pi),
        ),
    ]


def smooth_benchmarks() -> list[Benchmark]:
    """Smooth functions for the derivative-transfer identities."""

    def bump(y):
        return np.exp(-0.5 * np.sum(y**2, axis=1))

    return [
        Benchmark(
            "square",
            1,
            (1.0,),
            lambda y: y[:, 0] ** 2,
            lambda y: 2 * y,
            lambda y: np.full((len(y), 1, 1), 2.0),
        ),
        Benchmark(
            "cube",
            1,
            (0.0,),
            lambda y: y[:, 0] ** 3,
            lambda y: 3 * y**2,
            lambda y: (6 * y)[:, :, np.newaxis],
        ),
        Benchmark(
            "sine",
            1,
            (0.3,),
            lambda y: np.sin(2 * y[:, 0]),
            lambda y: 2 * np.cos(2 * y),
            lambda y: (-4 * np.sin(2 * y))[:, :, np.newaxis],
        ),
        Benchmark(
            "bump-2d",
            2,
            (0.2, -0.1),
            bump,
            lambda y: -y * bump(y)[:, np.newaxis],
            lambda y: (
                y[:, :, np.newaxis] * y[:, np.newaxis, :] - np.eye(2)
            )
            * bump(y)[:, np.newaxis, np.newaxis],
        ),
        Benchmark(
            "cubic-3d",
            3,
            (0.5, -0.5, 0.25),
            lambda y: y[:, 0] * y[:, 1] ** 2 + y[:, 2],
            lambda y: np.stack(
                [y[:, 1] ** 2, 2 * y[:, 0] * y[:, 1], np.ones(len(y))], axis=1
            ),
            lambda y: np.stack(
                [
                    np.stack([np.zeros(len(y)), 2 * y[:, 1], np.zeros(len(y))], 1),
                    np.stack([2 * y[:, 1], 2 * y[:, 0], np.zeros(len(y))], 1),
                    np.zeros((len(y), 3)),
                ],
                axis=1,
            ),
        ),
    ]
