"""Variable-step Adams-Bashforth constraints between observed states.

An explicit Adams-Bashforth rule of order :math:`p` relates consecutive states
through a weighted sum of past time derivatives,

.. math::

    x_{k+1} - x_k = \\sum_{j=0}^{p-1} \\beta_{k,j} \\dot x_{k-j},

where the weights integrate the Lagrange basis polynomials through the nodes
:math:`t_k, \\dots, t_{k-p+1}` over :math:`[t_k, t_{k+1}]`. Stacking one rule per
window gives two banded matrices :math:`A` and :math:`B` with
:math:`A X = B \\dot X` up to the local truncation error.

>>> import numpy as np
>>> from phsgp.multistep import MultistepScheme, build_constraints
>>> m = build_constraints(np.array([0.0, 0.1, 0.3]), MultistepScheme(order=1))
>>> m.A.tolist()
[[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]]
>>> m.B.round(12).tolist()
[[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]]
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .simulate import rk4_integrate

if TYPE_CHECKING:
    from .systems import BenchmarkSystem

__all__ = [
    "DEFAULT_STEP_LADDER",
    "ConstraintError",
    "ConstraintMatrices",
    "InsufficientHistoryError",
    "MultistepScheme",
    "StepSizeError",
    "ab_coefficients",
    "build_constraints",
    "kron_lift",
    "lte_order_check",
    "window_residuals",
]

logger = logging.getLogger(__name__)

#: Consecutive step ratios above this are reported
STEP_RATIO_WARNING = 10.0

#: Mean steps used by :func:`lte_order_check` unless another ladder is given
DEFAULT_STEP_LADDER = (0.04, 0.02, 0.01, 0.005)


class StepSizeError(ValueError):
    """An error raised on non-positive steps, i.e., non-increasing timestamps."""

    def __init__(self, steps: Sequence[float]) -> None:
        """Initialize the error.

        :param steps: The offending step sizes
        """
        self.steps = list(steps)

    def __str__(self) -> str:
        return f"step sizes must be positive, got {self.steps[:5]}"


class InsufficientHistoryError(ValueError):
    """An error raised when there are fewer steps or points than a rule consumes."""

    def __init__(self, required: int, received: int) -> None:
        """Initialize the error.

        :param required: The number of steps or points the rule needs
        :param received: The number that was available
        """
        self.required = required
        self.received = received

    def __str__(self) -> str:
        return f"need at least {self.required} steps or points, got {self.received}"


class ConstraintError(ValueError):
    """An error raised when constraint inputs have inconsistent shapes."""


class MultistepScheme(BaseModel):
    """An explicit linear multistep family and order."""

    model_config = ConfigDict(frozen=True)

    family: Literal["adams_bashforth"] = "adams_bashforth"
    order: int = Field(3, ge=1, le=3, description="The order p of the rule")

    @property
    def window_width(self) -> int:
        """Get the number of past points each window consumes, equal to the order."""
        return self.order

    @property
    def key(self) -> str:
        """Get the short name used in method ids, e.g., ``ab-3``."""
        return f"ab-{self.order}"


class ConstraintMatrices(NamedTuple):
    """Stacked window coefficients with one row per window."""

    A: np.ndarray
    B: np.ndarray
    timestamps: np.ndarray

    @property
    def windows(self) -> int:
        """Get the number of windows."""
        return int(self.A.shape[0])

    def lift(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Get both matrices lifted to stacked ``n``-dimensional states."""
        return kron_lift(self.A, n), kron_lift(self.B, n)


def ab_coefficients(step_history: Sequence[float] | np.ndarray, order: int) -> np.ndarray:
    """Calculate variable-step Adams-Bashforth weights for a single window.

    :param step_history: The integration step :math:`h_k` first, followed by the
        preceding gaps :math:`h_{k-1}, h_{k-2}, \\dots`. Only the first ``order``
        entries are used.
    :param order: The order of the rule
    :returns: The weights :math:`\\beta_j` multiplying :math:`\\dot x_{k-j}`. They sum
        to :math:`h_k` and integrate polynomials of degree below ``order`` exactly.
    :raises InsufficientHistoryError: If fewer than ``order`` steps are given
    :raises StepSizeError: If any used step is not positive

    >>> ab_coefficients([0.2], 1).tolist()
    [0.2]
    >>> ab_coefficients([1.0, 1.0], 2).round(12).tolist()
    [1.5, -0.5]
    """
    steps = np.asarray(step_history, dtype=float).ravel()
    if order < 1 or steps.size < order:
        raise InsufficientHistoryError(order, steps.size)
    steps = steps[:order]
    if np.any(steps <= 0.0):
        raise StepSizeError(steps[steps <= 0.0].tolist())

    # nodes relative to t_k in units of h_k, so the integral runs over [0, 1]
    nodes = np.concatenate([[0.0], -np.cumsum(steps[1:])]) / steps[0]
    moments = 1.0 / np.arange(1, order + 1)
    vandermonde = np.vander(nodes, order, increasing=True)
    return steps[0] * np.linalg.solve(vandermonde.T, moments)


def build_constraints(
    timestamps: Sequence[float] | np.ndarray, scheme: MultistepScheme
) -> ConstraintMatrices:
    """Stack the variable-step rule of every window into constraint matrices.

    Window ``w`` ends at index ``k + 1`` for ``k = M - 1, ..., K - 2`` where ``M`` is
    the window width, so ``A[w, k] = -1``, ``A[w, k + 1] = 1`` and
    ``B[w, k - j]`` holds the ``j``-th weight.

    :param timestamps: Strictly increasing observation times
    :param scheme: The multistep scheme
    :returns: Two ``(K - M, K)`` matrices and the timestamps
    :raises InsufficientHistoryError: If there are no more than ``M`` timestamps
    :raises StepSizeError: If the timestamps are not strictly increasing
    """
    timestamps = np.asarray(timestamps, dtype=float).ravel()
    size, width = timestamps.size, scheme.window_width
    if size < width + 1:
        raise InsufficientHistoryError(width + 1, size)
    steps = np.diff(timestamps)
    if np.any(steps <= 0.0):
        raise StepSizeError(steps[steps <= 0.0].tolist())

    ratios = steps[1:] / steps[:-1]
    bad = np.flatnonzero((ratios > STEP_RATIO_WARNING) | (ratios < 1.0 / STEP_RATIO_WARNING))
    if bad.size:
        logger.warning(
            "%d consecutive step ratios exceed %g (first at step %d: %.3g)",
            bad.size,
            STEP_RATIO_WARNING,
            bad[0] + 1,
            ratios[bad[0]],
        )

    A = np.zeros((size - width, size))
    B = np.zeros((size - width, size))
    for w, k in enumerate(range(width - 1, size - 1)):
        A[w, k] = -1.0
        A[w, k + 1] = 1.0
        history = steps[k - scheme.order + 1 : k + 1][::-1]
        B[w, k - np.arange(scheme.order)] = ab_coefficients(history, scheme.order)
    return ConstraintMatrices(A, B, timestamps)


def kron_lift(matrix: np.ndarray, n: int) -> np.ndarray:
    """Lift a window matrix to act on row-stacked ``n``-dimensional states.

    :param matrix: A ``(W, K)`` matrix
    :param n: The state dimension
    :returns: The ``(W n, K n)`` matrix :math:`M \\otimes I_n`

    >>> kron_lift(np.array([[1.0, 2.0]]), 2).tolist()
    [[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 2.0]]
    """
    if n < 1:
        raise ValueError(f"state dimension must be positive, got {n}")
    return np.kron(np.asarray(matrix, dtype=float), np.eye(n))


def window_residuals(
    timestamps: np.ndarray,
    states: np.ndarray,
    field_values: np.ndarray,
    scheme: MultistepScheme,
) -> np.ndarray:
    """Calculate the infinity norm of :math:`A X - B F` for every window.

    :param timestamps: Strictly increasing times
    :param states: A ``(K, n)`` array of states at those times
    :param field_values: A ``(K, n)`` array of time derivatives at those times
    :param scheme: The multistep scheme
    :returns: A vector with one residual per window
    :raises ConstraintError: If the arrays don't have one row per timestamp
    """
    states = np.asarray(states, dtype=float)
    field_values = np.asarray(field_values, dtype=float)
    if states.shape != field_values.shape or states.shape[0] != np.size(timestamps):
        raise ConstraintError(
            f"states {states.shape} and field values {field_values.shape} "
            f"don't match {np.size(timestamps)} timestamps"
        )
    matrices = build_constraints(timestamps, scheme)
    return np.max(np.abs(matrices.A @ states - matrices.B @ field_values), axis=1)


def lte_order_check(
    system: BenchmarkSystem,
    scheme: MultistepScheme,
    step_grid: Sequence[float] = DEFAULT_STEP_LADDER,
    *,
    horizon: float = 2.0,
    spread: float = 0.2,
    refine: int = 20,
    seed: int = 0,
) -> float:
    """Measure the convergence order of the window residuals on exact trajectories.

    For each mean step on the ladder, a variable grid on ``[0, horizon]`` is drawn
    with steps uniformly within ``spread`` of the mean, the true dynamics are
    integrated through it with ``refine`` RK4 substeps per gap, and the largest
    window residual is recorded. The slope of the log-log regression of residual
    against mean step is the empirical local truncation order, ``p + 1``.

    :param system: A benchmark with an analytic vector field
    :param scheme: The multistep scheme to check
    :param step_grid: The mean steps, at least four
    :param horizon: The length of each trajectory
    :param spread: The relative half-width of the step distribution
    :param refine: The number of RK4 substeps per observation gap
    :param seed: Seeds the step distribution
    :returns: The regression slope
    :raises InsufficientHistoryError: If the ladder has fewer than four levels
    """
    ladder = np.asarray(step_grid, dtype=float)
    if ladder.size < 4:
        raise InsufficientHistoryError(4, ladder.size)

    rng = np.random.default_rng(seed)
    residuals = np.empty(ladder.size)
    for level, mean_step in enumerate(ladder):
        count = int(np.ceil(horizon / mean_step))
        steps = mean_step * rng.uniform(1.0 - spread, 1.0 + spread, size=count)
        timestamps = np.concatenate([[0.0], np.cumsum(steps)])
        fine = np.concatenate(
            [np.linspace(a, b, refine + 1)[:-1] for a, b in zip(timestamps[:-1], timestamps[1:], strict=True)]
            + [timestamps[-1:]]
        )
        trajectory = rk4_integrate(
            lambda x, u, t: system.true_field(x, u),
            system.initial_state,
            fine,
            system.input_signal,
        )
        states = trajectory.states[::refine]
        field_values = trajectory.derivatives[::refine]
        residuals[level] = np.max(window_residuals(timestamps, states, field_values, scheme))
        logger.debug("mean step %.4g: max window residual %.3e", mean_step, residuals[level])

    floor = np.finfo(float).tiny
    slope, _ = np.polyfit(np.log(ladder), np.log(np.maximum(residuals, floor)), 1)
    return float(slope)
