"""Squared exponential base kernel with analytic derivative blocks and the port-Hamiltonian kernel.

A zero-mean Gaussian process prior on the Hamiltonian,

.. math::

    \\operatorname{Cov}[H(x), H(x')] = \\sigma_f^2 k(x, x'), \\qquad
    k(x, x') = \\exp\\Bigl(-\\tfrac{1}{2} \\sum_i (x_i - x'_i)^2 / \\ell_i^2\\Bigr),

induces a matrix-valued prior on the drift :math:`f(x) = J_R(x) \\nabla H(x)` with
:math:`J_R = J - R`:

.. math::

    \\operatorname{Cov}[f(x), f(x')] = \\sigma_f^2 J_R(x) \\nabla_x \\nabla_{x'} k(x, x') J_R(x')^\\top.

The signal variance :math:`\\sigma_f^2` belongs to the Hamiltonian prior, so it is carried
into every derivative and cross-covariance block built on top of this module.

The single-pair functions (:func:`base_eval`, :func:`base_grad_x2`,
:func:`base_hessian_block`, :func:`phs_kernel_eval`) are thin wrappers around the
batched Gram builders that the models use.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing_extensions import Self

__all__ = [
    "ArdKernelParams",
    "DimensionMismatchError",
    "base_eval",
    "base_grad_gram",
    "base_grad_x2",
    "base_gram",
    "base_hessian_block",
    "contract_blocks",
    "hessian_gram",
    "hessian_gram_lengthscale_gradients",
    "phs_gram",
    "phs_kernel_eval",
]


class DimensionMismatchError(ValueError):
    """An error raised when arrays don't agree with the state dimension."""

    def __init__(self, expected: int, shapes: Sequence[tuple[int, ...]]) -> None:
        """Initialize the error.

        :param expected: The state dimension implied by the kernel (or structure)
        :param shapes: The shapes of the offending arrays
        """
        self.expected = expected
        self.shapes = list(shapes)

    def __str__(self) -> str:
        return f"expected arrays compatible with state dimension {self.expected}, got shapes {self.shapes}"


class ArdKernelParams(BaseModel):
    """Hyperparameters of the automatic relevance determination squared exponential kernel.

    Values are stored in log-space so that unconstrained updates keep them positive.

    >>> params = ArdKernelParams.from_raw([1.0, 2.0], 0.5)
    >>> params.lengthscales.tolist()
    [1.0, 2.0]
    >>> params.signal_variance
    0.5
    """

    model_config = ConfigDict(frozen=True)

    log_lengthscales: tuple[float, ...] = Field(
        ..., min_length=1, description="Natural logarithm of one lengthscale per state dimension"
    )
    log_signal_variance: float = Field(
        ..., description="Natural logarithm of the signal variance of the Hamiltonian prior"
    )

    @field_validator("log_lengthscales")
    @classmethod
    def lengthscales_finite(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        """Check that all log-lengthscales are finite."""
        if not all(np.isfinite(v)):
            raise ValueError(f"log-lengthscales must be finite: {v}")
        return v

    @field_validator("log_signal_variance")
    @classmethod
    def signal_variance_finite(cls, v: float) -> float:
        """Check that the log signal variance is finite."""
        if not np.isfinite(v):
            raise ValueError(f"log signal variance must be finite: {v}")
        return v

    @classmethod
    def from_raw(cls, lengthscales: Sequence[float] | np.ndarray, signal_variance: float) -> Self:
        """Construct parameters from positive lengthscales and signal variance.

        :param lengthscales: One positive lengthscale per state dimension
        :param signal_variance: A positive signal variance
        :returns: Log-space parameters
        :raises ValueError: If any value is not strictly positive
        """
        lengthscales = np.asarray(lengthscales, dtype=float).ravel()
        if np.any(lengthscales <= 0.0) or signal_variance <= 0.0:
            raise ValueError(
                f"lengthscales and signal variance must be positive, got "
                f"{lengthscales.tolist()} and {signal_variance}"
            )
        return cls(
            log_lengthscales=tuple(float(v) for v in np.log(lengthscales)),
            log_signal_variance=float(np.log(signal_variance)),
        )

    @property
    def dim(self) -> int:
        """Get the state dimension."""
        return len(self.log_lengthscales)

    @property
    def lengthscales(self) -> np.ndarray:
        """Get the lengthscales."""
        return np.exp(np.asarray(self.log_lengthscales, dtype=float))

    @property
    def signal_variance(self) -> float:
        """Get the signal variance."""
        return float(np.exp(self.log_signal_variance))


def _batch(X: np.ndarray, params: ArdKernelParams) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise DimensionMismatchError(params.dim, [X.shape])
    return X


def _pair(x: np.ndarray, x2: np.ndarray, params: ArdKernelParams) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != (params.dim,) or x2.shape != (params.dim,):
        raise DimensionMismatchError(params.dim, [x.shape, x2.shape])
    return x[None, :], x2[None, :]


def _differences(
    X: np.ndarray, X2: np.ndarray, params: ArdKernelParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Get pairwise differences, inverse squared lengthscales, and unit-variance kernel values."""
    X = _batch(X, params)
    X2 = _batch(X2, params)
    inverse_squared = 1.0 / params.lengthscales**2
    differences = X[:, None, :] - X2[None, :, :]
    values = np.exp(-0.5 * np.einsum("abi,i->ab", differences**2, inverse_squared))
    return differences, inverse_squared, values


def base_gram(X: np.ndarray, X2: np.ndarray, params: ArdKernelParams) -> np.ndarray:
    """Evaluate the unit-variance base kernel between two batches of states.

    :param X: A ``(K, n)`` array of states
    :param X2: A ``(K2, n)`` array of states
    :param params: Kernel hyperparameters
    :returns: A ``(K, K2)`` array
    """
    return _differences(X, X2, params)[2]


def base_grad_gram(X: np.ndarray, X2: np.ndarray, params: ArdKernelParams) -> np.ndarray:
    """Evaluate the gradient of the base kernel with respect to its second argument.

    :param X: A ``(K, n)`` array of states
    :param X2: A ``(K2, n)`` array of states
    :param params: Kernel hyperparameters
    :returns: A ``(K, K2, n)`` array whose ``[a, b]`` entry is :math:`\\nabla_{x'} k(x_a, x'_b)`
    """
    differences, inverse_squared, values = _differences(X, X2, params)
    return values[:, :, None] * differences * inverse_squared


def hessian_gram(X: np.ndarray, X2: np.ndarray, params: ArdKernelParams) -> np.ndarray:
    """Evaluate the mixed second derivative blocks of the base kernel.

    :param X: A ``(K, n)`` array of states
    :param X2: A ``(K2, n)`` array of states
    :param params: Kernel hyperparameters
    :returns: A ``(K, K2, n, n)`` array whose ``[a, b]`` block is
        :math:`\\nabla_x \\nabla_{x'} k(x_a, x'_b)`
    """
    differences, inverse_squared, values = _differences(X, X2, params)
    scaled = differences * inverse_squared
    blocks = np.diag(inverse_squared)[None, None] - scaled[..., :, None] * scaled[..., None, :]
    return values[..., None, None] * blocks


def hessian_gram_lengthscale_gradients(
    X: np.ndarray, X2: np.ndarray, params: ArdKernelParams
) -> np.ndarray:
    """Differentiate :func:`hessian_gram` with respect to each log-lengthscale.

    :param X: A ``(K, n)`` array of states
    :param X2: A ``(K2, n)`` array of states
    :param params: Kernel hyperparameters
    :returns: A ``(n, K, K2, n, n)`` array; slice ``m`` is the derivative of the
        Hessian blocks with respect to :math:`\\log \\ell_m`
    """
    differences, inverse_squared, values = _differences(X, X2, params)
    n = params.dim
    scaled = differences * inverse_squared
    outer = scaled[..., :, None] * scaled[..., None, :]
    blocks = values[..., None, None] * (np.diag(inverse_squared)[None, None] - outer)
    rv = np.empty((n, *blocks.shape))
    for m in range(n):
        weights = (differences[..., m] ** 2 * inverse_squared[m])[..., None, None]
        correction = np.zeros_like(blocks)
        correction[..., m, m] -= 2.0 * inverse_squared[m]
        correction[..., m, :] += 2.0 * outer[..., m, :]
        correction[..., :, m] += 2.0 * outer[..., :, m]
        rv[m] = weights * blocks + values[..., None, None] * correction
    return rv


def contract_blocks(left: np.ndarray, blocks: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Sandwich derivative blocks between per-state matrices and flatten to a Gram matrix.

    :param left: A ``(K, n, n)`` stack of matrices applied on the left of each block row
    :param blocks: A ``(K, K2, n, n)`` stack of blocks
    :param right: A ``(K2, n, n)`` stack of matrices whose transposes are applied on the right
    :returns: A ``(K n, K2 n)`` matrix whose rows are ordered state-major, i.e.,
        row ``k * n + i`` is component ``i`` of state ``k``
    """
    K, K2, n, _ = blocks.shape
    contracted = np.einsum("kia,klab,ljb->kilj", left, blocks, right)
    return contracted.reshape(K * n, K2 * n)


def phs_gram(
    X: np.ndarray,
    X2: np.ndarray,
    jr: np.ndarray,
    jr2: np.ndarray,
    params: ArdKernelParams,
) -> np.ndarray:
    """Build the block Gram matrix of the port-Hamiltonian kernel.

    :param X: A ``(K, n)`` array of states
    :param X2: A ``(K2, n)`` array of states
    :param jr: A ``(K, n, n)`` stack of :math:`J(x) - R(x)` evaluated at ``X``
    :param jr2: A ``(K2, n, n)`` stack of :math:`J(x) - R(x)` evaluated at ``X2``
    :param params: Kernel hyperparameters
    :returns: A ``(K n, K2 n)`` covariance matrix between stacked drifts
    :raises DimensionMismatchError: If the structure matrices don't match the states
    """
    X = _batch(X, params)
    X2 = _batch(X2, params)
    n = params.dim
    jr = np.asarray(jr, dtype=float)
    jr2 = np.asarray(jr2, dtype=float)
    if jr.shape != (X.shape[0], n, n) or jr2.shape != (X2.shape[0], n, n):
        raise DimensionMismatchError(n, [X.shape, X2.shape, jr.shape, jr2.shape])
    return params.signal_variance * contract_blocks(jr, hessian_gram(X, X2, params), jr2)


def base_eval(x: np.ndarray, x2: np.ndarray, params: ArdKernelParams) -> float:
    """Evaluate the unit-variance squared exponential kernel.

    :param x: A state vector
    :param x2: Another state vector
    :param params: Kernel hyperparameters
    :returns: The kernel value in :math:`(0, 1]`

    >>> base_eval([0.0], [1.0], ArdKernelParams.from_raw([1.0], 1.0))  # doctest: +ELLIPSIS
    0.6065306597...
    """
    a, b = _pair(x, x2, params)
    return float(base_gram(a, b, params)[0, 0])


def base_grad_x2(x: np.ndarray, x2: np.ndarray, params: ArdKernelParams) -> np.ndarray:
    """Evaluate :math:`\\nabla_{x'} k(x, x')`.

    :param x: A state vector
    :param x2: Another state vector
    :param params: Kernel hyperparameters
    :returns: A vector with component ``i`` equal to ``k(x, x2) (x_i - x2_i) / l_i^2``
    """
    a, b = _pair(x, x2, params)
    return base_grad_gram(a, b, params)[0, 0]


def base_hessian_block(x: np.ndarray, x2: np.ndarray, params: ArdKernelParams) -> np.ndarray:
    """Evaluate :math:`\\nabla_x \\nabla_{x'} k(x, x')`.

    :param x: A state vector
    :param x2: Another state vector
    :param params: Kernel hyperparameters
    :returns: An ``n x n`` matrix, equal to ``diag(1 / l^2)`` when ``x == x2``
    """
    a, b = _pair(x, x2, params)
    return hessian_gram(a, b, params)[0, 0]


def phs_kernel_eval(
    x: np.ndarray,
    x2: np.ndarray,
    jr_x: np.ndarray,
    jr_x2: np.ndarray,
    params: ArdKernelParams,
) -> np.ndarray:
    """Evaluate the covariance block between the drifts at two states.

    :param x: A state vector
    :param x2: Another state vector
    :param jr_x: The ``n x n`` matrix :math:`J(x) - R(x)`
    :param jr_x2: The ``n x n`` matrix :math:`J(x_2) - R(x_2)`
    :param params: Kernel hyperparameters
    :returns: ``signal_variance * jr_x @ base_hessian_block(x, x2) @ jr_x2.T``
    """
    a, b = _pair(x, x2, params)
    return phs_gram(a, b, np.asarray(jr_x)[None], np.asarray(jr_x2)[None], params)
