"""Dense linear algebra shared by the Gaussian process models.

Every Gram matrix in :mod:`phsgp` is factorized through :func:`jittered_cholesky`,
which adds a diagonal jitter proportional to ``trace / size`` and escalates it
by factors of ten until the Cholesky decomposition succeeds or the jitter
reaches :data:`MAX_JITTER`.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
from scipy import linalg

__all__ = [
    "BASE_JITTER",
    "MAX_JITTER",
    "Factorization",
    "FactorizationError",
    "jittered_cholesky",
]

logger = logging.getLogger(__name__)

#: Relative diagonal jitter added before every factorization
BASE_JITTER = 1e-8

#: The largest relative jitter tried before giving up
MAX_JITTER = 1e-4


class FactorizationError(ArithmeticError):
    """An error raised when a covariance matrix can't be factorized, even with jitter."""

    def __init__(self, size: int, jitter: float, condition: float) -> None:
        """Initialize the error.

        :param size: The number of rows in the matrix
        :param jitter: The last relative jitter that was tried
        :param condition: An estimate of the condition number of the matrix
        """
        self.size = size
        self.jitter = jitter
        self.condition = condition

    def __str__(self) -> str:
        return (
            f"Cholesky factorization of a {self.size}x{self.size} matrix failed with "
            f"relative jitter {self.jitter:.1e} (condition estimate {self.condition:.3e})"
        )


class Factorization(NamedTuple):
    """A lower Cholesky factor together with the absolute jitter that made it succeed."""

    lower: np.ndarray
    jitter: float

    @property
    def size(self) -> int:
        """Get the number of rows of the factorized matrix."""
        return int(self.lower.shape[0])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``(M + jitter I) z = rhs``."""
        if self.size == 0:
            return np.zeros(np.shape(rhs))
        return linalg.cho_solve((self.lower, True), rhs, check_finite=False)

    def half_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``L z = rhs`` with the lower triangular factor."""
        if self.size == 0:
            return np.zeros(np.shape(rhs))
        return linalg.solve_triangular(self.lower, rhs, lower=True, check_finite=False)

    def log_determinant(self) -> float:
        """Get the log-determinant of the jittered matrix."""
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def inverse(self) -> np.ndarray:
        """Get the inverse of the jittered matrix."""
        return self.solve(np.eye(self.size))


def _condition(matrix: np.ndarray) -> float:
    try:
        return float(np.linalg.cond(matrix))
    except np.linalg.LinAlgError:
        return float("inf")


def jittered_cholesky(
    matrix: np.ndarray, *, base: float = BASE_JITTER, maximum: float = MAX_JITTER
) -> Factorization:
    """Factorize a symmetric positive semi-definite matrix with escalating diagonal jitter.

    :param matrix: A square symmetric matrix
    :param base: The first relative jitter, multiplied by ``trace / size``
    :param maximum: The largest relative jitter to try
    :returns: The lower Cholesky factor of ``matrix + jitter * I`` and the absolute jitter
    :raises FactorizationError: If the matrix is not finite or the factorization fails
        even with the maximum jitter
    """
    size = matrix.shape[0]
    if size == 0:
        return Factorization(np.zeros((0, 0)), 0.0)
    if not np.all(np.isfinite(matrix)):
        raise FactorizationError(size, base, float("nan"))

    scale = float(np.trace(matrix)) / size
    if not scale > 0.0:
        scale = 1.0

    levels = int(round(np.log10(maximum / base))) + 1
    identity = np.eye(size)
    for relative in base * 10.0 ** np.arange(levels):
        jitter = float(relative * scale)
        try:
            lower = linalg.cholesky(matrix + jitter * identity, lower=True, check_finite=False)
        except linalg.LinAlgError:
            logger.debug("Cholesky failed with relative jitter %.1e, escalating", relative)
            continue
        return Factorization(lower, jitter)

    raise FactorizationError(size, maximum, _condition(matrix))
