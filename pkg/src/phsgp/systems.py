"""Parametric port-Hamiltonian structures and the benchmark oscillators.

A port-Hamiltonian system evolves as

.. math::

    \\dot x = [J(x) - R(x)] \\nabla H(x) + G(x) u

where :math:`J` is skew-symmetric, :math:`R` is symmetric and :math:`G` couples the
external input :math:`u`. A :class:`PhsStructure` fixes the parametric form of
:math:`J`, :math:`R` and :math:`G` while leaving the Hamiltonian :math:`H` to be learned.
The dissipation is linear in the structure parameters :math:`\\theta`,

.. math::

    R(x; \\theta) = \\sum_t \\theta_t R_t(x),

which keeps the derivative of the port-Hamiltonian kernel with respect to
:math:`\\theta` available in closed form.

The three benchmark systems are available by name from :data:`SYSTEMS`:

>>> from phsgp.systems import SYSTEMS
>>> system = SYSTEMS["duffing"]()
>>> float(system.hamiltonian([1.0, 0.0]))
1.75
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Callable, Mapping, Sequence

import numpy as np

from .kernels import DimensionMismatchError

__all__ = [
    "SYSTEMS",
    "BenchmarkSystem",
    "OscillatorStructure",
    "PhsStructure",
    "ThetaLengthError",
    "duffing",
    "jr_eval",
    "mass_spring",
    "van_der_pol",
]

#: The canonical symplectic matrix on (position, momentum) coordinates
CANONICAL_J = np.array([[0.0, 1.0], [-1.0, 0.0]])


class ThetaLengthError(ValueError):
    """An error raised when a structure parameter vector has the wrong length."""

    def __init__(self, expected: Sequence[str], received: int) -> None:
        """Initialize the error.

        :param expected: The names of the structure parameters
        :param received: The length of the parameter vector that was passed
        """
        self.expected = list(expected)
        self.received = received

    def __str__(self) -> str:
        return f"expected {len(self.expected)} structure parameters {self.expected}, got {self.received}"


class PhsStructure(ABC):
    """The known parametric form of a port-Hamiltonian system."""

    #: The number of state variables
    state_dim: int
    #: The number of input channels
    input_dim: int
    #: The names of the dissipation parameters, in order
    parameter_names: tuple[str, ...]

    def __init__(self, theta: Sequence[float] | np.ndarray) -> None:
        """Initialize the structure with its (true or nominal) parameters.

        :param theta: The dissipation parameters
        :raises ThetaLengthError: If ``theta`` doesn't match :attr:`parameter_names`
        """
        self.theta = self.check_theta(theta)

    def check_theta(self, theta: Sequence[float] | np.ndarray) -> np.ndarray:
        """Validate a parameter vector and return it as an array."""
        rv = np.atleast_1d(np.asarray(theta, dtype=float))
        if rv.shape != (len(self.parameter_names),):
            raise ThetaLengthError(self.parameter_names, rv.size)
        return rv

    def _states(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.state_dim:
            raise DimensionMismatchError(self.state_dim, [X.shape])
        return X

    @abstractmethod
    def interconnection(self, X: np.ndarray) -> np.ndarray:
        """Evaluate the skew-symmetric interconnection matrix at a ``(K, n)`` batch of states."""

    @abstractmethod
    def dissipation_basis(self, X: np.ndarray) -> np.ndarray:
        """Evaluate the ``(K, n_theta, n, n)`` symmetric matrices whose weighted sum is :math:`R`."""

    @abstractmethod
    def port(self, X: np.ndarray) -> np.ndarray:
        """Evaluate the ``(K, n, m)`` input matrix :math:`G` at a batch of states."""

    def dissipation(self, X: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        """Evaluate :math:`R(x; \\theta)` at a batch of states."""
        theta = self.theta if theta is None else self.check_theta(theta)
        return np.einsum("t,ktij->kij", theta, self.dissipation_basis(self._states(X)))

    def jr(self, X: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        """Evaluate :math:`J(x) - R(x; \\theta)` at a ``(K, n)`` batch of states.

        :param X: A ``(K, n)`` array of states
        :param theta: Dissipation parameters. Defaults to :attr:`theta`.
        :returns: A ``(K, n, n)`` array
        """
        X = self._states(X)
        return self.interconnection(X) - self.dissipation(X, theta)

    def jr_theta_gradients(self, X: np.ndarray) -> np.ndarray:
        """Differentiate :meth:`jr` with respect to each parameter.

        :param X: A ``(K, n)`` array of states
        :returns: A ``(n_theta, K, n, n)`` array, independent of the current parameters
        """
        return -np.moveaxis(self.dissipation_basis(self._states(X)), 1, 0)

    def input_contribution(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Evaluate :math:`G(x_k) u_k` row by row.

        :param X: A ``(K, n)`` array of states
        :param U: A ``(K, m)`` array of inputs
        :returns: A ``(K, n)`` array
        """
        U = np.asarray(U, dtype=float).reshape(-1, self.input_dim)
        return np.einsum("kij,kj->ki", self.port(self._states(X)), U)


class OscillatorStructure(PhsStructure):
    """A one-degree-of-freedom mechanical structure on (position, momentum) coordinates.

    The interconnection is canonical, the input enters the momentum equation, and
    the single dissipation parameter scales a state-dependent damping profile on
    the momentum entry of :math:`R`.
    """

    state_dim = 2
    input_dim = 1

    def __init__(
        self,
        name: str,
        theta: float,
        damping_profile: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> None:
        """Initialize the structure.

        :param name: The name of the dissipation parameter
        :param theta: The value of the dissipation parameter
        :param damping_profile: Maps a ``(K, 2)`` batch of states to the ``(K,)``
            damping multipliers. Defaults to constant damping.
        """
        self.parameter_names = (name,)
        self.damping_profile = damping_profile
        super().__init__([theta])

    def interconnection(self, X: np.ndarray) -> np.ndarray:
        """Return the canonical interconnection at every state."""
        return np.broadcast_to(CANONICAL_J, (X.shape[0], 2, 2)).copy()

    def dissipation_basis(self, X: np.ndarray) -> np.ndarray:
        """Return the damping profile placed on the momentum entry."""
        profile = np.ones(X.shape[0]) if self.damping_profile is None else self.damping_profile(X)
        rv = np.zeros((X.shape[0], 1, 2, 2))
        rv[:, 0, 1, 1] = profile
        return rv

    def port(self, X: np.ndarray) -> np.ndarray:
        """Return the force input on the momentum equation."""
        rv = np.zeros((X.shape[0], 2, 1))
        rv[:, 1, 0] = 1.0
        return rv


def jr_eval(structure: PhsStructure, theta: Sequence[float] | np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate :math:`J(x) - R(x)` at a single state.

    :param structure: A port-Hamiltonian structure
    :param theta: The dissipation parameters
    :param x: A state vector
    :returns: An ``n x n`` matrix
    :raises ThetaLengthError: If ``theta`` has the wrong length

    >>> jr_eval(van_der_pol().structure, [1.0], [0.0, 0.0]).tolist()
    [[0.0, 1.0], [-1.0, 1.0]]
    """
    theta = structure.check_theta(theta)
    return structure.jr(np.asarray(x, dtype=float)[None, :], theta)[0]


class BenchmarkSystem:
    """A port-Hamiltonian structure together with its true Hamiltonian and input."""

    def __init__(
        self,
        *,
        name: str,
        structure: PhsStructure,
        hamiltonian: Callable[[np.ndarray], np.ndarray],
        hamiltonian_gradient: Callable[[np.ndarray], np.ndarray],
        input_signal: Callable[[float], np.ndarray],
        initial_state: Sequence[float],
    ) -> None:
        """Initialize the system.

        :param name: The key of the system in :data:`SYSTEMS`
        :param structure: The structure, with the true parameters as its ``theta``
        :param hamiltonian: Maps a ``(K, n)`` batch of states to ``(K,)`` energies
        :param hamiltonian_gradient: Maps a ``(K, n)`` batch of states to ``(K, n)`` gradients
        :param input_signal: Maps a time to an ``(m,)`` input vector
        :param initial_state: The state the benchmark trajectory starts from
        """
        self.name = name
        self.structure = structure
        self._hamiltonian = hamiltonian
        self._hamiltonian_gradient = hamiltonian_gradient
        self.input_signal = input_signal
        self.initial_state = np.asarray(initial_state, dtype=float)

    def __repr__(self) -> str:
        return f"BenchmarkSystem(name={self.name!r}, theta={self.structure.theta.tolist()})"

    def hamiltonian(self, X: np.ndarray) -> np.ndarray:
        """Evaluate the true Hamiltonian at one state or a batch of states."""
        X = np.asarray(X, dtype=float)
        rv = self._hamiltonian(np.atleast_2d(X))
        return rv[0] if X.ndim == 1 else rv

    def hamiltonian_gradient(self, X: np.ndarray) -> np.ndarray:
        """Evaluate the gradient of the true Hamiltonian at one state or a batch of states."""
        X = np.asarray(X, dtype=float)
        rv = self._hamiltonian_gradient(np.atleast_2d(X))
        return rv[0] if X.ndim == 1 else rv

    def true_field(self, X: np.ndarray, U: np.ndarray | None = None) -> np.ndarray:
        """Evaluate :math:`[J - R] \\nabla H + G u` with the true parameters.

        :param X: A state vector or a ``(K, n)`` batch of states
        :param U: The matching input vector(s). Defaults to zero input.
        :returns: The time derivative, with the same shape as ``X``
        """
        X = np.asarray(X, dtype=float)
        batch = np.atleast_2d(X)
        drift = np.einsum("kij,kj->ki", self.structure.jr(batch), self._hamiltonian_gradient(batch))
        if U is not None:
            drift = drift + self.structure.input_contribution(
                batch, np.asarray(U, dtype=float).reshape(batch.shape[0], -1)
            )
        return drift[0] if X.ndim == 1 else drift

    def inputs(self, times: np.ndarray) -> np.ndarray:
        """Evaluate the input signal at each time, returning a ``(K, m)`` array."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return np.array([np.atleast_1d(self.input_signal(float(t))) for t in times]).reshape(
            times.size, self.structure.input_dim
        )


def _cosine_input(frequency: float, amplitude: float) -> Callable[[float], np.ndarray]:
    def _input(t: float) -> np.ndarray:
        return np.array([amplitude * np.cos(frequency * t)])

    return _input


def _zero_input(t: float) -> np.ndarray:
    return np.zeros(1)


def mass_spring(
    input_frequency: float = 1.0,
    input_amplitude: float = 1.0,
    *,
    stiffness: float = 1.0,
    mass: float = 1.0,
    damping: float = 0.0,
) -> BenchmarkSystem:
    """Build the driven linear mass-spring benchmark.

    :param input_frequency: The angular frequency of the cosine force
    :param input_amplitude: The amplitude of the cosine force
    :param stiffness: The spring constant
    :param mass: The mass
    :param damping: The true damping coefficient
    :returns: A benchmark with :math:`H = p^2 / (2 m) + k q^2 / 2`
    """

    def hamiltonian(X: np.ndarray) -> np.ndarray:
        return X[:, 1] ** 2 / (2.0 * mass) + stiffness * X[:, 0] ** 2 / 2.0

    def gradient(X: np.ndarray) -> np.ndarray:
        return np.column_stack([stiffness * X[:, 0], X[:, 1] / mass])

    return BenchmarkSystem(
        name="mass-spring",
        structure=OscillatorStructure("damping", damping),
        hamiltonian=hamiltonian,
        hamiltonian_gradient=gradient,
        input_signal=_cosine_input(input_frequency, input_amplitude),
        initial_state=(1.0, 0.0),
    )


def van_der_pol(
    input_frequency: float = 1.0, input_amplitude: float = 1.0, *, mu: float = 1.0
) -> BenchmarkSystem:
    """Build the unforced Van der Pol benchmark.

    The dissipation :math:`R = \\operatorname{diag}(0, -\\mu (1 - q^2))` is indefinite
    inside :math:`|q| < 1`, where the oscillator injects energy. The input port is
    present but the input is identically zero, so the input arguments are accepted
    for a uniform factory signature and ignored.

    :param input_frequency: Ignored
    :param input_amplitude: Ignored
    :param mu: The true nonlinear damping parameter
    :returns: A benchmark with :math:`H = (q^2 + p^2) / 2`
    """

    def hamiltonian(X: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum(X**2, axis=1)

    def gradient(X: np.ndarray) -> np.ndarray:
        return X.copy()

    def profile(X: np.ndarray) -> np.ndarray:
        return -(1.0 - X[:, 0] ** 2)

    return BenchmarkSystem(
        name="van-der-pol",
        structure=OscillatorStructure("mu", mu, profile),
        hamiltonian=hamiltonian,
        hamiltonian_gradient=gradient,
        input_signal=_zero_input,
        initial_state=(1.0, 0.0),
    )


def duffing(
    input_frequency: float = 1.0,
    input_amplitude: float = 1.0,
    *,
    alpha: float = 1.0,
    beta: float = 5.0,
    gamma: float = 0.5,
) -> BenchmarkSystem:
    """Build the driven, damped Duffing benchmark.

    :param input_frequency: The angular frequency of the cosine force
    :param input_amplitude: The amplitude of the cosine force
    :param alpha: The linear stiffness
    :param beta: The cubic stiffness
    :param gamma: The true damping coefficient
    :returns: A benchmark with :math:`H = p^2 / 2 + \\alpha q^2 / 2 + \\beta q^4 / 4`
    """

    def hamiltonian(X: np.ndarray) -> np.ndarray:
        q, p = X[:, 0], X[:, 1]
        return p**2 / 2.0 + alpha * q**2 / 2.0 + beta * q**4 / 4.0

    def gradient(X: np.ndarray) -> np.ndarray:
        q, p = X[:, 0], X[:, 1]
        return np.column_stack([alpha * q + beta * q**3, p])

    return BenchmarkSystem(
        name="duffing",
        structure=OscillatorStructure("gamma", gamma),
        hamiltonian=hamiltonian,
        hamiltonian_gradient=gradient,
        input_signal=_cosine_input(input_frequency, input_amplitude),
        initial_state=(1.0, 0.0),
    )


#: Benchmark factories by system id, each accepting ``input_frequency`` and ``input_amplitude``
SYSTEMS: Mapping[str, Callable[..., BenchmarkSystem]] = {
    "mass-spring": mass_spring,
    "van-der-pol": van_der_pol,
    "duffing": duffing,
}
