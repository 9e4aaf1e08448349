"""Exact Gaussian process inference through linear constraints on a latent vector field.

Every model in :mod:`phsgp` observes a latent drift :math:`f` through a linear map,

.. math::

    y = P \\operatorname{vec} f(X) + \\varepsilon, \\qquad
    \\varepsilon \\sim \\mathcal N(0, \\sigma_x^2 N),

and differs only in the prior on :math:`f` and in the choice of :math:`P` and :math:`N`.
The multistep port-Hamiltonian model (:class:`MsPhsModel`) uses :math:`P = B \\otimes I_n`,
:math:`N = (A \\otimes I_n)(A \\otimes I_n)^\\top` and the labels
:math:`y = (A \\otimes I_n) \\operatorname{vec} \\tilde X - (B \\otimes I_n) \\operatorname{vec} G(X) U`.

:class:`ProjectedGaussianProcess` implements everything that only depends on
this form: assembling and factorizing :math:`C = P K P^\\top + \\sigma_x^2 N`, the
negative log marginal likelihood with its gradient, and the field posterior.
:class:`PhsGaussianProcess` adds the port-Hamiltonian prior and the anchored
posterior over the Hamiltonian surface. :func:`fit` runs Adam on the negative log
marginal likelihood of any of them.
"""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any, NamedTuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing_extensions import Self, TypeAlias

from .kernels import (
    ArdKernelParams,
    base_grad_gram,
    base_gram,
    contract_blocks,
    hessian_gram,
    hessian_gram_lengthscale_gradients,
)
from .linalg import Factorization, FactorizationError, jittered_cholesky
from .multistep import MultistepScheme, build_constraints
from .simulate import TrajectoryDataset
from .systems import PhsStructure

__all__ = [
    "LOG_NOISE_FLOOR",
    "Anchor",
    "AnchoredSurface",
    "FieldPosterior",
    "FieldPrediction",
    "HamiltonianPosterior",
    "KernelHyperparams",
    "MeshError",
    "ModelDocument",
    "MsPhsModel",
    "NonFiniteObjectiveError",
    "OptimizerConfig",
    "PhsGaussianProcess",
    "ProjectedGaussianProcess",
    "SurfacePrediction",
    "TrainingCovariance",
    "UnassembledModelError",
    "assemble_training_cov",
    "default_hyperparameters",
    "field_from_surface_check",
    "finite_differences",
    "fit",
    "hamiltonian_posterior",
    "multistep_observation",
    "nll",
    "predict_field",
    "read_model",
    "scaled_start",
    "write_model",
]

logger = logging.getLogger(__name__)

#: The smallest log noise variance the optimizer may reach
LOG_NOISE_FLOOR = float(np.log(1e-12))

#: The anchor jitter relative to the signal variance
ANCHOR_JITTER = 1e-8


class UnassembledModelError(ValueError):
    """An error raised when predicting from a model whose covariance hasn't been factorized."""

    def __init__(self, model: object) -> None:
        """Initialize the error.

        :param model: The model that was used before calling ``assemble()``
        """
        self.model = model

    def __str__(self) -> str:
        return f"{type(self.model).__name__} must be assembled (or fit) before predicting"


class NonFiniteObjectiveError(ArithmeticError):
    """An error raised when the negative log marginal likelihood isn't finite at initialization."""

    def __init__(self, parameters: Sequence[str], value: float) -> None:
        """Initialize the error.

        :param parameters: The names of the parameters that are implicated
        :param value: The objective value
        """
        self.parameters = list(parameters)
        self.value = value

    def __str__(self) -> str:
        return f"objective is {self.value} at initialization; offending parameters: {self.parameters}"


class MeshError(ValueError):
    """An error raised when a mesh is too coarse for central differences."""

    def __init__(self, shape: Sequence[int]) -> None:
        """Initialize the error.

        :param shape: The number of mesh points per axis
        """
        self.shape = list(shape)

    def __str__(self) -> str:
        return f"need at least 3 mesh points per axis, got {self.shape}"


class FieldPrediction(NamedTuple):
    """Posterior mean and covariance of the drift at a batch of states."""

    mean: np.ndarray
    covariance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        """Get the scalar field standard deviation, the square root of the covariance trace."""
        return np.sqrt(np.clip(np.trace(self.covariance, axis1=1, axis2=2), 0.0, None))


class SurfacePrediction(NamedTuple):
    """Posterior mean and variance of the Hamiltonian at a batch of states."""

    mean: np.ndarray
    variance: np.ndarray


class Anchor(NamedTuple):
    """A noiseless observation of the Hamiltonian."""

    point: np.ndarray
    value: float


AnchorHint: TypeAlias = Union[Anchor, Sequence[Anchor], None]


class TrainingCovariance(NamedTuple):
    """The projected prior and noise parts of the training covariance."""

    prior: np.ndarray
    noise: np.ndarray

    @property
    def total(self) -> np.ndarray:
        """Get the full training covariance."""
        return self.prior + self.noise


class FieldPosterior(ABC):
    """A Gaussian posterior over the drift."""

    @abstractmethod
    def predict(self, X: np.ndarray) -> FieldPrediction:
        """Predict the drift at a ``(L, n)`` batch of states."""

    def mean(self, X: np.ndarray) -> np.ndarray:
        """Get the ``(L, n)`` posterior mean."""
        return self.predict(X).mean

    def covariance(self, X: np.ndarray) -> np.ndarray:
        """Get the ``(L, n, n)`` posterior covariance blocks."""
        return self.predict(X).covariance


class HamiltonianPosterior(ABC):
    """A Gaussian posterior over the Hamiltonian, pinned by noiseless anchors."""

    anchors: list[Anchor]

    @abstractmethod
    def predict(self, X: np.ndarray) -> SurfacePrediction:
        """Predict the Hamiltonian at a ``(L, n)`` batch of states."""

    def mean(self, X: np.ndarray) -> np.ndarray:
        """Get the posterior mean."""
        return self.predict(X).mean

    def variance(self, X: np.ndarray) -> np.ndarray:
        """Get the posterior variance."""
        return self.predict(X).variance


class ProjectedGaussianProcess(FieldPosterior, ABC):
    """A Gaussian process on a vector field observed through a linear projection."""

    def __init__(
        self,
        states: np.ndarray,
        projection: np.ndarray,
        noise_gram: np.ndarray,
        targets: np.ndarray,
        log_noise_variance: float,
    ) -> None:
        """Initialize the model.

        :param states: A ``(K, n)`` array of inputs to the latent field
        :param projection: The ``(W, K n)`` observation map
        :param noise_gram: The ``(W, W)`` noise correlation, scaled by the noise variance
        :param targets: The ``W`` labels
        :param log_noise_variance: The initial log noise variance
        """
        self.states = np.asarray(states, dtype=float)
        self.projection = np.asarray(projection, dtype=float)
        self.noise_gram = np.asarray(noise_gram, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        if self.projection.shape != (self.targets.size, self.states.size):
            raise ValueError(
                f"projection has shape {self.projection.shape} for {self.targets.size} labels "
                f"and {self.states.size} latent values"
            )
        self.log_noise_variance = max(float(log_noise_variance), LOG_NOISE_FLOOR)
        self._factor: Factorization | None = None
        self._alpha: np.ndarray | None = None
        self.jitter_: float | None = None

    @property
    def state_dim(self) -> int:
        """Get the state dimension."""
        return int(self.states.shape[1])

    @property
    def labels(self) -> int:
        """Get the number of scalar labels."""
        return int(self.targets.size)

    @property
    def noise_variance(self) -> float:
        """Get the observation noise variance."""
        return float(np.exp(self.log_noise_variance))

    @property
    def assembled(self) -> bool:
        """Get whether the training covariance is factorized for the current parameters."""
        return self._factor is not None

    # hyperparameters

    @property
    @abstractmethod
    def parameter_names(self) -> list[str]:
        """Get the names of the entries of :meth:`get_vector`, including ``log_noise_variance``."""

    @abstractmethod
    def _get_prior_vector(self) -> dict[str, float]:
        """Get the prior parameters by name."""

    @abstractmethod
    def _set_prior_vector(self, values: Mapping[str, float]) -> None:
        """Set the prior parameters by name."""

    def get_vector(self) -> np.ndarray:
        """Get the hyperparameters as a vector ordered like :attr:`parameter_names`."""
        values = self._get_prior_vector()
        values["log_noise_variance"] = self.log_noise_variance
        return np.array([values[name] for name in self.parameter_names])

    def set_vector(self, vector: np.ndarray) -> None:
        """Set the hyperparameters from a vector and invalidate the factorization."""
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (len(self.parameter_names),):
            raise ValueError(f"expected {len(self.parameter_names)} parameters, got {vector.shape}")
        values = dict(zip(self.parameter_names, vector.tolist(), strict=True))
        self.log_noise_variance = max(values.pop("log_noise_variance"), LOG_NOISE_FLOOR)
        self._set_prior_vector(values)
        self._factor = None
        self._alpha = None
        self.jitter_ = None

    # prior

    @abstractmethod
    def prior_gram(self) -> np.ndarray:
        """Get the ``(K n, K n)`` prior covariance of the stacked latent field at the states."""

    @abstractmethod
    def prior_gram_gradients(self) -> dict[str, np.ndarray]:
        """Differentiate :meth:`prior_gram` with respect to every parameter except the noise."""

    @abstractmethod
    def prior_cross(self, X: np.ndarray) -> np.ndarray:
        """Get the ``(K n, L n)`` prior covariance between the field at the states and at ``X``."""

    @abstractmethod
    def prior_blocks(self, X: np.ndarray) -> np.ndarray:
        """Get the ``(L, n, n)`` prior covariance of the field at each state in ``X``."""

    # training

    def training_covariance(self) -> TrainingCovariance:
        """Project the prior Gram and scale the noise Gram."""
        P = self.projection
        prior = P @ self.prior_gram() @ P.T
        return TrainingCovariance(0.5 * (prior + prior.T), self.noise_variance * self.noise_gram)

    def assemble(self) -> Self:
        """Factorize the training covariance for the current hyperparameters.

        :returns: The model itself
        :raises FactorizationError: If the factorization fails at the largest jitter
        """
        factor = jittered_cholesky(self.training_covariance().total)
        self._factor = factor
        self._alpha = factor.solve(self.targets)
        self.jitter_ = factor.jitter
        return self

    def _require_factor(self) -> tuple[Factorization, np.ndarray]:
        if self._factor is None or self._alpha is None:
            raise UnassembledModelError(self)
        return self._factor, self._alpha

    def nll(self) -> float:
        """Calculate the negative log marginal likelihood, assembling first if needed."""
        if not self.assembled:
            self.assemble()
        factor, alpha = self._require_factor()
        return float(
            0.5 * self.targets @ alpha
            + 0.5 * factor.log_determinant()
            + 0.5 * self.labels * np.log(2.0 * np.pi)
        )

    def nll_and_gradient(self) -> tuple[float, np.ndarray]:
        """Calculate the negative log marginal likelihood and its gradient.

        The gradient is taken with respect to :meth:`get_vector`, using
        :math:`\\partial \\mathcal L = \\tfrac12 \\langle C^{-1} - \\alpha \\alpha^\\top, \\partial C \\rangle`.
        """
        value = self.nll()
        factor, alpha = self._require_factor()
        inner = factor.inverse() - np.outer(alpha, alpha)
        latent = self.projection.T @ inner @ self.projection
        prior_gradients = self.prior_gram_gradients()
        gradient = np.empty(len(self.parameter_names))
        for index, name in enumerate(self.parameter_names):
            if name == "log_noise_variance":
                gradient[index] = 0.5 * np.sum(inner * self.noise_gram) * self.noise_variance
            else:
                gradient[index] = 0.5 * np.sum(latent * prior_gradients[name])
        return value, gradient

    # prediction

    def predict(self, X: np.ndarray) -> FieldPrediction:
        """Condition the field at a ``(L, n)`` batch of states on the labels.

        :raises UnassembledModelError: If :meth:`assemble` hasn't been called
        """
        factor, alpha = self._require_factor()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        L, n = X.shape
        cross = self.projection @ self.prior_cross(X)
        mean = (cross.T @ alpha).reshape(L, n)
        whitened = factor.half_solve(cross).reshape(-1, L, n)
        covariance = self.prior_blocks(X) - np.einsum("wla,wlb->lab", whitened, whitened)
        return FieldPrediction(mean, 0.5 * (covariance + np.swapaxes(covariance, 1, 2)))


class KernelHyperparams(BaseModel):
    """Hyperparameters of a port-Hamiltonian Gaussian process."""

    model_config = ConfigDict(frozen=True)

    log_lengthscales: tuple[float, ...] = Field(..., min_length=1)
    log_signal_variance: float
    log_noise_variance: float
    theta: tuple[float, ...] = ()

    @property
    def kernel(self) -> ArdKernelParams:
        """Get the base kernel parameters."""
        return ArdKernelParams(
            log_lengthscales=self.log_lengthscales, log_signal_variance=self.log_signal_variance
        )

    @property
    def noise_variance(self) -> float:
        """Get the noise variance."""
        return float(np.exp(self.log_noise_variance))

    def to_vector(self) -> np.ndarray:
        """Get the hyperparameters as lengthscales, signal, noise, then structure parameters."""
        return np.array(
            [
                *self.log_lengthscales,
                self.log_signal_variance,
                self.log_noise_variance,
                *self.theta,
            ]
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray, state_dim: int) -> KernelHyperparams:
        """Build hyperparameters from a vector laid out like :meth:`to_vector`."""
        values = np.asarray(vector, dtype=float).tolist()
        return cls(
            log_lengthscales=tuple(values[:state_dim]),
            log_signal_variance=values[state_dim],
            log_noise_variance=values[state_dim + 1],
            theta=tuple(values[state_dim + 2 :]),
        )


class PhsGaussianProcess(ProjectedGaussianProcess):
    """A projected Gaussian process with the port-Hamiltonian prior on its drift."""

    def __init__(
        self,
        states: np.ndarray,
        projection: np.ndarray,
        noise_gram: np.ndarray,
        targets: np.ndarray,
        structure: PhsStructure,
        hyperparameters: KernelHyperparams,
    ) -> None:
        """Initialize the model.

        :param states: A ``(K, n)`` array of inputs to the latent field
        :param projection: The ``(W, K n)`` observation map
        :param noise_gram: The ``(W, W)`` noise correlation
        :param targets: The ``W`` labels
        :param structure: The known port-Hamiltonian structure
        :param hyperparameters: The initial hyperparameters
        """
        super().__init__(
            states, projection, noise_gram, targets, hyperparameters.log_noise_variance
        )
        self.structure = structure
        self.kernel = hyperparameters.kernel
        self.theta = structure.check_theta(hyperparameters.theta or structure.theta)

    @property
    def hyperparameters(self) -> KernelHyperparams:
        """Get the current hyperparameters."""
        return KernelHyperparams(
            log_lengthscales=self.kernel.log_lengthscales,
            log_signal_variance=self.kernel.log_signal_variance,
            log_noise_variance=self.log_noise_variance,
            theta=tuple(self.theta.tolist()),
        )

    @property
    def parameter_names(self) -> list[str]:
        """Get the names of the hyperparameters."""
        return [
            *(f"log_lengthscale_{i + 1}" for i in range(self.state_dim)),
            "log_signal_variance",
            "log_noise_variance",
            *(f"theta_{name}" for name in self.structure.parameter_names),
        ]

    def _get_prior_vector(self) -> dict[str, float]:
        names = self.parameter_names
        values = [*self.kernel.log_lengthscales, self.kernel.log_signal_variance]
        rv = dict(zip(names[: self.state_dim + 1], values, strict=True))
        rv.update(zip(names[self.state_dim + 2 :], self.theta.tolist(), strict=True))
        return rv

    def _set_prior_vector(self, values: Mapping[str, float]) -> None:
        self.kernel = ArdKernelParams(
            log_lengthscales=tuple(
                values[f"log_lengthscale_{i + 1}"] for i in range(self.state_dim)
            ),
            log_signal_variance=values["log_signal_variance"],
        )
        self.theta = np.array([values[f"theta_{name}"] for name in self.structure.parameter_names])

    def _jr(self, X: np.ndarray) -> np.ndarray:
        return self.structure.jr(X, self.theta)

    def prior_gram(self) -> np.ndarray:
        """Get the port-Hamiltonian Gram matrix at the states."""
        jr = self._jr(self.states)
        return self.kernel.signal_variance * contract_blocks(
            jr, hessian_gram(self.states, self.states, self.kernel), jr
        )

    def prior_gram_gradients(self) -> dict[str, np.ndarray]:
        """Differentiate the Gram matrix with respect to the kernel and structure parameters."""
        X, sf2 = self.states, self.kernel.signal_variance
        jr = self._jr(X)
        blocks = hessian_gram(X, X, self.kernel)
        gram = sf2 * contract_blocks(jr, blocks, jr)
        rv = {"log_signal_variance": gram}
        for m, derivative in enumerate(hessian_gram_lengthscale_gradients(X, X, self.kernel)):
            rv[f"log_lengthscale_{m + 1}"] = sf2 * contract_blocks(jr, derivative, jr)
        for name, d_jr in zip(self.structure.parameter_names, self.structure.jr_theta_gradients(X), strict=True):
            half = sf2 * contract_blocks(d_jr, blocks, jr)
            rv[f"theta_{name}"] = half + half.T
        return rv

    def prior_cross(self, X: np.ndarray) -> np.ndarray:
        """Get the prior covariance between the field at the states and at ``X``."""
        return self.kernel.signal_variance * contract_blocks(
            self._jr(self.states), hessian_gram(self.states, X, self.kernel), self._jr(X)
        )

    def prior_blocks(self, X: np.ndarray) -> np.ndarray:
        """Get :math:`\\sigma_f^2 J_R \\operatorname{diag}(\\ell^{-2}) J_R^\\top` at each state."""
        jr = self._jr(X)
        inverse_squared = 1.0 / self.kernel.lengthscales**2
        return self.kernel.signal_variance * np.einsum("lia,a,lja->lij", jr, inverse_squared, jr)

    def hamiltonian_cross(self, X: np.ndarray) -> np.ndarray:
        """Get the ``(L, W)`` prior covariance between the Hamiltonian at ``X`` and the labels."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        gradients = base_grad_gram(X, self.states, self.kernel)
        raw = np.einsum("kij,qkj->qki", self._jr(self.states), gradients).reshape(X.shape[0], -1)
        return self.kernel.signal_variance * raw @ self.projection.T

    def hamiltonian_posterior(
        self, anchors: AnchorHint = None, anchor_jitter: float | None = None
    ) -> AnchoredSurface:
        """Condition the Hamiltonian on the labels and on noiseless anchors.

        :param anchors: One or more anchors. Defaults to :math:`H(0) = 0`.
        :param anchor_jitter: The variance added to the anchor block. Defaults to
            ``1e-8`` times the signal variance.
        :returns: The anchored surface posterior
        """
        return AnchoredSurface(self, _normalize_anchors(anchors, self.state_dim), anchor_jitter)


def _normalize_anchors(anchors: AnchorHint, state_dim: int) -> list[Anchor]:
    if anchors is None:
        return [Anchor(np.zeros(state_dim), 0.0)]
    if isinstance(anchors, Anchor):
        anchors = [anchors]
    rv = [Anchor(np.asarray(a.point, dtype=float).ravel(), float(a.value)) for a in anchors]
    if not rv:
        raise ValueError("at least one anchor is required")
    for anchor in rv:
        if anchor.point.shape != (state_dim,):
            raise ValueError(f"anchor {anchor.point.tolist()} doesn't have dimension {state_dim}")
    return rv


class AnchoredSurface(HamiltonianPosterior):
    """The posterior over the Hamiltonian given the labels and noiseless anchors.

    The joint over the anchor values and the labels is conditioned by block
    elimination: the cached factor of the training covariance is reused and only
    the Schur complement of the (anchors x anchors) block is factorized.
    """

    def __init__(
        self,
        model: PhsGaussianProcess,
        anchors: Sequence[Anchor],
        anchor_jitter: float | None = None,
    ) -> None:
        """Condition the surface.

        :param model: An assembled port-Hamiltonian model
        :param anchors: The anchors
        :param anchor_jitter: The variance added to the anchor block
        :raises UnassembledModelError: If the model hasn't been assembled
        :raises FactorizationError: If the anchor Schur complement can't be factorized
        """
        self.model = model
        self.anchors = list(anchors)
        factor, alpha = model._require_factor()
        self._factor, self._alpha = factor, alpha
        self._signal_variance = model.kernel.signal_variance
        self.anchor_jitter = (
            ANCHOR_JITTER * self._signal_variance if anchor_jitter is None else float(anchor_jitter)
        )
        self._points = np.array([anchor.point for anchor in self.anchors])
        values = np.array([anchor.value for anchor in self.anchors])

        anchor_cross = model.hamiltonian_cross(self._points)
        self._projected = factor.solve(anchor_cross.T)
        anchor_block = self._signal_variance * base_gram(
            self._points, self._points, model.kernel
        ) + self.anchor_jitter * np.eye(len(self.anchors))
        schur = anchor_block - anchor_cross @ self._projected
        self._schur = jittered_cholesky(0.5 * (schur + schur.T), base=1e-12)
        self._weights = self._schur.solve(values - anchor_cross @ alpha)

    def predict(self, X: np.ndarray) -> SurfacePrediction:
        """Predict the Hamiltonian at a ``(L, n)`` batch of states."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        label_cross = self.model.hamiltonian_cross(X)
        anchor_cross = self._signal_variance * base_gram(X, self._points, self.model.kernel)
        residual = anchor_cross - label_cross @ self._projected
        mean = label_cross @ self._alpha + residual @ self._weights
        variance = (
            self._signal_variance
            - np.sum(label_cross * self._factor.solve(label_cross.T).T, axis=1)
            - np.sum(residual * self._schur.solve(residual.T).T, axis=1)
        )
        return SurfacePrediction(mean, np.clip(variance, 0.0, None))


def multistep_observation(
    dataset: TrajectoryDataset, scheme: MultistepScheme, structure: PhsStructure
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build the lifted projection, noise Gram and labels of the multistep constraints.

    :param dataset: The noisy trajectory
    :param scheme: The multistep scheme
    :param structure: Provides the input matrix used to remove the known input contribution
    :returns: :math:`B_I`, :math:`A_I A_I^\\top` and :math:`A_I \\tilde x - B_I \\operatorname{vec} G(X) U`.
        With no more observations than the window width there are no labels.
    """
    n = dataset.state_dim
    if dataset.size <= scheme.window_width:
        return np.zeros((0, dataset.size * n)), np.zeros((0, 0)), np.zeros(0)
    A_I, B_I = build_constraints(dataset.timestamps, scheme).lift(n)
    forcing = structure.input_contribution(dataset.states, dataset.inputs)
    targets = A_I @ dataset.states.ravel() - B_I @ forcing.ravel()
    return B_I, A_I @ A_I.T, targets


def _positive_scale(values: np.ndarray, fallback: float = 1.0) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.where(np.isfinite(values) & (values > 0.0), values, fallback)


def default_hyperparameters(
    states: np.ndarray, derivatives: np.ndarray, structure: PhsStructure
) -> KernelHyperparams:
    """Pick scale-aware initial hyperparameters from the data.

    Lengthscales are the per-dimension standard deviations of the states. As the
    drift scales like :math:`\\sigma_f / \\ell`, the signal variance is the mean of
    the derivative variances times the squared lengthscales. The noise starts at one
    percent of the state variance and the structure parameters at 0.1.

    :param states: A ``(K, n)`` array of (noisy) states
    :param derivatives: A ``(K', n)`` array of rough time derivatives, e.g., finite differences
    :param structure: The port-Hamiltonian structure
    :returns: Initial hyperparameters
    """
    if len(states) > 1:
        lengthscales = _positive_scale(np.std(states, axis=0))
    else:
        lengthscales = np.ones(states.shape[1])
    if len(derivatives) > 1:
        signal = float(np.mean(np.var(derivatives, axis=0) * lengthscales**2))
    else:
        signal = 1.0
    signal = float(_positive_scale(np.array([signal])).item())
    noise = float(_positive_scale(np.array([1e-2 * np.mean(lengthscales**2)])).item())
    return KernelHyperparams(
        log_lengthscales=tuple(np.log(lengthscales).tolist()),
        log_signal_variance=float(np.log(signal)),
        log_noise_variance=float(np.log(noise)),
        theta=tuple(0.1 * np.ones(len(structure.parameter_names))),
    )


def finite_differences(dataset: TrajectoryDataset) -> np.ndarray:
    """Get forward differences of the states divided by the time steps."""
    if dataset.size < 2:
        return np.zeros((0, dataset.state_dim))
    return np.diff(dataset.states, axis=0) / np.diff(dataset.timestamps)[:, None]


class MsPhsModel(PhsGaussianProcess):
    """The multistep port-Hamiltonian Gaussian process.

    >>> from phsgp.systems import mass_spring
    >>> from phsgp.simulate import generate_dataset
    >>> system = mass_spring()
    >>> dataset = generate_dataset(system, n_samples=20, t_span=(0.0, 4.0), seed=1)
    >>> model = MsPhsModel(dataset, MultistepScheme(order=2), system.structure).assemble()
    >>> model.labels
    36
    """

    def __init__(
        self,
        dataset: TrajectoryDataset,
        scheme: MultistepScheme,
        structure: PhsStructure,
        hyperparameters: KernelHyperparams | None = None,
    ) -> None:
        """Initialize the model.

        :param dataset: The noisy trajectory
        :param scheme: The multistep scheme
        :param structure: The known port-Hamiltonian structure
        :param hyperparameters: The initial hyperparameters. Defaults to
            :func:`default_hyperparameters` on the data.
        """
        if hyperparameters is None:
            hyperparameters = default_hyperparameters(
                dataset.states, finite_differences(dataset), structure
            )
        projection, noise_gram, targets = multistep_observation(dataset, scheme, structure)
        super().__init__(
            dataset.states, projection, noise_gram, targets, structure, hyperparameters
        )
        self.dataset = dataset
        self.scheme = scheme

    @property
    def windows(self) -> int:
        """Get the number of multistep windows."""
        return self.labels // self.state_dim


def assemble_training_cov(model: ProjectedGaussianProcess) -> TrainingCovariance:
    """Get the projected prior Gram and the scaled noise Gram of a model.

    For :class:`MsPhsModel` these are :math:`B_I K_{phs} B_I^\\top` and
    :math:`\\sigma_x^2 A_I A_I^\\top`.
    """
    return model.training_covariance()


def predict_field(model: FieldPosterior, X: np.ndarray) -> FieldPrediction:
    """Predict the drift at a batch of states."""
    return model.predict(X)


def nll(model: ProjectedGaussianProcess) -> float:
    """Calculate the negative log marginal likelihood of a model."""
    return model.nll()


def hamiltonian_posterior(
    model: PhsGaussianProcess, X: np.ndarray, anchors: AnchorHint = None
) -> SurfacePrediction:
    """Predict the anchored Hamiltonian surface at a batch of states."""
    return model.hamiltonian_posterior(anchors).predict(X)


class OptimizerConfig(BaseModel):
    """Settings for maximizing the marginal likelihood with Adam."""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(0.05, gt=0.0)
    iterations: int = Field(200, ge=0)
    seed: int = 0
    init_perturbation: float = Field(
        0.0, ge=0.0, description="Standard deviation of a seeded perturbation of the initial vector"
    )
    lengthscale_ladder: tuple[float, ...] = Field(
        (2.0, 4.0),
        description="Multipliers of the initial lengthscales that give further starting points. "
        "The signal variance is scaled by their squares, keeping the drift scale of the prior.",
    )
    restarts: int = Field(3, ge=1, description="How many of the most promising starts to optimize")
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)

    @field_validator("lengthscale_ladder")
    @classmethod
    def positive_multipliers(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        """Check that every multiplier is positive and finite."""
        if not all(np.isfinite(factor) and factor > 0.0 for factor in v):
            raise ValueError(f"lengthscale multipliers must be positive, got {v}")
        return v


def _objective(model: ProjectedGaussianProcess, vector: np.ndarray) -> tuple[float, np.ndarray]:
    model.set_vector(vector)
    try:
        return model.nll_and_gradient()
    except FactorizationError as e:
        logger.debug("objective undefined: %s", e)
        return float("nan"), np.full(vector.shape, np.nan)


def _finite(value: float, gradient: np.ndarray) -> bool:
    return bool(np.isfinite(value) and np.all(np.isfinite(gradient)))


def scaled_start(names: Sequence[str], vector: np.ndarray, factor: float) -> np.ndarray:
    """Multiply every lengthscale by ``factor`` and every signal variance by its square.

    >>> scaled_start(["log_lengthscale_1", "log_signal_variance", "log_noise_variance"], np.zeros(3), np.e)
    array([1., 2., 0.])
    """
    shift = np.log(factor)
    rv = np.array(vector, dtype=float)
    for index, name in enumerate(names):
        if name.startswith("log_lengthscale"):
            rv[index] += shift
        elif name.startswith("log_signal_variance"):
            rv[index] += 2.0 * shift
    return rv


def _adam(
    model: ProjectedGaussianProcess,
    vector: np.ndarray,
    value: float,
    gradient: np.ndarray,
    config: OptimizerConfig,
) -> tuple[np.ndarray, float]:
    names = model.parameter_names
    noise_index = names.index("log_noise_variance")
    best_vector, best_value = vector.copy(), value
    learning_rate = config.learning_rate
    first = np.zeros_like(vector)
    second = np.zeros_like(vector)
    for iteration in range(1, config.iterations + 1):
        first = config.beta1 * first + (1.0 - config.beta1) * gradient
        second = config.beta2 * second + (1.0 - config.beta2) * gradient**2
        first_hat = first / (1.0 - config.beta1**iteration)
        second_hat = second / (1.0 - config.beta2**iteration)
        vector = vector - learning_rate * first_hat / (np.sqrt(second_hat) + config.epsilon)
        vector[noise_index] = max(vector[noise_index], LOG_NOISE_FLOOR)

        value, gradient = _objective(model, vector)
        if not _finite(value, gradient):
            learning_rate /= 2.0
            logger.warning(
                "non-finite objective at iteration %d, restarting from the best iterate "
                "with learning rate %.3g",
                iteration,
                learning_rate,
            )
            vector = best_vector.copy()
            value, gradient = _objective(model, vector)
            first[:] = 0.0
            second[:] = 0.0
            continue
        if value < best_value:
            best_vector, best_value = vector.copy(), value
        if iteration % 50 == 0:
            logger.debug("iteration %d: nll=%.6g best=%.6g", iteration, value, best_value)
    return best_vector, best_value


def fit(
    model: ProjectedGaussianProcess, config: OptimizerConfig | None = None
) -> np.ndarray:
    """Minimize the negative log marginal likelihood with Adam from several starts.

    Gradient observations only pin the ratio of the signal standard deviation to
    the lengthscales, so the likelihood often has one basin per lengthscale
    regime. Besides the model's current hyperparameters, every multiplier in
    ``config.lengthscale_ladder`` gives a start with longer lengthscales and a
    proportionally larger signal variance. The ``config.restarts`` starts with the
    lowest initial objective are optimized and the overall best iterate is kept.
    Within a run, iterations that produce a non-finite objective are rolled back
    to the best iterate of that run with the learning rate halved. On return,
    the model holds the best hyperparameters and is assembled.

    :param model: The model to fit in place
    :param config: The optimizer settings
    :returns: The best hyperparameter vector, ordered like ``model.parameter_names``
    :raises NonFiniteObjectiveError: If the objective isn't finite at the initial
        hyperparameters
    """
    if config is None:
        config = OptimizerConfig()
    names = model.parameter_names
    vector = model.get_vector()
    if config.init_perturbation > 0.0:
        rng = np.random.default_rng(config.seed)
        vector = vector + config.init_perturbation * rng.standard_normal(vector.shape)

    value, gradient = _objective(model, vector)
    if not _finite(value, gradient):
        offending = [
            name
            for name, v, g in zip(names, vector, gradient, strict=True)
            if not (np.isfinite(v) and np.isfinite(g))
        ]
        raise NonFiniteObjectiveError(offending or names, value)

    starts = [(value, vector, gradient)]
    for factor in config.lengthscale_ladder:
        start = scaled_start(names, vector, factor)
        start_value, start_gradient = _objective(model, start)
        if _finite(start_value, start_gradient):
            starts.append((start_value, start, start_gradient))
        else:
            logger.debug("dropping the start with lengthscales scaled by %g", factor)
    starts.sort(key=lambda start: start[0])

    best_vector, best_value = vector, value
    for index, (start_value, start, start_gradient) in enumerate(starts[: config.restarts]):
        candidate, candidate_value = _adam(model, start, start_value, start_gradient, config)
        logger.debug("start %d: nll %.6g -> %.6g", index, start_value, candidate_value)
        if candidate_value < best_value:
            best_vector, best_value = candidate, candidate_value

    model.set_vector(best_vector)
    model.assemble()
    return best_vector


def field_from_surface_check(
    model: PhsGaussianProcess, anchors: AnchorHint, axes: Sequence[np.ndarray]
) -> float:
    """Compare the gradient of the surface posterior mean with the field posterior mean.

    The surface mean is differenced with :func:`numpy.gradient` on the regular mesh
    spanned by ``axes``, mapped through :math:`J - R`, and compared to the field mean
    at interior mesh points.

    :param model: An assembled port-Hamiltonian model
    :param anchors: The anchors of the surface posterior
    :param axes: One increasing coordinate vector per state dimension
    :returns: The largest deviation norm divided by the largest field mean norm.
        Zero when the model has no labels.
    :raises MeshError: If any axis has fewer than three points
    """
    shape = [len(axis) for axis in axes]
    if len(shape) != model.state_dim or min(shape) < 3:
        raise MeshError(shape)
    if model.labels == 0:
        return 0.0
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack([grid.ravel() for grid in grids], axis=1)
    surface = model.hamiltonian_posterior(anchors).mean(points).reshape(shape)
    gradient = np.stack(np.gradient(surface, *axes), axis=-1)

    interior = tuple(slice(1, -1) for _ in shape)
    interior_points = np.stack([grid[interior].ravel() for grid in grids], axis=1)
    interior_gradient = gradient[interior].reshape(-1, model.state_dim)
    mapped = np.einsum("kij,kj->ki", model._jr(interior_points), interior_gradient)
    field = model.mean(interior_points)
    scale = float(np.max(np.linalg.norm(field, axis=1)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.linalg.norm(mapped - field, axis=1)) / scale)


class AnchorDocument(BaseModel):
    """A serialized anchor."""

    point: list[float]
    value: float


class ModelDocument(BaseModel):
    """A fitted model with enough context to rebuild it from its dataset file."""

    method: str = Field(..., description="The method id, e.g., ms-phs-ab-3")
    system: str | None = Field(None, description="The benchmark system id providing the structure")
    parameters: dict[str, float] = Field(..., description="Hyperparameters by name, in vector order")
    anchors: list[AnchorDocument] = Field(default_factory=list)
    dataset_fingerprint: str = Field(..., description="SHA-256 of the dataset file")
    options: dict[str, Any] = Field(default_factory=dict, description="Method-specific settings")

    @classmethod
    def from_model(
        cls,
        model: ProjectedGaussianProcess,
        *,
        method: str,
        dataset_fingerprint: str,
        system: str | None = None,
        anchors: Iterable[Anchor] = (),
        options: Mapping[str, Any] | None = None,
    ) -> Self:
        """Describe a fitted model."""
        return cls(
            method=method,
            system=system,
            parameters=dict(zip(model.parameter_names, model.get_vector().tolist(), strict=True)),
            anchors=[
                AnchorDocument(point=np.asarray(a.point).tolist(), value=float(a.value))
                for a in anchors
            ],
            dataset_fingerprint=dataset_fingerprint,
            options=dict(options or {}),
        )

    def get_anchors(self) -> list[Anchor]:
        """Get the anchors as arrays."""
        return [Anchor(np.array(a.point), a.value) for a in self.anchors]

    def get_vector(self) -> np.ndarray:
        """Get the hyperparameter vector."""
        return np.array(list(self.parameters.values()))


def write_model(document: ModelDocument, path: str | Path) -> None:
    """Write a model document as JSON."""
    path = Path(path).expanduser().resolve()
    path.write_text(json.dumps(document.model_dump(), indent=2) + "\n")


def read_model(path: str | Path) -> ModelDocument:
    """Read a model document written by :func:`write_model`."""
    path = Path(path).expanduser().resolve()
    return ModelDocument.model_validate_json(path.read_text())
