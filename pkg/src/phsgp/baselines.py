"""Comparison methods: a multistep GP without the port-Hamiltonian prior and derivative prefiltering.

* :class:`MsOdeModel` uses the same multistep projection as
  :class:`phsgp.inference.MsPhsModel` but places independent squared exponential
  priors on each component of the drift.
* :func:`loess_smooth` and :func:`savgol_smooth` estimate time derivatives from
  the noisy states, which :class:`GpPhsModel` then regresses with the
  port-Hamiltonian kernel as if they were noisy drift observations.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.signal import savgol_filter
from typing_extensions import Self

from .inference import (
    Anchor,
    AnchoredSurface,
    KernelHyperparams,
    OptimizerConfig,
    PhsGaussianProcess,
    ProjectedGaussianProcess,
    default_hyperparameters,
    finite_differences,
    fit,
    multistep_observation,
)
from .kernels import ArdKernelParams, base_gram
from .multistep import MultistepScheme
from .simulate import TrajectoryDataset
from .systems import PhsStructure

__all__ = [
    "DEFAULT_LOESS_SPAN",
    "DEFAULT_SAVGOL_WINDOW",
    "DerivativeEstimate",
    "GpPhsModel",
    "IrregularGridError",
    "MsOdeModel",
    "SmootherError",
    "gp_phs_fit_predict",
    "loess_smooth",
    "ms_ode_fit_predict",
    "savgol_smooth",
]

logger = logging.getLogger(__name__)

#: The default LOESS neighborhood, as a fraction of the observations
DEFAULT_LOESS_SPAN = 0.15

#: The default Savitzky-Golay window length, in samples
DEFAULT_SAVGOL_WINDOW = 11

#: Largest relative step deviation for a grid to count as regular
REGULAR_GRID_TOLERANCE = 1e-9


class IrregularGridError(ValueError):
    """An error raised when Savitzky-Golay filtering is requested on an irregular time grid."""

    def __init__(self, deviation: float) -> None:
        """Initialize the error.

        :param deviation: The largest relative deviation of a step from the mean step
        """
        self.deviation = deviation

    def __str__(self) -> str:
        return (
            f"Savitzky-Golay filtering needs a regular grid, but steps deviate by up to "
            f"{self.deviation:.3g} relative to the mean. Use loess_smooth for irregular sampling."
        )


class SmootherError(ValueError):
    """An error raised on invalid smoother settings or a degenerate local fit."""


class DerivativeEstimate(BaseModel):
    """Smoothed states and derivatives at the observation times."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    timestamps: np.ndarray
    states: np.ndarray = Field(..., description="A (K, n) matrix of smoothed states")
    derivatives: np.ndarray = Field(..., description="A (K, n) matrix of estimated derivatives")
    inputs: np.ndarray = Field(..., description="A (K, m) matrix of inputs at the observation times")
    smoother: Literal["loess", "savgol"]
    degree: int = Field(..., ge=1)
    span: float | None = Field(None, description="The LOESS neighborhood fraction")
    window: int | None = Field(None, description="The Savitzky-Golay window length")

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        """Check that all arrays have one row per timestamp."""
        size = self.timestamps.size
        for name in ("states", "derivatives", "inputs"):
            value = getattr(self, name)
            if value.ndim != 2 or value.shape[0] != size:
                raise ValueError(f"{name} has shape {value.shape} for {size} timestamps")
        return self

    @property
    def size(self) -> int:
        """Get the number of observations."""
        return int(self.timestamps.size)


def loess_smooth(
    dataset: TrajectoryDataset, span: float = DEFAULT_LOESS_SPAN, degree: int = 2
) -> DerivativeEstimate:
    """Estimate states and derivatives with locally weighted polynomial regression.

    At each observation time, a polynomial in the time offset is fit by weighted
    least squares to the ``ceil(span * K)`` nearest observations with tricube
    weights. The constant coefficient is the smoothed state and the linear
    coefficient is the derivative. Irregular grids are handled natively.

    :param dataset: The noisy trajectory
    :param span: The fraction of observations in each neighborhood
    :param degree: The local polynomial degree
    :returns: The derivative estimate
    :raises SmootherError: If the neighborhood is too small for the degree or a
        local fit is degenerate
    """
    size = dataset.size
    neighbors = int(np.ceil(span * size))
    if degree < 1 or neighbors < degree + 2:
        raise SmootherError(
            f"span {span} gives {neighbors} neighbors of {size}, need at least {degree + 2} "
            f"for degree {degree}"
        )
    neighbors = min(neighbors, size)
    times = dataset.timestamps
    states = np.empty_like(dataset.states)
    derivatives = np.empty_like(dataset.states)
    for k, t in enumerate(times):
        offsets = times - t
        distances = np.abs(offsets)
        order = np.argsort(distances, kind="stable")[:neighbors]
        bandwidth = distances[order[-1]]
        if bandwidth <= 0.0:
            raise SmootherError(f"all neighbors of t={t:g} coincide")
        # tricube on a slightly widened window so the farthest neighbor keeps a positive weight
        scaled = np.clip(distances[order] / (bandwidth * (1.0 + 1e-6)), 0.0, 1.0)
        root_weights = np.sqrt((1.0 - scaled**3) ** 3)
        design = np.vander(offsets[order], degree + 1, increasing=True)
        coefficients, _, rank, _ = np.linalg.lstsq(
            root_weights[:, None] * design,
            root_weights[:, None] * dataset.states[order],
            rcond=None,
        )
        if rank < degree + 1:
            raise SmootherError(f"degenerate local fit at t={t:g} (rank {rank})")
        states[k] = coefficients[0]
        derivatives[k] = coefficients[1]
    return DerivativeEstimate(
        timestamps=times,
        states=states,
        derivatives=derivatives,
        inputs=dataset.inputs,
        smoother="loess",
        degree=degree,
        span=span,
    )


def savgol_smooth(
    dataset: TrajectoryDataset, window: int = DEFAULT_SAVGOL_WINDOW, degree: int = 3
) -> DerivativeEstimate:
    """Estimate states and derivatives with a Savitzky-Golay filter on a regular grid.

    :param dataset: The noisy trajectory, sampled on a regular grid
    :param window: The odd filter length
    :param degree: The polynomial degree
    :returns: The derivative estimate
    :raises IrregularGridError: If the steps aren't all equal
    :raises SmootherError: If the window is even, not longer than the degree, or
        longer than the trajectory
    """
    if window % 2 == 0 or window <= degree or window > dataset.size:
        raise SmootherError(
            f"window must be odd, longer than the degree {degree} and at most the "
            f"{dataset.size} observations, got {window}"
        )
    steps = np.diff(dataset.timestamps)
    step = float(np.mean(steps))
    deviation = float(np.max(np.abs(steps - step)) / step)
    if deviation > REGULAR_GRID_TOLERANCE:
        raise IrregularGridError(deviation)
    return DerivativeEstimate(
        timestamps=dataset.timestamps,
        states=savgol_filter(dataset.states, window, degree, axis=0, mode="interp"),
        derivatives=savgol_filter(
            dataset.states, window, degree, deriv=1, delta=step, axis=0, mode="interp"
        ),
        inputs=dataset.inputs,
        smoother="savgol",
        degree=degree,
        window=window,
    )


class MsOdeModel(ProjectedGaussianProcess):
    """A multistep Gaussian process with independent squared exponential priors per component."""

    def __init__(
        self,
        dataset: TrajectoryDataset,
        scheme: MultistepScheme,
        structure: PhsStructure,
        kernels: Sequence[ArdKernelParams] | None = None,
        log_noise_variance: float | None = None,
    ) -> None:
        """Initialize the model.

        :param dataset: The noisy trajectory
        :param scheme: The multistep scheme
        :param structure: Only its input matrix is used, to remove the known input contribution
        :param kernels: One kernel per state component. Defaults to data-driven scales.
        :param log_noise_variance: The initial log noise variance
        """
        n = dataset.state_dim
        if kernels is None or log_noise_variance is None:
            defaults = _default_component_kernels(dataset)
            kernels = defaults[0] if kernels is None else kernels
            log_noise_variance = defaults[1] if log_noise_variance is None else log_noise_variance
        if len(kernels) != n or any(kernel.dim != n for kernel in kernels):
            raise ValueError(f"need {n} kernels over {n} dimensions")
        projection, noise_gram, targets = multistep_observation(dataset, scheme, structure)
        super().__init__(dataset.states, projection, noise_gram, targets, log_noise_variance)
        self.kernels = list(kernels)
        self.dataset = dataset
        self.scheme = scheme
        self.structure = structure

    @property
    def parameter_names(self) -> list[str]:
        """Get the names of the hyperparameters."""
        n = self.state_dim
        rv = []
        for i in range(n):
            rv.extend(f"log_lengthscale_{i + 1}_{d + 1}" for d in range(n))
            rv.append(f"log_signal_variance_{i + 1}")
        rv.append("log_noise_variance")
        return rv

    def _get_prior_vector(self) -> dict[str, float]:
        rv = {}
        for i, kernel in enumerate(self.kernels):
            for d, value in enumerate(kernel.log_lengthscales):
                rv[f"log_lengthscale_{i + 1}_{d + 1}"] = value
            rv[f"log_signal_variance_{i + 1}"] = kernel.log_signal_variance
        return rv

    def _set_prior_vector(self, values: Mapping[str, float]) -> None:
        n = self.state_dim
        self.kernels = [
            ArdKernelParams(
                log_lengthscales=tuple(values[f"log_lengthscale_{i + 1}_{d + 1}"] for d in range(n)),
                log_signal_variance=values[f"log_signal_variance_{i + 1}"],
            )
            for i in range(n)
        ]

    def _component_gram(self, X: np.ndarray, X2: np.ndarray, component: int) -> np.ndarray:
        """Get the prior covariance of one drift component between two batches of states."""
        kernel = self.kernels[component]
        return kernel.signal_variance * base_gram(X, X2, kernel)

    def _block_diagonal(self, X: np.ndarray, X2: np.ndarray) -> np.ndarray:
        n = self.state_dim
        rv = np.zeros((X.shape[0], n, X2.shape[0], n))
        for i in range(n):
            rv[:, i, :, i] = self._component_gram(X, X2, i)
        return rv.reshape(X.shape[0] * n, X2.shape[0] * n)

    def prior_gram(self) -> np.ndarray:
        """Get the block-diagonal prior covariance at the states."""
        return self._block_diagonal(self.states, self.states)

    def prior_gram_gradients(self) -> dict[str, np.ndarray]:
        """Differentiate the prior covariance with respect to each component's parameters."""
        X, n = self.states, self.state_dim
        differences = X[:, None, :] - X[None, :, :]
        rv = {}
        for i, kernel in enumerate(self.kernels):
            gram = kernel.signal_variance * base_gram(X, X, kernel)
            rv[f"log_signal_variance_{i + 1}"] = self._embed(gram, i)
            for d in range(n):
                scaled = differences[..., d] ** 2 / kernel.lengthscales[d] ** 2
                rv[f"log_lengthscale_{i + 1}_{d + 1}"] = self._embed(gram * scaled, i)
        return rv

    def _embed(self, block: np.ndarray, component: int) -> np.ndarray:
        n = self.state_dim
        rv = np.zeros((block.shape[0], n, block.shape[1], n))
        rv[:, component, :, component] = block
        return rv.reshape(block.shape[0] * n, block.shape[1] * n)

    def prior_cross(self, X: np.ndarray) -> np.ndarray:
        """Get the prior covariance between the field at the states and at ``X``."""
        return self._block_diagonal(self.states, X)

    def prior_blocks(self, X: np.ndarray) -> np.ndarray:
        """Get the diagonal prior covariance of the field at each state."""
        n = self.state_dim
        rv = np.zeros((X.shape[0], n, n))
        for i in range(n):
            rv[:, i, i] = np.diagonal(self._component_gram(X, X, i))
        return rv


def _default_component_kernels(dataset: TrajectoryDataset) -> tuple[list[ArdKernelParams], float]:
    n = dataset.state_dim
    derivatives = finite_differences(dataset)
    if dataset.size > 1:
        lengthscales = np.std(dataset.states, axis=0)
    else:
        lengthscales = np.ones(n)
    lengthscales = np.where(lengthscales > 0.0, lengthscales, 1.0)
    if len(derivatives) > 1:
        signals = np.var(derivatives, axis=0)
    else:
        signals = np.ones(n)
    signals = np.where(signals > 0.0, signals, 1.0)
    noise = 1e-2 * float(np.mean(lengthscales**2))
    kernels = [ArdKernelParams.from_raw(lengthscales, float(signal)) for signal in signals]
    return kernels, float(np.log(noise))


def ms_ode_fit_predict(
    dataset: TrajectoryDataset,
    scheme: MultistepScheme,
    structure: PhsStructure,
    kernels: Sequence[ArdKernelParams] | None = None,
    config: OptimizerConfig | None = None,
) -> MsOdeModel:
    """Fit the componentwise multistep Gaussian process and return it as a field posterior.

    :param dataset: The noisy trajectory
    :param scheme: The multistep scheme
    :param structure: Provides the input matrix
    :param kernels: Initial kernels per component
    :param config: The optimizer settings. Pass zero iterations to skip fitting.
    :returns: The fitted, assembled model
    """
    model = MsOdeModel(dataset, scheme, structure, kernels)
    fit(model, config)
    return model


class GpPhsModel(PhsGaussianProcess):
    """Port-Hamiltonian regression on prefiltered derivatives with homoscedastic label noise."""

    def __init__(
        self,
        estimate: DerivativeEstimate,
        structure: PhsStructure,
        hyperparameters: KernelHyperparams | None = None,
    ) -> None:
        """Initialize the model.

        :param estimate: The smoothed states and derivatives
        :param structure: The known port-Hamiltonian structure
        :param hyperparameters: The initial hyperparameters
        """
        if hyperparameters is None:
            hyperparameters = default_hyperparameters(
                estimate.states, estimate.derivatives, structure
            )
        forcing = structure.input_contribution(estimate.states, estimate.inputs)
        targets = (estimate.derivatives - forcing).ravel()
        identity = np.eye(targets.size)
        super().__init__(estimate.states, identity, identity, targets, structure, hyperparameters)
        self.estimate = estimate


def gp_phs_fit_predict(
    estimate: DerivativeEstimate,
    structure: PhsStructure,
    hyperparameters: KernelHyperparams | None = None,
    config: OptimizerConfig | None = None,
    anchors: Anchor | Sequence[Anchor] | None = None,
) -> tuple[GpPhsModel, AnchoredSurface]:
    """Fit port-Hamiltonian regression on derivative estimates.

    :param estimate: The smoothed states and derivatives
    :param structure: The known port-Hamiltonian structure
    :param hyperparameters: The initial hyperparameters
    :param config: The optimizer settings
    :param anchors: The Hamiltonian anchors. Defaults to :math:`H(0) = 0`.
    :returns: The fitted model, which is the field posterior, and the anchored surface
    """
    model = GpPhsModel(estimate, structure, hyperparameters)
    fit(model, config)
    return model, model.hamiltonian_posterior(anchors)
