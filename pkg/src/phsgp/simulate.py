"""Ground-truth trajectories, jittered sampling times and noisy observations.

A benchmark dataset is produced in three steps:

1. :func:`rk4_integrate` solves the true dynamics on a fine fixed-step grid,
   storing the state derivative at every grid point,
2. :func:`jittered_timestamps` draws irregular observation times, and
3. :func:`observe` interpolates the dense solution at those times with a cubic
   Hermite spline and adds Gaussian state noise.

:func:`generate_dataset` chains the three for a :class:`phsgp.systems.BenchmarkSystem`.
Datasets round-trip through a small CSV format with :func:`write_dataset` and
:func:`read_dataset`.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable
from pathlib import Path
from typing import TYPE_CHECKING, NamedTuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import CubicHermiteSpline
from typing_extensions import Self, TypeAlias

if TYPE_CHECKING:
    from .systems import BenchmarkSystem

__all__ = [
    "DEFAULT_STEP",
    "DenseTrajectory",
    "NonFiniteStateError",
    "TimestampRangeError",
    "TrajectoryDataset",
    "dataset_fingerprint",
    "generate_dataset",
    "jittered_timestamps",
    "observe",
    "read_dataset",
    "rk4_integrate",
    "simulate_system",
    "write_dataset",
]

logger = logging.getLogger(__name__)

#: The default ground-truth integration step, in seconds
DEFAULT_STEP = 4e-3

SeedLike: TypeAlias = Union[int, np.random.SeedSequence]
VectorField: TypeAlias = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
InputSignal: TypeAlias = Callable[[float], np.ndarray]


class NonFiniteStateError(ArithmeticError):
    """An error raised when the integrator produces a non-finite state."""

    def __init__(self, step: int, time: float) -> None:
        """Initialize the error.

        :param step: The index of the integration step that produced the state
        :param time: The time at the end of that step
        """
        self.step = step
        self.time = time

    def __str__(self) -> str:
        return f"non-finite state at integration step {self.step} (t={self.time:g})"


class TimestampRangeError(ValueError):
    """An error raised when observation times fall outside a dense trajectory."""

    def __init__(self, start: float, end: float, offending: list[float]) -> None:
        """Initialize the error.

        :param start: The first time of the dense trajectory
        :param end: The last time of the dense trajectory
        :param offending: The timestamps outside of ``[start, end]``
        """
        self.start = start
        self.end = end
        self.offending = offending

    def __str__(self) -> str:
        preview = ", ".join(f"{t:g}" for t in self.offending[:5])
        return (
            f"{len(self.offending)} timestamp(s) outside of [{self.start:g}, {self.end:g}]: {preview}"
        )


class DenseTrajectory(NamedTuple):
    """A finely sampled solution with the derivative at every sample."""

    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    input_signal: InputSignal | None

    def inputs(self, times: np.ndarray) -> np.ndarray:
        """Evaluate the input signal at the given times as a ``(K, m)`` array."""
        times = np.asarray(times, dtype=float)
        if self.input_signal is None:
            return np.zeros((times.size, 0))
        return np.array([np.atleast_1d(self.input_signal(float(t))) for t in times]).reshape(
            times.size, -1
        )


def _input_at(input_signal: InputSignal | None, t: float) -> np.ndarray:
    if input_signal is None:
        return np.zeros(0)
    return np.atleast_1d(np.asarray(input_signal(t), dtype=float))


def rk4_integrate(
    field: VectorField,
    x0: np.ndarray,
    t_grid: np.ndarray,
    input_signal: InputSignal | None = None,
) -> DenseTrajectory:
    """Integrate an ODE with the classical fourth-order Runge-Kutta method.

    :param field: Maps ``(x, u, t)`` to the time derivative of ``x``
    :param x0: The state at ``t_grid[0]``
    :param t_grid: Increasing integration times, usually evenly spaced
    :param input_signal: Maps a time to the input vector. The input is evaluated
        at the intermediate stage times of each step.
    :returns: The states and derivatives at every grid time
    :raises ValueError: If the grid is not strictly increasing
    :raises NonFiniteStateError: If a state stops being finite

    >>> import numpy as np
    >>> rv = rk4_integrate(lambda x, u, t: -x, np.array([1.0]), np.array([0.0, 0.1]))
    >>> round(float(rv.states[-1, 0]), 10)
    0.9048375
    """
    t_grid = np.asarray(t_grid, dtype=float)
    steps = np.diff(t_grid)
    if t_grid.ndim != 1 or t_grid.size < 1 or np.any(steps <= 0.0):
        raise ValueError("integration grid must be a strictly increasing vector")

    states = np.empty((t_grid.size, np.size(x0)))
    derivatives = np.empty_like(states)
    states[0] = np.asarray(x0, dtype=float)
    for index, (t, h) in enumerate(zip(t_grid[:-1], steps, strict=True)):
        x = states[index]
        u_start = _input_at(input_signal, t)
        u_mid = _input_at(input_signal, t + h / 2.0)
        k1 = field(x, u_start, t)
        k2 = field(x + h * k1 / 2.0, u_mid, t + h / 2.0)
        k3 = field(x + h * k2 / 2.0, u_mid, t + h / 2.0)
        k4 = field(x + h * k3, _input_at(input_signal, t + h), t + h)
        derivatives[index] = k1
        states[index + 1] = x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not np.all(np.isfinite(states[index + 1])):
            raise NonFiniteStateError(index + 1, float(t + h))
    derivatives[-1] = field(states[-1], _input_at(input_signal, t_grid[-1]), t_grid[-1])
    return DenseTrajectory(t_grid, states, derivatives, input_signal)


def jittered_timestamps(
    t0: float, t1: float, n: int, sigma_j: float, seed: SeedLike
) -> np.ndarray:
    """Draw strictly increasing observation times around a uniform grid.

    Gaussian jitter with standard deviation ``sigma_j`` is added to a uniform grid
    of ``n`` points on ``[t0, t1]``, the result is clipped to the interval and
    sorted. Ties created by clipping are broken by the smallest representable
    increments, so the output is strictly increasing.

    :param t0: The start of the observation window
    :param t1: The end of the observation window
    :param n: The number of observations
    :param sigma_j: The jitter standard deviation, in seconds
    :param seed: The seed for the jitter
    :returns: A length ``n`` vector
    :raises ValueError: If ``n < 2``, ``sigma_j < 0`` or ``t1 <= t0``
    """
    if n < 2 or sigma_j < 0.0 or not t1 > t0:
        raise ValueError(f"invalid sampling request: n={n}, sigma_j={sigma_j}, span=({t0}, {t1})")
    grid = np.linspace(t0, t1, n)
    if sigma_j == 0.0:
        return grid
    rng = np.random.default_rng(seed)
    rv = np.sort(np.clip(grid + rng.normal(0.0, sigma_j, size=n), t0, t1))
    for i in range(1, n):
        if rv[i] <= rv[i - 1]:
            rv[i] = np.nextafter(rv[i - 1], np.inf)
    if rv[-1] > t1:
        rv[-1] = t1
        for i in range(n - 2, -1, -1):
            if rv[i] >= rv[i + 1]:
                rv[i] = np.nextafter(rv[i + 1], -np.inf)
    return rv


class TrajectoryDataset(BaseModel):
    """Noisy state observations at irregular times, with the inputs applied at those times."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    timestamps: np.ndarray = Field(..., description="Strictly increasing observation times (s)")
    states: np.ndarray = Field(..., description="A (K, n) matrix of noisy state observations")
    inputs: np.ndarray = Field(..., description="A (K, m) matrix of noiseless inputs")
    noise_variance: float = Field(..., ge=0.0, description="The observation noise variance")
    seed: int = Field(0, description="The seed the observations were generated with")

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        """Check that timestamps increase and that all arrays have one row per timestamp."""
        timestamps = self.timestamps
        if timestamps.ndim != 1:
            raise ValueError("timestamps must be a vector")
        if np.any(np.diff(timestamps) <= 0.0):
            raise ValueError("timestamps must be strictly increasing")
        if self.states.ndim != 2 or self.states.shape[0] != timestamps.size:
            raise ValueError(f"states have shape {self.states.shape} for {timestamps.size} timestamps")
        if self.inputs.ndim != 2 or self.inputs.shape[0] != timestamps.size:
            raise ValueError(f"inputs have shape {self.inputs.shape} for {timestamps.size} timestamps")
        return self

    @property
    def size(self) -> int:
        """Get the number of observations."""
        return int(self.timestamps.size)

    @property
    def state_dim(self) -> int:
        """Get the state dimension."""
        return int(self.states.shape[1])

    @property
    def input_dim(self) -> int:
        """Get the input dimension."""
        return int(self.inputs.shape[1])

    def head(self, size: int) -> TrajectoryDataset:
        """Get a dataset with only the first observations."""
        return TrajectoryDataset(
            timestamps=self.timestamps[:size],
            states=self.states[:size],
            inputs=self.inputs[:size],
            noise_variance=self.noise_variance,
            seed=self.seed,
        )


def observe(
    trajectory: DenseTrajectory, timestamps: np.ndarray, sigma_x: float, seed: SeedLike
) -> TrajectoryDataset:
    """Sample a dense trajectory at observation times and add Gaussian state noise.

    :param trajectory: A dense solution from :func:`rk4_integrate`
    :param timestamps: Strictly increasing observation times within the trajectory's span
    :param sigma_x: The noise standard deviation
    :param seed: The seed for the noise
    :returns: A dataset with noise variance ``sigma_x ** 2``
    :raises TimestampRangeError: If any timestamp is outside the dense trajectory
    """
    timestamps = np.asarray(timestamps, dtype=float)
    start, end = float(trajectory.times[0]), float(trajectory.times[-1])
    outside = timestamps[(timestamps < start) | (timestamps > end)]
    if outside.size:
        raise TimestampRangeError(start, end, outside.tolist())

    spline = CubicHermiteSpline(trajectory.times, trajectory.states, trajectory.derivatives, axis=0)
    truth = spline(timestamps)
    rng = np.random.default_rng(seed)
    states = truth + sigma_x * rng.standard_normal(truth.shape)
    return TrajectoryDataset(
        timestamps=timestamps,
        states=states,
        inputs=trajectory.inputs(timestamps),
        noise_variance=float(sigma_x) ** 2,
        seed=seed if isinstance(seed, int) else 0,
    )


def simulate_system(
    system: BenchmarkSystem,
    t_span: tuple[float, float] = (0.0, 20.0),
    step: float = DEFAULT_STEP,
) -> DenseTrajectory:
    """Integrate a benchmark system from its initial state with fixed-step RK4.

    :param system: The benchmark system
    :param t_span: The start and end of the simulation
    :param step: The nominal integration step. The grid is evenly spaced with a
        step no larger than this.
    :returns: The dense ground-truth trajectory
    """
    t0, t1 = t_span
    count = int(np.ceil((t1 - t0) / step - 1e-9))
    grid = np.linspace(t0, t1, count + 1)
    logger.debug("integrating %s on %d steps of %.3g s", system.name, count, grid[1] - grid[0])
    return rk4_integrate(
        lambda x, u, t: system.true_field(x, u),
        system.initial_state,
        grid,
        system.input_signal,
    )


def generate_dataset(
    system: BenchmarkSystem,
    *,
    n_samples: int = 100,
    t_span: tuple[float, float] = (0.0, 20.0),
    noise_variance: float = 1e-4,
    jitter: float = 0.0,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    trajectory: DenseTrajectory | None = None,
) -> TrajectoryDataset:
    """Simulate a benchmark and observe it at jittered times.

    :param system: The benchmark system
    :param n_samples: The number of observations
    :param t_span: The observation window, also the simulation window
    :param noise_variance: The state noise variance
    :param jitter: The timestamp jitter standard deviation
    :param seed: Seeds the timestamps and the noise through independent child streams
    :param step: The RK4 step
    :param trajectory: A precomputed dense trajectory to sample instead of simulating
    :returns: The dataset
    """
    if trajectory is None:
        trajectory = simulate_system(system, t_span, step)
    time_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    timestamps = jittered_timestamps(t_span[0], t_span[1], n_samples, jitter, time_seed)
    dataset = observe(trajectory, timestamps, float(np.sqrt(noise_variance)), noise_seed)
    return dataset.model_copy(update={"seed": seed})


def _columns(state_dim: int, input_dim: int) -> list[str]:
    return (
        ["t"]
        + [f"x{i + 1}" for i in range(state_dim)]
        + [f"u{i + 1}" for i in range(input_dim)]
    )


def write_dataset(dataset: TrajectoryDataset, path: str | Path) -> None:
    """Write a dataset as CSV with its noise variance and seed in leading comment lines.

    Values are written with 17 significant digits so they parse back bit-exactly.
    """
    path = Path(path).expanduser().resolve()
    frame = pd.DataFrame(
        np.column_stack([dataset.timestamps, dataset.states, dataset.inputs]),
        columns=_columns(dataset.state_dim, dataset.input_dim),
    )
    with path.open("w") as file:
        file.write(f"# noise_variance: {dataset.noise_variance!r}\n")
        file.write(f"# seed: {dataset.seed}\n")
        frame.to_csv(file, index=False, float_format="%.17g", lineterminator="\n")


def read_dataset(path: str | Path) -> TrajectoryDataset:
    """Read a dataset written by :func:`write_dataset`."""
    path = Path(path).expanduser().resolve()
    metadata: dict[str, str] = {}
    with path.open() as file:
        for line in file:
            if not line.startswith("#"):
                break
            key, _, value = line.lstrip("#").partition(":")
            metadata[key.strip()] = value.strip()
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    state_columns = [c for c in frame.columns if c.startswith("x")]
    input_columns = [c for c in frame.columns if c.startswith("u")]
    return TrajectoryDataset(
        timestamps=frame["t"].to_numpy(dtype=float),
        states=frame[state_columns].to_numpy(dtype=float),
        inputs=frame[input_columns].to_numpy(dtype=float).reshape(len(frame), len(input_columns)),
        noise_variance=float(metadata.get("noise_variance", "0")),
        seed=int(metadata.get("seed", "0")),
    )


def dataset_fingerprint(path: str | Path) -> str:
    """Get the SHA-256 hex digest of a dataset file."""
    return hashlib.sha256(Path(path).expanduser().resolve().read_bytes()).hexdigest()
