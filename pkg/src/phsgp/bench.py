"""Benchmark sweeps over systems, methods, noise levels, jitter levels and seeds.

A sweep is configured with an :class:`ExperimentConfig`, usually loaded from JSON,
and writes into a results directory:

``runs.jsonl``
    one :class:`RunResult` per line, appended as runs finish. Rerunning a sweep
    skips every (cell, seed) already present.
``meshes/<run key>.csv``
    the field and surface predictions of each successful run on its evaluation mesh.

:func:`report` turns a results directory into summary tables and per-cell median
mesh dumps for external plotting.
"""

from __future__ import annotations

import logging
import re
import time
import zlib
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.stats import spearmanr
from tqdm.auto import tqdm

from .baselines import (
    DEFAULT_LOESS_SPAN,
    DEFAULT_SAVGOL_WINDOW,
    GpPhsModel,
    MsOdeModel,
    loess_smooth,
    savgol_smooth,
)
from .inference import (
    Anchor,
    FieldPosterior,
    FieldPrediction,
    HamiltonianPosterior,
    ModelDocument,
    MsPhsModel,
    OptimizerConfig,
    PhsGaussianProcess,
    ProjectedGaussianProcess,
    SurfacePrediction,
    fit,
)
from .multistep import MultistepScheme
from .simulate import (
    DEFAULT_STEP,
    DenseTrajectory,
    TrajectoryDataset,
    dataset_fingerprint,
    generate_dataset,
    read_dataset,
    simulate_system,
)
from .systems import SYSTEMS, BenchmarkSystem

__all__ = [
    "DEFAULT_METHODS",
    "CalibrationSummary",
    "ConfigurationError",
    "DatasetMismatchError",
    "ExperimentConfig",
    "FieldMetrics",
    "Mesh",
    "MeshSpec",
    "MethodSpec",
    "MetricError",
    "RunMetrics",
    "RunResult",
    "SurfaceMetrics",
    "aggregate",
    "build_model",
    "calibration_tracking",
    "eval_mesh",
    "field_metrics",
    "h_metrics",
    "hamiltonian_metrics",
    "load_model",
    "parse_method",
    "read_runs",
    "report",
    "run_one",
    "run_sweep",
    "vf_metrics",
    "write_mesh_dump",
]

logger = logging.getLogger(__name__)

#: The methods compared by default
DEFAULT_METHODS = ("ms-phs-ab-3", "ms-ode-ab-3", "gp-phs-loess-2")

#: Field values with a smaller norm have no direction
ZERO_FIELD_THRESHOLD = 1e-10

#: The per-run metrics that are aggregated
METRICS = ("vf_mse", "vf_cosine_distance", "h_mse", "mean_variance", "ratio", "wall_time")

RUNS_FILE = "runs.jsonl"
MESHES_DIRECTORY = "meshes"
PLOTS_DIRECTORY = "plots"

METHOD_PATTERN = re.compile(
    r"^(?:(?P<multistep>ms-phs|ms-ode)-ab-(?P<order>[123])|gp-phs-(?P<smoother>loess-2|savgol-3))$"
)


class ConfigurationError(ValueError):
    """An error raised on an invalid experiment configuration."""


class MetricError(ValueError):
    """An error raised when a metric or report is undefined for its inputs."""


class DatasetMismatchError(ValueError):
    """An error raised when a model document doesn't belong to the given dataset file."""

    def __init__(self, expected: str, received: str) -> None:
        """Initialize the error.

        :param expected: The fingerprint recorded in the model document
        :param received: The fingerprint of the dataset file
        """
        self.expected = expected
        self.received = received

    def __str__(self) -> str:
        return f"model was fit on dataset {self.expected[:12]}, but got {self.received[:12]}"


class MethodSpec(NamedTuple):
    """A parsed method id."""

    family: Literal["ms-phs", "ms-ode", "gp-phs"]
    order: int | None = None
    smoother: Literal["loess", "savgol"] | None = None

    @property
    def has_surface(self) -> bool:
        """Get whether the method learns a Hamiltonian surface."""
        return self.family != "ms-ode"


def parse_method(method: str) -> MethodSpec:
    """Parse a method id.

    >>> parse_method("ms-phs-ab-3")
    MethodSpec(family='ms-phs', order=3, smoother=None)
    >>> parse_method("gp-phs-savgol-3")
    MethodSpec(family='gp-phs', order=None, smoother='savgol')
    """
    match = METHOD_PATTERN.match(method)
    if match is None:
        raise ConfigurationError(
            f"unknown method {method!r}; expected ms-phs-ab-{{1,2,3}}, ms-ode-ab-{{1,2,3}}, "
            f"gp-phs-loess-2 or gp-phs-savgol-3"
        )
    if match["multistep"]:
        return MethodSpec(match["multistep"], order=int(match["order"]))  # type:ignore[arg-type]
    return MethodSpec("gp-phs", smoother=match["smoother"].split("-")[0])  # type:ignore[arg-type]


class MeshSpec(BaseModel):
    """A regular evaluation mesh."""

    model_config = ConfigDict(frozen=True)

    resolution: int = Field(25, ge=5, description="Points per axis")
    inflation: float = Field(0.1, ge=0.0, description="Relative growth of each axis range")
    bounds: list[tuple[float, float]] | None = Field(
        None, description="Bounds per axis. Defaults to the noiseless trajectory's bounding box."
    )


class ExperimentConfig(BaseModel):
    """The cross product of settings a sweep runs."""

    model_config = ConfigDict(frozen=True)

    systems: list[str] = Field(default_factory=lambda: list(SYSTEMS))
    methods: list[str] = Field(default_factory=lambda: list(DEFAULT_METHODS))
    n_samples: int = Field(100, ge=2)
    t_span: tuple[float, float] = (0.0, 20.0)
    noise_variances: list[float] = Field(default_factory=lambda: [1e-4, 1e-3, 0.01, 0.02, 0.05])
    jitters: list[float] = Field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.10])
    seeds: list[int] = Field(default_factory=lambda: list(range(30)))
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    step: float = Field(DEFAULT_STEP, gt=0.0, description="The ground-truth RK4 step")
    input_frequency: float = 1.0
    input_amplitude: float = 1.0
    loess_span: float = Field(DEFAULT_LOESS_SPAN, gt=0.0, le=1.0)
    savgol_window: int = Field(DEFAULT_SAVGOL_WINDOW, ge=3)
    anchor_value: float | None = Field(
        None, description="The Hamiltonian at the origin. Defaults to the true value."
    )

    @field_validator("systems")
    @classmethod
    def known_systems(cls, v: list[str]) -> list[str]:
        """Check that every system id is registered."""
        unknown = sorted(set(v) - set(SYSTEMS))
        if not v or unknown:
            raise ValueError(f"systems must be a non-empty subset of {list(SYSTEMS)}, got {v}")
        return v

    @field_validator("methods")
    @classmethod
    def known_methods(cls, v: list[str]) -> list[str]:
        """Check that every method id parses."""
        if not v:
            raise ValueError("at least one method is required")
        for method in v:
            parse_method(method)
        return v

    @field_validator("noise_variances", "jitters", "seeds")
    @classmethod
    def non_empty(cls, v: list) -> list:  # type:ignore[type-arg]
        """Check that every ladder has at least one level."""
        if not v:
            raise ValueError("ladders must not be empty")
        return v

    def get_system(self, system: str) -> BenchmarkSystem:
        """Build a benchmark system with the configured input."""
        return SYSTEMS[system](
            input_frequency=self.input_frequency, input_amplitude=self.input_amplitude
        )


class Mesh(NamedTuple):
    """A regular grid of states, with ``points`` in ``ij`` order."""

    axes: list[np.ndarray]
    points: np.ndarray


def eval_mesh(
    system: BenchmarkSystem,
    spec: MeshSpec,
    trajectory: DenseTrajectory | None = None,
    *,
    t_span: tuple[float, float] = (0.0, 20.0),
    step: float = DEFAULT_STEP,
) -> Mesh:
    """Build the evaluation mesh around a benchmark's noiseless trajectory.

    :param system: The benchmark system
    :param spec: The mesh settings
    :param trajectory: The noiseless trajectory. Simulated if needed and not given.
    :param t_span: The simulation window, if simulating
    :param step: The RK4 step, if simulating
    :returns: The mesh
    :raises ConfigurationError: If the bounds are not finite or empty
    """
    if spec.bounds is not None:
        lower, upper = np.array(spec.bounds, dtype=float).T
    else:
        if trajectory is None:
            trajectory = simulate_system(system, t_span, step)
        lower, upper = trajectory.states.min(axis=0), trajectory.states.max(axis=0)
    if lower.size != system.structure.state_dim:
        raise ConfigurationError(f"need bounds for {system.structure.state_dim} axes")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)) and np.all(upper > lower)):
        raise ConfigurationError(f"invalid mesh bounds {lower.tolist()} to {upper.tolist()}")
    margin = 0.5 * spec.inflation * (upper - lower)
    axes = [np.linspace(lo, hi, spec.resolution) for lo, hi in zip(lower - margin, upper + margin, strict=True)]
    grids = np.meshgrid(*axes, indexing="ij")
    return Mesh(axes, np.stack([grid.ravel() for grid in grids], axis=1))


class FieldMetrics(NamedTuple):
    """Errors of a field posterior mean on a mesh."""

    mse: float
    cosine_distance: float


class SurfaceMetrics(NamedTuple):
    """Errors and calibration of a surface posterior on a mesh."""

    h_mse: float
    mean_variance: float
    ratio: float


def field_metrics(mean: np.ndarray, truth: np.ndarray) -> FieldMetrics:
    """Compare a predicted field with the true field at the same states.

    :param mean: The ``(L, n)`` predicted field
    :param truth: The ``(L, n)`` true field
    :returns: The mean squared error norm and the mean cosine distance over points
        where both fields have a norm of at least ``1e-10``
    :raises MetricError: If no point has a defined direction

    >>> import numpy as np
    >>> field_metrics(-np.eye(2), np.eye(2))
    FieldMetrics(mse=4.0, cosine_distance=2.0)
    """
    mean = np.asarray(mean, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mse = float(np.mean(np.sum((mean - truth) ** 2, axis=1)))
    mean_norm = np.linalg.norm(mean, axis=1)
    truth_norm = np.linalg.norm(truth, axis=1)
    keep = (mean_norm >= ZERO_FIELD_THRESHOLD) & (truth_norm >= ZERO_FIELD_THRESHOLD)
    if not np.any(keep):
        raise MetricError("every mesh point has a vanishing predicted or true field")
    cosine = np.sum(mean[keep] * truth[keep], axis=1) / (mean_norm[keep] * truth_norm[keep])
    return FieldMetrics(mse, float(np.mean(1.0 - cosine)))


def vf_metrics(posterior: FieldPosterior, truth: np.ndarray, mesh: Mesh) -> FieldMetrics:
    """Compare a field posterior mean with the true field on a mesh."""
    return field_metrics(posterior.mean(mesh.points), truth)


def hamiltonian_metrics(mean: np.ndarray, variance: np.ndarray, truth: np.ndarray) -> SurfaceMetrics:
    """Compare a predicted surface with the true Hamiltonian at the same states.

    :param mean: The predicted Hamiltonian
    :param variance: The predicted variance
    :param truth: The true Hamiltonian
    :returns: The mean squared error, the mean variance and their ratio
    :raises MetricError: If the mean variance is zero
    """
    h_mse = float(np.mean((np.asarray(truth) - np.asarray(mean)) ** 2))
    mean_variance = float(np.mean(variance))
    if not mean_variance > 0.0:
        raise MetricError(f"mean posterior variance is {mean_variance}")
    return SurfaceMetrics(h_mse, mean_variance, h_mse / mean_variance)


def h_metrics(posterior: HamiltonianPosterior, truth: np.ndarray, mesh: Mesh) -> SurfaceMetrics:
    """Compare a surface posterior with the true Hamiltonian on a mesh."""
    prediction = posterior.predict(mesh.points)
    return hamiltonian_metrics(prediction.mean, prediction.variance, truth)


class RunMetrics(BaseModel):
    """The metrics of one successful run."""

    vf_mse: float = Field(..., ge=0.0)
    vf_cosine_distance: float = Field(..., ge=0.0)
    h_mse: float | None = Field(None, ge=0.0)
    mean_variance: float | None = Field(None, ge=0.0)
    ratio: float | None = Field(None, ge=0.0)
    wall_time: float = Field(..., ge=0.0)

    @field_validator("*")
    @classmethod
    def finite(cls, v: float | None) -> float | None:
        """Check that metrics are finite."""
        if v is not None and not np.isfinite(v):
            raise ValueError(f"metric is not finite: {v}")
        return v


class RunResult(BaseModel):
    """The outcome of a single run in a sweep."""

    system: str
    method: str
    noise_variance: float
    jitter: float
    seed: int
    status: Literal["ok", "failed"] = "ok"
    error: str | None = None
    parameters: dict[str, float] = Field(default_factory=dict)
    metrics: RunMetrics | None = None

    @property
    def cell_key(self) -> str:
        """Get the key shared by all seeds of the same setting."""
        return _cell_key(self.system, self.method, self.noise_variance, self.jitter)

    @property
    def run_key(self) -> str:
        """Get the unique key of this run."""
        return f"{self.cell_key}__seed{self.seed}"


def _cell_key(system: str, method: str, noise_variance: float, jitter: float) -> str:
    return f"{system}__{method}__sx2-{noise_variance:g}__sj-{jitter:g}"


def _data_seed(seed: int, system: str, noise_variance: float, jitter: float) -> int:
    """Derive the dataset seed so every method sees the same data for a setting and seed."""
    entropy = [seed, *(zlib.crc32(repr(v).encode()) for v in (system, noise_variance, jitter))]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def build_model(
    method: str,
    dataset: TrajectoryDataset,
    system: BenchmarkSystem,
    *,
    loess_span: float = DEFAULT_LOESS_SPAN,
    savgol_window: int = DEFAULT_SAVGOL_WINDOW,
) -> ProjectedGaussianProcess:
    """Build an unfitted model for a method id.

    :param method: The method id
    :param dataset: The noisy trajectory
    :param system: Provides the port-Hamiltonian structure
    :param loess_span: The LOESS span for ``gp-phs-loess-2``
    :param savgol_window: The Savitzky-Golay window for ``gp-phs-savgol-3``
    :returns: The model with data-driven initial hyperparameters
    """
    spec = parse_method(method)
    if spec.family == "ms-phs":
        return MsPhsModel(dataset, MultistepScheme(order=spec.order), system.structure)
    if spec.family == "ms-ode":
        return MsOdeModel(dataset, MultistepScheme(order=spec.order), system.structure)
    if spec.smoother == "loess":
        estimate = loess_smooth(dataset, span=loess_span, degree=2)
    else:
        estimate = savgol_smooth(dataset, window=savgol_window, degree=3)
    return GpPhsModel(estimate, system.structure)


def load_model(
    document: ModelDocument, dataset_path: str | Path
) -> tuple[ProjectedGaussianProcess, BenchmarkSystem]:
    """Rebuild a fitted model from its document and its dataset file.

    :param document: The model document
    :param dataset_path: The dataset file the model was fit on
    :returns: The assembled model and the benchmark system providing its structure
    :raises DatasetMismatchError: If the dataset file doesn't match the recorded fingerprint
    """
    fingerprint = dataset_fingerprint(dataset_path)
    if fingerprint != document.dataset_fingerprint:
        raise DatasetMismatchError(document.dataset_fingerprint, fingerprint)
    if document.system not in SYSTEMS:
        raise ConfigurationError(f"model document has unknown system {document.system!r}")
    inputs = {k: v for k, v in document.options.items() if k in {"input_frequency", "input_amplitude"}}
    system = SYSTEMS[document.system](**inputs)
    model = build_model(
        document.method,
        read_dataset(dataset_path),
        system,
        loess_span=document.options.get("loess_span", DEFAULT_LOESS_SPAN),
        savgol_window=document.options.get("savgol_window", DEFAULT_SAVGOL_WINDOW),
    )
    if list(document.parameters) != model.parameter_names:
        raise ConfigurationError(
            f"model document parameters {list(document.parameters)} don't match "
            f"{model.parameter_names}"
        )
    model.set_vector(document.get_vector())
    return model.assemble(), system


def write_mesh_dump(
    path: Path,
    mesh: Mesh,
    true_field: np.ndarray,
    field: FieldPrediction,
    true_hamiltonian: np.ndarray | None = None,
    surface: SurfacePrediction | None = None,
) -> None:
    """Write mesh coordinates, true and predicted field, and optionally the surface as CSV."""
    n = mesh.points.shape[1]
    columns = {f"x{i + 1}": mesh.points[:, i] for i in range(n)}
    columns.update({f"f_true_{i + 1}": true_field[:, i] for i in range(n)})
    columns.update({f"f_mean_{i + 1}": field.mean[:, i] for i in range(n)})
    columns["f_std"] = field.std
    if true_hamiltonian is not None and surface is not None:
        columns["h_true"] = true_hamiltonian
        columns["h_mean"] = surface.mean
        columns["h_variance"] = surface.variance
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")


def run_one(
    config: ExperimentConfig,
    system_id: str,
    method: str,
    noise_variance: float,
    jitter: float,
    seed: int,
    directory: Path | None = None,
) -> RunResult:
    """Simulate, fit, predict and score a single setting.

    Failures are caught and recorded in the result instead of raised.

    :param config: The experiment configuration
    :param system_id: The benchmark system id
    :param method: The method id
    :param noise_variance: The observation noise variance
    :param jitter: The timestamp jitter standard deviation
    :param seed: The run seed
    :param directory: If given, the mesh predictions are written below it
    :returns: The run result
    """
    result = RunResult(
        system=system_id, method=method, noise_variance=noise_variance, jitter=jitter, seed=seed
    )
    start = time.perf_counter()
    try:
        system = config.get_system(system_id)
        trajectory = simulate_system(system, config.t_span, config.step)
        dataset = generate_dataset(
            system,
            n_samples=config.n_samples,
            t_span=config.t_span,
            noise_variance=noise_variance,
            jitter=jitter,
            seed=_data_seed(seed, system_id, noise_variance, jitter),
            trajectory=trajectory,
        )
        model = build_model(
            method,
            dataset,
            system,
            loess_span=config.loess_span,
            savgol_window=config.savgol_window,
        )
        fit(model, config.optimizer.model_copy(update={"seed": seed}))

        mesh = eval_mesh(system, config.mesh, trajectory)
        true_field = system.true_field(mesh.points)
        field = model.predict(mesh.points)
        field_scores = field_metrics(field.mean, true_field)
        true_hamiltonian, surface, surface_scores = None, None, None
        if isinstance(model, PhsGaussianProcess):
            origin = np.zeros(system.structure.state_dim)
            anchor_value = (
                float(system.hamiltonian(origin))
                if config.anchor_value is None
                else config.anchor_value
            )
            surface = model.hamiltonian_posterior(Anchor(origin, anchor_value)).predict(mesh.points)
            true_hamiltonian = system.hamiltonian(mesh.points)
            surface_scores = hamiltonian_metrics(surface.mean, surface.variance, true_hamiltonian)
        if directory is not None:
            write_mesh_dump(
                directory / MESHES_DIRECTORY / f"{result.run_key}.csv",
                mesh,
                true_field,
                field,
                true_hamiltonian,
                surface,
            )
        metrics = RunMetrics(
            vf_mse=field_scores.mse,
            vf_cosine_distance=max(field_scores.cosine_distance, 0.0),
            h_mse=surface_scores.h_mse if surface_scores else None,
            mean_variance=surface_scores.mean_variance if surface_scores else None,
            ratio=surface_scores.ratio if surface_scores else None,
            wall_time=time.perf_counter() - start,
        )
        return result.model_copy(
            update={
                "metrics": metrics,
                "parameters": dict(zip(model.parameter_names, model.get_vector().tolist(), strict=True)),
            }
        )
    except Exception as e:
        logger.warning("run %s failed: %s", result.run_key, e)
        return result.model_copy(update={"status": "failed", "error": f"{type(e).__name__}: {e}"})


def read_runs(directory: str | Path) -> list[RunResult]:
    """Read every recorded run in a results directory."""
    path = Path(directory).expanduser().resolve() / RUNS_FILE
    if not path.is_file():
        return []
    with path.open() as file:
        return [RunResult.model_validate_json(line) for line in file if line.strip()]


def _run_task(
    args: tuple[ExperimentConfig, str, str, float, float, int, Path],
) -> RunResult:
    return run_one(*args)


def run_sweep(
    config: ExperimentConfig,
    directory: str | Path,
    *,
    jobs: int = 1,
    progress: bool = True,
) -> list[RunResult]:
    """Run the full cross product of a configuration, resuming from earlier results.

    :param config: The experiment configuration
    :param directory: The results directory, created if needed
    :param jobs: The number of worker processes. One runs in-process.
    :param progress: Whether to show a progress bar
    :returns: All results for the configuration, including earlier ones, sorted by run key
    """
    directory = Path(directory).expanduser().resolve()
    directory.mkdir(parents=True, exist_ok=True)
    directory.joinpath("config.json").write_text(config.model_dump_json(indent=2) + "\n")

    recorded = {run.run_key: run for run in read_runs(directory)}
    tasks = []
    for system, method, noise_variance, jitter, seed in _cross_product(config):
        key = f"{_cell_key(system, method, noise_variance, jitter)}__seed{seed}"
        if key in recorded:
            logger.debug("skipping recorded run %s", key)
            continue
        tasks.append((config, system, method, noise_variance, jitter, seed, directory))
    logger.info("%d runs to do, %d already recorded", len(tasks), len(recorded))

    results = list(recorded.values())
    with directory.joinpath(RUNS_FILE).open("a") as file:

        def _record(result: RunResult) -> None:
            file.write(result.model_dump_json() + "\n")
            file.flush()
            results.append(result)

        if jobs <= 1:
            for task in tqdm(tasks, desc="runs", unit="run", disable=not progress):
                _record(_run_task(task))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as executor:
                futures = [executor.submit(_run_task, task) for task in tasks]
                for future in tqdm(
                    as_completed(futures),
                    total=len(futures),
                    desc="runs",
                    unit="run",
                    disable=not progress,
                ):
                    _record(future.result())

    wanted = {
        f"{_cell_key(system, method, noise_variance, jitter)}__seed{seed}"
        for system, method, noise_variance, jitter, seed in _cross_product(config)
    }
    return sorted((r for r in results if r.run_key in wanted), key=lambda r: r.run_key)


def _cross_product(config: ExperimentConfig) -> Iterable[tuple[str, str, float, float, int]]:
    for system in config.systems:
        for method in config.methods:
            for noise_variance in config.noise_variances:
                for jitter in config.jitters:
                    for seed in config.seeds:
                        yield system, method, noise_variance, jitter, seed


CELL_COLUMNS = ["system", "method", "noise_variance", "jitter"]


def _runs_frame(runs: Sequence[RunResult]) -> pd.DataFrame:
    rows = []
    for run in runs:
        row = {
            "system": run.system,
            "method": run.method,
            "noise_variance": run.noise_variance,
            "jitter": run.jitter,
            "seed": run.seed,
            "ok": run.status == "ok",
        }
        metrics = run.metrics.model_dump() if run.metrics is not None else {}
        row.update({metric: metrics.get(metric) for metric in METRICS})
        rows.append(row)
    return pd.DataFrame(rows, columns=[*CELL_COLUMNS, "seed", "ok", *METRICS])


def aggregate(runs: Sequence[RunResult]) -> pd.DataFrame:
    """Summarize each metric over seeds within each cell.

    Values are sorted by seed before summarizing, so the result doesn't depend
    on the order of the runs.

    :param runs: The run results
    :returns: One row per cell and metric with ``n_ok``, ``n_total``, the mean,
        standard deviation, median, quartiles and a normal 95% confidence interval
    :raises MetricError: If there are no runs
    """
    if not runs:
        raise MetricError("no runs to aggregate")
    frame = _runs_frame(runs).sort_values([*CELL_COLUMNS, "seed"])
    rows = []
    for cell, group in frame.groupby(CELL_COLUMNS, sort=True):
        n_total = len(group)
        n_ok = int(group["ok"].sum())
        for metric in METRICS:
            values = group.loc[group["ok"], metric].dropna().to_numpy(dtype=float)
            row = dict(zip(CELL_COLUMNS, cell, strict=True))
            row.update(metric=metric, n_ok=n_ok, n_total=n_total, n=values.size)
            if values.size == 0:
                rows.append(row)
                continue
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
            half_width = 1.96 * std / np.sqrt(values.size)
            q1, median, q3 = np.percentile(values, [25.0, 50.0, 75.0])
            row.update(
                mean=mean,
                std=std,
                median=float(median),
                q1=float(q1),
                q3=float(q3),
                ci_low=mean - half_width,
                ci_high=mean + half_width,
            )
            rows.append(row)
    return pd.DataFrame(rows)


def _metric(summary: pd.DataFrame, metric: str) -> pd.DataFrame:
    return summary[(summary["metric"] == metric) & (summary["n"] > 0)]


def _mean_std(row: pd.Series) -> str:
    return f"{row['mean']:.3f} ({row['std']:.3f})"


def _median_iqr(row: pd.Series) -> str:
    return f"{row['median']:.3g} [{row['q1']:.3g}, {row['q3']:.3g}]"


def report(directory: str | Path, output: str | Path | None = None) -> dict[str, Path]:
    """Write summary tables and per-cell median mesh dumps for a results directory.

    The tables are ``vf_mse.csv`` (field error summaries for every cell),
    ``cosine.csv`` (mean and standard deviation of the cosine distance per system
    and method at the smallest jitter), ``calibration_noise.csv`` (median and
    quartiles of the surface error and variance per noise level at the smallest
    jitter) and ``calibration_jitter.csv`` (median and quartiles of the error to
    variance ratio per jitter level).

    :param directory: The results directory
    :param output: Where to write. Defaults to the results directory.
    :returns: The written tables by name
    :raises MetricError: If the directory holds no runs
    """
    directory = Path(directory).expanduser().resolve()
    output = directory if output is None else Path(output).expanduser().resolve()
    output.mkdir(parents=True, exist_ok=True)
    runs = read_runs(directory)
    summary = aggregate(runs)
    rv: dict[str, Path] = {}

    rv["vf_mse"] = output / "vf_mse.csv"
    _metric(summary, "vf_mse").to_csv(rv["vf_mse"], index=False, float_format="%.17g")

    smallest_jitter = summary.groupby("system")["jitter"].transform("min")
    at_smallest_jitter = summary[summary["jitter"] == smallest_jitter]

    cosine = _metric(at_smallest_jitter, "vf_cosine_distance")
    rv["cosine"] = output / "cosine.csv"
    _pivot(cosine, ["system", "noise_variance"], _mean_std).to_csv(rv["cosine"])

    rows = []
    for metric in ("h_mse", "mean_variance", "ratio"):
        subset = _metric(at_smallest_jitter, metric)
        for _, row in subset.iterrows():
            rows.append(
                {
                    **{c: row[c] for c in ["system", "method", "noise_variance"]},
                    "metric": metric,
                    "median": row["median"],
                    "q1": row["q1"],
                    "q3": row["q3"],
                    "n_ok": row["n_ok"],
                    "n_total": row["n_total"],
                }
            )
    rv["calibration_noise"] = output / "calibration_noise.csv"
    pd.DataFrame(rows).to_csv(rv["calibration_noise"], index=False, float_format="%.17g")

    rv["calibration_jitter"] = output / "calibration_jitter.csv"
    _pivot(_metric(summary, "ratio"), ["system", "noise_variance", "jitter"], _median_iqr).to_csv(
        rv["calibration_jitter"]
    )

    _write_median_meshes(directory, output, runs)
    return rv


def _pivot(frame: pd.DataFrame, index: list[str], formatter) -> pd.DataFrame:  # type:ignore[no-untyped-def]
    if frame.empty:
        return pd.DataFrame(columns=[*index])
    cells = frame.assign(cell=frame.apply(formatter, axis=1))
    rv = cells.pivot_table(index=index, columns="method", values="cell", aggfunc="first")
    rv.columns.name = None
    return rv


def _write_median_meshes(directory: Path, output: Path, runs: Sequence[RunResult]) -> None:
    by_cell: dict[str, list[Path]] = {}
    for run in runs:
        path = directory / MESHES_DIRECTORY / f"{run.run_key}.csv"
        if run.status == "ok" and path.is_file():
            by_cell.setdefault(run.cell_key, []).append(path)
    for cell, paths in sorted(by_cell.items()):
        frames = [pd.read_csv(path, float_precision="round_trip") for path in sorted(paths)]
        stacked = np.stack([frame.to_numpy() for frame in frames])
        median = pd.DataFrame(np.median(stacked, axis=0), columns=frames[0].columns)
        target = output / PLOTS_DIRECTORY / f"{cell}.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        median.to_csv(target, index=False, float_format="%.17g")


class CalibrationSummary(NamedTuple):
    """How well the predicted surface variance tracks the surface error across noise levels."""

    correlation: float
    median_ratios: dict[float, float]


def calibration_tracking(
    runs: Sequence[RunResult], system: str, method: str, jitter: float | None = None
) -> CalibrationSummary:
    """Rank-correlate the median surface error with the median surface variance across noise levels.

    :param runs: The run results
    :param system: The system id
    :param method: A method id with a Hamiltonian surface
    :param jitter: The jitter level to use. Defaults to the smallest recorded.
    :returns: The Spearman correlation and the median error to variance ratio per noise level
    :raises MetricError: If fewer than two noise levels have surface metrics
    """
    frame = _runs_frame(runs)
    frame = frame[(frame["system"] == system) & (frame["method"] == method) & frame["ok"]]
    frame = frame.dropna(subset=["h_mse", "mean_variance", "ratio"])
    if frame.empty:
        raise MetricError(f"no surface metrics for {system} / {method}")
    jitter = float(frame["jitter"].min()) if jitter is None else jitter
    frame = frame[frame["jitter"] == jitter]
    levels = frame.sort_values("seed").groupby("noise_variance")[["h_mse", "mean_variance", "ratio"]]
    medians = levels.median()
    if len(medians) < 2:
        raise MetricError("need at least two noise levels to correlate")
    correlation = spearmanr(medians["h_mse"], medians["mean_variance"]).statistic
    return CalibrationSummary(
        float(correlation), {float(k): float(v) for k, v in medians["ratio"].items()}
    )
