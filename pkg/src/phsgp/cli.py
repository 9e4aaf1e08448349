"""A command line interface for simulating benchmarks, fitting models and running sweeps.

.. code-block::

    $ phsgp simulate --system duffing --jitter 0.05 --out data.csv
    $ phsgp fit data.csv --system duffing --method ms-phs-ab-3 --out model.json
    $ phsgp predict model.json data.csv --out mesh.csv
    $ phsgp sweep config.json --out results/ --jobs 8
    $ phsgp report results/

Any failure is reported on stderr as a JSON object with ``error`` and ``message``
keys, and the command exits with status 1.
"""

from __future__ import annotations

import json
import logging
import sys
from functools import wraps
from pathlib import Path
from typing import Any, Callable, TypeVar

import click
import numpy as np

from .bench import (
    ExperimentConfig,
    MeshSpec,
    build_model,
    eval_mesh,
    field_metrics,
    hamiltonian_metrics,
    load_model,
    parse_method,
    report,
    run_sweep,
    write_mesh_dump,
)
from .inference import Anchor, ModelDocument, OptimizerConfig, PhsGaussianProcess, fit
from .inference import read_model, write_model
from .simulate import (
    DEFAULT_STEP,
    dataset_fingerprint,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .systems import SYSTEMS
from .version import get_version

__all__ = [
    "main",
]

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])


def _json_errors(f: F) -> F:
    """Report uncaught exceptions as JSON on stderr and exit with status 1."""

    @wraps(f)
    def _wrapped(*args: Any, **kwargs: Any) -> Any:
        try:
            return f(*args, **kwargs)
        except (click.ClickException, click.Abort):
            raise
        except Exception as e:
            logger.debug("command failed", exc_info=True)
            click.echo(json.dumps({"error": type(e).__name__, "message": str(e)}), err=True)
            sys.exit(1)

    return _wrapped  # type:ignore[return-value]


SYSTEM_OPTION = click.option(
    "--system",
    type=click.Choice(list(SYSTEMS)),
    default="mass-spring",
    show_default=True,
    help="The benchmark system",
)
SEED_OPTION = click.option("--seed", type=int, default=0, show_default=True, help="The random seed")
T_SPAN_OPTION = click.option(
    "--t-span",
    type=(float, float),
    default=(0.0, 20.0),
    show_default=True,
    help="The start and end of the trajectory",
)
INPUT_FREQUENCY_OPTION = click.option(
    "--input-frequency", type=float, default=1.0, show_default=True, help="The input frequency"
)
INPUT_AMPLITUDE_OPTION = click.option(
    "--input-amplitude", type=float, default=1.0, show_default=True, help="The input amplitude"
)


def _out_option(help: str, *, directory: bool = False, required: bool = True):  # type:ignore[no-untyped-def]
    return click.option(
        "--out",
        type=click.Path(file_okay=not directory, dir_okay=directory, path_type=Path),
        required=required,
        help=help,
    )


@click.group()
@click.version_option(get_version(with_git_hash=True))
@click.option("-v", "--verbose", count=True, help="Increase logging verbosity")
def main(verbose: int) -> None:
    """Learn port-Hamiltonian dynamics from irregular trajectories."""
    logging.basicConfig(
        level=max(logging.WARNING - 10 * verbose, logging.DEBUG),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@SYSTEM_OPTION
@click.option("--samples", type=int, default=100, show_default=True, help="Number of observations")
@T_SPAN_OPTION
@click.option("--noise-variance", type=float, default=1e-4, show_default=True)
@click.option("--jitter", type=float, default=0.0, show_default=True, help="Timestamp jitter std")
@SEED_OPTION
@INPUT_FREQUENCY_OPTION
@INPUT_AMPLITUDE_OPTION
@_out_option("The dataset CSV to write")
@_json_errors
def simulate(
    system: str,
    samples: int,
    t_span: tuple[float, float],
    noise_variance: float,
    jitter: float,
    seed: int,
    input_frequency: float,
    input_amplitude: float,
    out: Path,
) -> None:
    """Simulate a benchmark and write a noisy, jittered dataset."""
    benchmark = SYSTEMS[system](input_frequency=input_frequency, input_amplitude=input_amplitude)
    dataset = generate_dataset(
        benchmark,
        n_samples=samples,
        t_span=t_span,
        noise_variance=noise_variance,
        jitter=jitter,
        seed=seed,
    )
    write_dataset(dataset, out)
    click.echo(f"wrote {dataset.size} observations to {out}")


@main.command(name="fit")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@SYSTEM_OPTION
@click.option("--method", default="ms-phs-ab-3", show_default=True, help="The method id")
@click.option("--iterations", type=int, default=200, show_default=True)
@click.option("--learning-rate", type=float, default=0.05, show_default=True)
@click.option("--init-perturbation", type=float, default=0.0, show_default=True)
@click.option(
    "--restarts", type=int, default=3, show_default=True, help="Starting points to optimize from"
)
@click.option("--loess-span", type=float, default=0.15, show_default=True)
@click.option("--savgol-window", type=int, default=11, show_default=True)
@click.option(
    "--anchor-value", type=float, help="The Hamiltonian at the origin. Defaults to the true value."
)
@SEED_OPTION
@T_SPAN_OPTION
@INPUT_FREQUENCY_OPTION
@INPUT_AMPLITUDE_OPTION
@_out_option("The model JSON to write")
@_json_errors
def fit_model(
    dataset: Path,
    system: str,
    method: str,
    iterations: int,
    learning_rate: float,
    init_perturbation: float,
    restarts: int,
    loess_span: float,
    savgol_window: int,
    anchor_value: float | None,
    t_span: tuple[float, float],
    seed: int,
    input_frequency: float,
    input_amplitude: float,
    out: Path,
) -> None:
    """Fit a model to a dataset and write it as JSON.

    The simulation window is recorded so that ``predict`` builds its mesh around
    the same trajectory.
    """
    spec = parse_method(method)
    benchmark = SYSTEMS[system](input_frequency=input_frequency, input_amplitude=input_amplitude)
    model = build_model(
        method, read_dataset(dataset), benchmark, loess_span=loess_span, savgol_window=savgol_window
    )
    config = OptimizerConfig(
        learning_rate=learning_rate,
        iterations=iterations,
        seed=seed,
        init_perturbation=init_perturbation,
        restarts=restarts,
    )
    fit(model, config)
    anchors = []
    if spec.has_surface:
        origin = np.zeros(benchmark.structure.state_dim)
        value = float(benchmark.hamiltonian(origin)) if anchor_value is None else anchor_value
        anchors.append(Anchor(origin, value))
    document = ModelDocument.from_model(
        model,
        method=method,
        system=system,
        dataset_fingerprint=dataset_fingerprint(dataset),
        anchors=anchors,
        options={
            "loess_span": loess_span,
            "savgol_window": savgol_window,
            "input_frequency": input_frequency,
            "input_amplitude": input_amplitude,
            "t_span": list(t_span),
            "step": DEFAULT_STEP,
        },
    )
    write_model(document, out)
    click.echo(f"wrote {method} model with nll={model.nll():.6g} to {out}")


@main.command()
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--resolution", type=int, default=25, show_default=True, help="Mesh points per axis")
@click.option("--inflation", type=float, default=0.1, show_default=True)
@click.option(
    "--t-span",
    type=(float, float),
    default=None,
    help="The trajectory window for the mesh. Defaults to the one recorded at fit time.",
)
@_out_option("The mesh CSV to write")
@_json_errors
def predict(
    model_path: Path,
    dataset: Path,
    resolution: int,
    inflation: float,
    t_span: tuple[float, float] | None,
    out: Path,
) -> None:
    """Predict the field and surface on a mesh and print the metrics as JSON."""
    document = read_model(model_path)
    model, benchmark = load_model(document, dataset)
    if t_span is None:
        t_span = tuple(document.options.get("t_span", (0.0, 20.0)))  # type:ignore[assignment]
    mesh = eval_mesh(
        benchmark,
        MeshSpec(resolution=resolution, inflation=inflation),
        t_span=t_span,
        step=document.options.get("step", DEFAULT_STEP),
    )
    true_field = benchmark.true_field(mesh.points)
    field = model.predict(mesh.points)
    scores: dict[str, float] = field_metrics(field.mean, true_field)._asdict()
    true_hamiltonian, surface = None, None
    if isinstance(model, PhsGaussianProcess):
        surface = model.hamiltonian_posterior(document.get_anchors() or None).predict(mesh.points)
        true_hamiltonian = benchmark.hamiltonian(mesh.points)
        scores.update(
            hamiltonian_metrics(surface.mean, surface.variance, true_hamiltonian)._asdict()
        )
    write_mesh_dump(out, mesh, true_field, field, true_hamiltonian, surface)
    click.echo(json.dumps(scores, indent=2))


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_out_option("The results directory", directory=True)
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker processes")
@click.option("--seed", "seeds", type=int, multiple=True, help="Only run these seeds")
@click.option("--no-progress", is_flag=True, help="Hide the progress bar")
@_json_errors
def sweep(config_path: Path, out: Path, jobs: int, seeds: tuple[int, ...], no_progress: bool) -> None:
    """Run a benchmark sweep, resuming from earlier results in the directory."""
    config = ExperimentConfig.model_validate_json(config_path.read_text())
    if seeds:
        config = ExperimentConfig.model_validate({**config.model_dump(), "seeds": list(seeds)})
    results = run_sweep(config, out, jobs=jobs, progress=not no_progress)
    failed = sum(result.status == "failed" for result in results)
    click.echo(f"{len(results)} runs in {out}, {failed} failed")


@main.command(name="report")
@click.argument(
    "directory", type=click.Path(exists=True, file_okay=False, path_type=Path)
)
@_out_option("Where to write the tables. Defaults to the results directory.", directory=True, required=False)
@_json_errors
def report_command(directory: Path, out: Path | None) -> None:
    """Summarize a results directory into CSV tables."""
    for name, path in report(directory, out).items():
        click.echo(f"{name}: {path}")


if __name__ == "__main__":
    main()
