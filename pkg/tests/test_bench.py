"""Tests for benchmark sweeps, metrics and reports."""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from phsgp.baselines import GpPhsModel, MsOdeModel
from phsgp.bench import (
    ConfigurationError,
    DatasetMismatchError,
    ExperimentConfig,
    MeshSpec,
    MethodSpec,
    MetricError,
    RunMetrics,
    RunResult,
    aggregate,
    build_model,
    calibration_tracking,
    eval_mesh,
    field_metrics,
    h_metrics,
    hamiltonian_metrics,
    load_model,
    parse_method,
    read_runs,
    report,
    run_one,
    run_sweep,
    vf_metrics,
)
from phsgp.inference import (
    FieldPosterior,
    FieldPrediction,
    HamiltonianPosterior,
    ModelDocument,
    MsPhsModel,
    OptimizerConfig,
    SurfacePrediction,
    fit,
)
from phsgp.simulate import dataset_fingerprint, generate_dataset, write_dataset
from phsgp.systems import duffing, mass_spring
from tests.constants import SLOW

MEAN_STD = r"^\d+\.\d{3} \(\d+\.\d{3}\)$"
MEDIAN_IQR = r"^\S+ \[\S+, \S+\]$"


def _run(
    seed: int,
    vf_mse: float,
    *,
    system: str = "duffing",
    method: str = "ms-phs-ab-3",
    noise_variance: float = 1e-3,
    jitter: float = 0.0,
    h_mse: float | None = 1.0,
    mean_variance: float | None = 1.0,
) -> RunResult:
    return RunResult(
        system=system,
        method=method,
        noise_variance=noise_variance,
        jitter=jitter,
        seed=seed,
        metrics=RunMetrics(
            vf_mse=vf_mse,
            vf_cosine_distance=0.01 * vf_mse,
            h_mse=h_mse,
            mean_variance=mean_variance,
            ratio=None if h_mse is None or mean_variance is None else h_mse / mean_variance,
            wall_time=0.5,
        ),
    )


def _failed(seed: int, **kwargs) -> RunResult:  # type:ignore[no-untyped-def]
    return RunResult(seed=seed, status="failed", error="FactorizationError: boom", **kwargs)


def _small_config(**kwargs) -> ExperimentConfig:  # type:ignore[no-untyped-def]
    settings = dict(
        systems=["mass-spring"],
        methods=["ms-phs-ab-3"],
        n_samples=20,
        t_span=(0.0, 4.0),
        noise_variances=[1e-3],
        jitters=[0.01],
        seeds=[0, 1, 2],
        mesh=MeshSpec(resolution=5),
        optimizer=OptimizerConfig(iterations=5),
    )
    settings.update(kwargs)
    return ExperimentConfig(**settings)


class _FixedField(FieldPosterior):
    def __init__(self, mean: np.ndarray) -> None:
        self._mean = mean

    def predict(self, X: np.ndarray) -> FieldPrediction:
        return FieldPrediction(self._mean, np.zeros((len(X), 2, 2)))


class _FixedSurface(HamiltonianPosterior):
    def __init__(self, mean: np.ndarray, variance: np.ndarray) -> None:
        self.anchors = []
        self._prediction = SurfacePrediction(mean, variance)

    def predict(self, X: np.ndarray) -> SurfacePrediction:
        return self._prediction


class TestConfiguration(unittest.TestCase):
    """Test method ids and experiment configurations."""

    def test_parse_method(self) -> None:
        """Test parsing method ids."""
        self.assertEqual(MethodSpec("ms-ode", order=1), parse_method("ms-ode-ab-1"))
        self.assertEqual(MethodSpec("gp-phs", smoother="loess"), parse_method("gp-phs-loess-2"))
        self.assertTrue(parse_method("ms-phs-ab-2").has_surface)
        self.assertFalse(parse_method("ms-ode-ab-3").has_surface)
        for method in ("ms-phs-ab-4", "gp-phs-loess-3", "MS-PHS-ab-3", ""):
            with self.subTest(method=method), self.assertRaises(ConfigurationError):
                parse_method(method)

    def test_defaults(self) -> None:
        """Test the default sweep."""
        config = ExperimentConfig()
        self.assertEqual(["mass-spring", "van-der-pol", "duffing"], config.systems)
        self.assertEqual(30, len(config.seeds))
        self.assertEqual(25, config.mesh.resolution)
        self.assertEqual(config, ExperimentConfig.model_validate_json(config.model_dump_json()))

    def test_invalid(self) -> None:
        """Test that invalid configurations are rejected."""
        for kwargs in (
            {"systems": ["pendulum"]},
            {"systems": []},
            {"methods": ["ms-phs-ab-4"]},
            {"seeds": []},
            {"n_samples": 1},
            {"mesh": {"resolution": 3}},
        ):
            with self.subTest(kwargs=kwargs), self.assertRaises(ValidationError):
                ExperimentConfig(**kwargs)

    def test_build_model(self) -> None:
        """Test that method ids select model classes."""
        system = duffing()
        dataset = generate_dataset(system, n_samples=30, t_span=(0.0, 3.0))
        self.assertIsInstance(build_model("ms-phs-ab-2", dataset, system), MsPhsModel)
        self.assertIsInstance(build_model("ms-ode-ab-1", dataset, system), MsOdeModel)
        self.assertIsInstance(build_model("gp-phs-loess-2", dataset, system, loess_span=0.3), GpPhsModel)
        self.assertIsInstance(build_model("gp-phs-savgol-3", dataset, system), GpPhsModel)
        self.assertEqual(2, build_model("ms-phs-ab-2", dataset, system).scheme.order)


class TestMesh(unittest.TestCase):
    """Test evaluation meshes."""

    def test_bounds(self) -> None:
        """Test a mesh with explicit bounds."""
        mesh = eval_mesh(mass_spring(), MeshSpec(resolution=5, inflation=0.0, bounds=[(-1.0, 1.0), (-2.0, 2.0)]))
        self.assertEqual((25, 2), mesh.points.shape)
        np.testing.assert_array_equal([-1.0, -2.0], mesh.points[0])
        np.testing.assert_array_equal([-1.0, -1.0], mesh.points[1])
        np.testing.assert_array_equal([1.0, 2.0], mesh.points[-1])

    def test_inflation(self) -> None:
        """Test that each axis grows by the inflation fraction of its range."""
        mesh = eval_mesh(mass_spring(), MeshSpec(resolution=5, bounds=[(-1.0, 1.0), (0.0, 4.0)]))
        self.assertAlmostEqual(-1.1, mesh.axes[0][0])
        self.assertAlmostEqual(4.2, mesh.axes[1][-1])

    def test_trajectory(self) -> None:
        """Test that the default mesh covers the noiseless trajectory and is deterministic."""
        spec = MeshSpec(resolution=7)
        mesh = eval_mesh(duffing(), spec, t_span=(0.0, 5.0))
        self.assertEqual((49, 2), mesh.points.shape)
        np.testing.assert_array_equal(mesh.points, eval_mesh(duffing(), spec, t_span=(0.0, 5.0)).points)
        self.assertGreater(mesh.axes[0][-1], 1.0)

    def test_invalid(self) -> None:
        """Test invalid bounds."""
        with self.assertRaises(ConfigurationError):
            eval_mesh(mass_spring(), MeshSpec(bounds=[(1.0, -1.0), (0.0, 1.0)]))
        with self.assertRaises(ConfigurationError):
            eval_mesh(mass_spring(), MeshSpec(bounds=[(0.0, 1.0)]))


class TestMetrics(unittest.TestCase):
    """Test field and surface metrics."""

    def test_field_identity(self) -> None:
        """Test that a perfect prediction scores zero."""
        truth = np.random.default_rng(0).standard_normal((10, 2))
        rv = field_metrics(truth, truth)
        self.assertEqual(0.0, rv.mse)
        self.assertAlmostEqual(0.0, rv.cosine_distance)

    def test_field_orthogonal(self) -> None:
        """Test that orthogonal predictions have unit cosine distance."""
        rv = field_metrics(np.array([[0.0, 2.0]]), np.array([[1.0, 0.0]]))
        self.assertAlmostEqual(5.0, rv.mse)
        self.assertAlmostEqual(1.0, rv.cosine_distance)

    def test_vanishing_field(self) -> None:
        """Test that points with a vanishing field are left out of the cosine distance."""
        rv = field_metrics(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[1.0, 0.0], [1.0, 0.0]]))
        self.assertAlmostEqual(0.5, rv.mse)
        self.assertAlmostEqual(0.0, rv.cosine_distance)
        with self.assertRaises(MetricError):
            field_metrics(np.zeros((3, 2)), np.ones((3, 2)))

    def test_surface(self) -> None:
        """Test the surface error, variance and ratio."""
        rv = hamiltonian_metrics(np.array([1.0, 2.0]), np.array([0.5, 0.5]), np.array([0.0, 2.0]))
        self.assertAlmostEqual(0.5, rv.h_mse)
        self.assertAlmostEqual(0.5, rv.mean_variance)
        self.assertAlmostEqual(1.0, rv.ratio)
        with self.assertRaises(MetricError):
            hamiltonian_metrics(np.zeros(2), np.zeros(2), np.ones(2))

    def test_posteriors(self) -> None:
        """Test scoring posteriors on a mesh."""
        mesh = eval_mesh(mass_spring(), MeshSpec(resolution=5, bounds=[(-1.0, 1.0), (-1.0, 1.0)]))
        truth = np.ones((25, 2))
        self.assertEqual(0.0, vf_metrics(_FixedField(np.ones((25, 2))), truth, mesh).mse)
        rv = h_metrics(_FixedSurface(np.zeros(25), np.full(25, 2.0)), np.full(25, 2.0), mesh)
        self.assertAlmostEqual(2.0, rv.ratio)

    def test_run_metrics(self) -> None:
        """Test that recorded metrics are finite and non-negative."""
        with self.assertRaises(ValidationError):
            RunMetrics(vf_mse=np.inf, vf_cosine_distance=0.0, wall_time=1.0)
        with self.assertRaises(ValidationError):
            RunMetrics(vf_mse=-1.0, vf_cosine_distance=0.0, wall_time=1.0)

    def test_keys(self) -> None:
        """Test cell and run keys."""
        run = _run(3, 1.0, jitter=0.05)
        self.assertEqual("duffing__ms-phs-ab-3__sx2-0.001__sj-0.05", run.cell_key)
        self.assertEqual("duffing__ms-phs-ab-3__sx2-0.001__sj-0.05__seed3", run.run_key)


class TestAggregate(unittest.TestCase):
    """Test summaries over seeds."""

    def setUp(self) -> None:
        """Set up four successful runs and one failure in a cell, and one run in another."""
        self.runs = [_run(seed, float(seed + 1)) for seed in range(4)]
        self.runs.append(_failed(4, system="duffing", method="ms-phs-ab-3", noise_variance=1e-3, jitter=0.0))
        self.runs.append(_run(0, 2.0, method="ms-ode-ab-3", h_mse=None, mean_variance=None))

    def test_summary(self) -> None:
        """Test the summary statistics of a cell."""
        summary = aggregate(self.runs)
        row = summary[(summary["method"] == "ms-phs-ab-3") & (summary["metric"] == "vf_mse")].iloc[0]
        self.assertEqual(4, row["n_ok"])
        self.assertEqual(5, row["n_total"])
        self.assertEqual(4, row["n"])
        self.assertAlmostEqual(2.5, row["mean"])
        self.assertAlmostEqual(np.std([1.0, 2.0, 3.0, 4.0], ddof=1), row["std"])
        self.assertAlmostEqual(2.5, row["median"])
        self.assertAlmostEqual(1.75, row["q1"])
        self.assertAlmostEqual(3.25, row["q3"])
        self.assertAlmostEqual(2.5 - 1.96 * row["std"] / 2.0, row["ci_low"])
        self.assertAlmostEqual(2.5 + 1.96 * row["std"] / 2.0, row["ci_high"])

    def test_single_seed(self) -> None:
        """Test that a single value has no spread and that missing metrics stay empty."""
        summary = aggregate(self.runs)
        ode = summary[summary["method"] == "ms-ode-ab-3"].set_index("metric")
        self.assertEqual(0.0, ode.loc["vf_mse", "std"])
        self.assertEqual(0, ode.loc["h_mse", "n"])
        self.assertTrue(np.isnan(ode.loc["h_mse", "mean"]))

    def test_order_invariant(self) -> None:
        """Test that the summary doesn't depend on the order of the runs."""
        order = np.random.default_rng(1).permutation(len(self.runs))
        pd.testing.assert_frame_equal(aggregate(self.runs), aggregate([self.runs[i] for i in order]))

    def test_empty(self) -> None:
        """Test that there is nothing to summarize without runs."""
        with self.assertRaises(MetricError):
            aggregate([])

    def test_calibration_tracking(self) -> None:
        """Test the rank correlation of the surface error and variance over noise levels."""
        runs = [
            _run(seed, 1.0, noise_variance=noise, h_mse=noise * (seed + 1), mean_variance=noise * 2.0)
            for noise in (1e-4, 1e-3, 1e-2)
            for seed in range(3)
        ]
        rv = calibration_tracking(runs, "duffing", "ms-phs-ab-3")
        self.assertAlmostEqual(1.0, rv.correlation)
        self.assertEqual({1e-4: 1.0, 1e-3: 1.0, 1e-2: 1.0}, {k: round(v, 12) for k, v in rv.median_ratios.items()})
        with self.assertRaises(MetricError):
            calibration_tracking(runs[:3], "duffing", "ms-phs-ab-3")
        with self.assertRaises(MetricError):
            calibration_tracking(runs, "duffing", "ms-ode-ab-3")


class TestReport(unittest.TestCase):
    """Test report tables written from recorded runs."""

    def _write_runs(self, directory: Path, runs: list[RunResult]) -> None:
        directory.joinpath("runs.jsonl").write_text("".join(run.model_dump_json() + "\n" for run in runs))

    def test_cosine_table(self) -> None:
        """Test the layout of the cosine distance table."""
        runs = [
            _run(seed, 1.0 + seed, system=system, method=method, noise_variance=noise)
            for system in ("mass-spring", "van-der-pol", "duffing")
            for method in ("ms-phs-ab-3", "ms-ode-ab-3", "gp-phs-loess-2")
            for noise in (1e-3,)
            for seed in range(3)
        ]
        with tempfile.TemporaryDirectory() as directory:
            self._write_runs(Path(directory), runs)
            paths = report(directory)
            table = pd.read_csv(paths["cosine"], index_col=[0, 1])
            vf_mse = pd.read_csv(paths["vf_mse"])
        self.assertEqual((3, 3), table.shape)
        self.assertEqual({"ms-phs-ab-3", "ms-ode-ab-3", "gp-phs-loess-2"}, set(table.columns))
        for value in table.to_numpy().ravel():
            self.assertRegex(value, MEAN_STD)
        self.assertEqual("0.020 (0.010)", table.loc[("duffing", 1e-3), "ms-phs-ab-3"])
        self.assertEqual(9, len(vf_mse))

    def test_jitter_table(self) -> None:
        """Test the layout of the calibration table over jitter levels."""
        runs = [
            _run(seed, 1.0, jitter=jitter, h_mse=float(seed + 1), mean_variance=1.0)
            for jitter in (0.0, 0.01, 0.02, 0.05, 0.1)
            for seed in range(3)
        ]
        with tempfile.TemporaryDirectory() as directory:
            self._write_runs(Path(directory), runs)
            paths = report(directory)
            table = pd.read_csv(paths["calibration_jitter"], index_col=[0, 1, 2])
            noise = pd.read_csv(paths["calibration_noise"])
        self.assertEqual((5, 1), table.shape)
        for value in table["ms-phs-ab-3"]:
            self.assertEqual("2 [1.5, 2.5]", value)
            self.assertRegex(value, MEDIAN_IQR)
        self.assertEqual({"h_mse", "mean_variance", "ratio"}, set(noise["metric"]))
        self.assertTrue(np.all(noise["n_ok"] == 3))

    def test_empty(self) -> None:
        """Test that an empty results directory can't be reported."""
        with tempfile.TemporaryDirectory() as directory, self.assertRaises(MetricError):
            report(directory)


class TestSweep(unittest.TestCase):
    """Test running sweeps end to end."""

    def test_sweep(self) -> None:
        """Test that a sweep records every run, resumes, reports and is deterministic."""
        config = _small_config()
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            results = run_sweep(config, first, progress=False)
            self.assertEqual([0, 1, 2], [result.seed for result in results])
            self.assertTrue(all(result.status == "ok" for result in results), [r.error for r in results])
            for result in results:
                self.assertIsNotNone(result.metrics.ratio)
                self.assertIn("log_noise_variance", result.parameters)
                self.assertTrue(Path(first, "meshes", f"{result.run_key}.csv").is_file())
            self.assertEqual(config, ExperimentConfig.model_validate_json(Path(first, "config.json").read_text()))

            with self.assertLogs("phsgp.bench", level="INFO") as logs:
                again = run_sweep(config, first, progress=False)
            self.assertIn("0 runs to do, 3 already recorded", "\n".join(logs.output))
            self.assertEqual(3, len(read_runs(first)))
            self.assertEqual([r.run_key for r in results], [r.run_key for r in again])

            paths = report(first)
            plot = pd.read_csv(Path(first, "plots", f"{results[0].cell_key}.csv"))
            self.assertEqual(25, len(plot))
            self.assertIn("h_variance", plot.columns)

            run_sweep(config, second, progress=False)
            report(second)
            self.assertEqual(paths["vf_mse"].read_text(), Path(second, "vf_mse.csv").read_text())

    def test_failed_run(self) -> None:
        """Test that a failing method is recorded instead of stopping the sweep."""
        config = _small_config(methods=["gp-phs-savgol-3"], jitters=[0.0, 0.01], seeds=[0])
        with self.assertLogs("phsgp.bench", level="WARNING"):
            failed = run_one(config, "mass-spring", "gp-phs-savgol-3", 1e-3, 0.01, 0)
        self.assertEqual("failed", failed.status)
        self.assertTrue(failed.error.startswith("IrregularGridError"))
        self.assertIsNone(failed.metrics)
        regular = run_one(config, "mass-spring", "gp-phs-savgol-3", 1e-3, 0.0, 0)
        self.assertEqual("ok", regular.status, regular.error)

        summary = aggregate([failed, regular])
        row = summary[(summary["jitter"] == 0.01) & (summary["metric"] == "vf_mse")].iloc[0]
        self.assertEqual(0, row["n_ok"])
        self.assertEqual(1, row["n_total"])

    def test_no_surface(self) -> None:
        """Test that componentwise models only get field metrics."""
        config = _small_config(methods=["ms-ode-ab-2"])
        rv = run_one(config, "mass-spring", "ms-ode-ab-2", 1e-3, 0.01, 0)
        self.assertEqual("ok", rv.status, rv.error)
        self.assertIsNone(rv.metrics.h_mse)


class TestModelFiles(unittest.TestCase):
    """Test rebuilding models from documents."""

    def test_load_model(self) -> None:
        """Test that a rebuilt model predicts like the fitted one, and only on its own data."""
        system = duffing()
        dataset = generate_dataset(system, n_samples=20, t_span=(0.0, 3.0), seed=4)
        model = build_model("ms-phs-ab-3", dataset, system)
        fit(model, OptimizerConfig(iterations=3))
        points = np.array([[0.1, 0.2], [-0.5, 0.3]])
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory).joinpath("data.csv")
            write_dataset(dataset, path)
            document = ModelDocument.from_model(
                model, method="ms-phs-ab-3", system="duffing", dataset_fingerprint=dataset_fingerprint(path)
            )
            rv, rv_system = load_model(document, path)
            self.assertEqual("duffing", rv_system.name)
            np.testing.assert_allclose(model.predict(points).mean, rv.predict(points).mean, rtol=1e-10)

            write_dataset(generate_dataset(system, n_samples=20, t_span=(0.0, 3.0), seed=5), path)
            with self.assertRaises(DatasetMismatchError):
                load_model(document, path)
            with self.assertRaises(ConfigurationError):
                load_model(document.model_copy(update={"system": None, "dataset_fingerprint": dataset_fingerprint(path)}), path)


@SLOW
class TestAcceptance(unittest.TestCase):
    """Desk-scale reproductions of the benchmark results."""

    def test_data_scaling(self) -> None:
        """Test that the field error shrinks as the trajectory gets denser."""
        medians = []
        for n_samples in (50, 100, 200):
            config = ExperimentConfig(
                systems=["mass-spring"],
                methods=["ms-phs-ab-3"],
                n_samples=n_samples,
                noise_variances=[1e-4],
                jitters=[0.0],
                seeds=list(range(5)),
            )
            with tempfile.TemporaryDirectory() as directory:
                results = run_sweep(config, directory, progress=False)
            medians.append(np.median([result.metrics.vf_mse for result in results]))
        self.assertTrue(np.all(np.diff(medians) < 0.0), medians)

    def test_cosine_distances(self) -> None:
        """Test that the structured prior recovers the field direction on every system."""
        config = ExperimentConfig(
            methods=["ms-phs-ab-3", "ms-ode-ab-3"], noise_variances=[1e-4], jitters=[0.0], seeds=list(range(10))
        )
        with tempfile.TemporaryDirectory() as directory:
            summary = aggregate(run_sweep(config, directory, progress=False)).set_index(["system", "method", "metric"])
        for system in config.systems:
            self.assertLessEqual(summary.loc[(system, "ms-phs-ab-3", "vf_cosine_distance"), "median"], 0.02)
        self.assertGreater(
            summary.loc[("duffing", "ms-ode-ab-3", "vf_cosine_distance"), "median"],
            summary.loc[("duffing", "ms-phs-ab-3", "vf_cosine_distance"), "median"],
        )

    def test_jitter_calibration(self) -> None:
        """Test that the multistep surface stays calibrated under jitter while prefiltering doesn't."""
        config = ExperimentConfig(
            systems=["duffing"],
            methods=["ms-phs-ab-3", "gp-phs-loess-2"],
            noise_variances=[1e-3],
            jitters=[0.0, 0.01, 0.05],
            seeds=list(range(10)),
        )
        with tempfile.TemporaryDirectory() as directory:
            summary = aggregate(run_sweep(config, directory, progress=False))
        ratios = summary[summary["metric"] == "ratio"].set_index(["method", "jitter"])["median"]
        for jitter in config.jitters:
            self.assertGreaterEqual(ratios[("ms-phs-ab-3", jitter)], 0.5)
            self.assertLessEqual(ratios[("ms-phs-ab-3", jitter)], 2.5)
        for jitter in (0.01, 0.05):
            self.assertGreater(ratios[("gp-phs-loess-2", jitter)], 3.0)

    def test_calibration_tracking(self) -> None:
        """Test that the multistep surface variance rises with its error across noise levels."""
        config = ExperimentConfig(
            systems=["duffing"], methods=["ms-phs-ab-3", "gp-phs-loess-2"], jitters=[0.0], seeds=list(range(10))
        )
        with tempfile.TemporaryDirectory() as directory:
            runs = run_sweep(config, directory, progress=False)
        self.assertGreaterEqual(calibration_tracking(runs, "duffing", "ms-phs-ab-3").correlation, 0.8)
        ratios = calibration_tracking(runs, "duffing", "gp-phs-loess-2").median_ratios
        high = [ratios[noise] for noise in sorted(ratios) if noise >= 0.01]
        self.assertTrue(np.all(np.diff(high) > 0.0), ratios)
