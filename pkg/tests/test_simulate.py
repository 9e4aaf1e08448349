"""Tests for simulation, sampling and observation."""

import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from phsgp.simulate import (
    NonFiniteStateError,
    TimestampRangeError,
    TrajectoryDataset,
    dataset_fingerprint,
    generate_dataset,
    jittered_timestamps,
    observe,
    read_dataset,
    rk4_integrate,
    simulate_system,
    write_dataset,
)
from phsgp.systems import duffing, mass_spring


class TestIntegration(unittest.TestCase):
    """Test the fixed-step Runge-Kutta integrator."""

    def test_exponential_decay(self) -> None:
        """Test a single step of exponential decay against the fourth-order Taylor polynomial."""
        rv = rk4_integrate(lambda x, u, t: -x, np.array([1.0]), np.array([0.0, 0.1]))
        self.assertAlmostEqual(1.0 - 0.1 + 0.1**2 / 2 - 0.1**3 / 6 + 0.1**4 / 24, rv.states[-1, 0], places=12)
        self.assertAlmostEqual(0.9048375, rv.states[-1, 0], places=10)
        self.assertLess(abs(rv.states[-1, 0] - np.exp(-0.1)), 1e-7)
        np.testing.assert_allclose(-rv.states, rv.derivatives)

    def test_harmonic_period(self) -> None:
        """Test that the harmonic oscillator returns to its start after one period."""
        grid = np.linspace(0.0, 2.0 * np.pi, int(np.ceil(2.0 * np.pi / 4e-3)) + 1)
        rv = rk4_integrate(
            lambda x, u, t: np.array([x[1], -x[0]]), np.array([1.0, 0.0]), grid
        )
        self.assertLess(np.linalg.norm(rv.states[-1] - [1.0, 0.0]), 1e-6)

    def test_input(self) -> None:
        """Test that the input signal reaches the field."""
        rv = rk4_integrate(
            lambda x, u, t: u, np.zeros(1), np.linspace(0.0, 1.0, 101), lambda t: np.array([2.0 * t])
        )
        self.assertAlmostEqual(1.0, rv.states[-1, 0])
        self.assertEqual((101, 1), rv.inputs(rv.times).shape)

    def test_invalid_grid(self) -> None:
        """Test that a non-increasing grid is rejected."""
        with self.assertRaises(ValueError):
            rk4_integrate(lambda x, u, t: -x, np.ones(1), np.array([0.0, 0.2, 0.1]))

    def test_blow_up(self) -> None:
        """Test that a finite-time blow-up is reported with its step."""
        with np.errstate(over="ignore", invalid="ignore"), self.assertRaises(NonFiniteStateError) as e:
            rk4_integrate(lambda x, u, t: x**2, np.ones(1), np.linspace(0.0, 2.0, 201))
        self.assertGreater(e.exception.time, 0.9)

    def test_simulate_system(self) -> None:
        """Test that a benchmark simulation covers its window at the nominal step."""
        rv = simulate_system(duffing(), (0.0, 1.0), 4e-3)
        self.assertEqual(251, rv.times.size)
        np.testing.assert_array_equal([1.0, 0.0], rv.states[0])
        np.testing.assert_allclose([0.0, -5.0], rv.derivatives[0])


class TestTimestamps(unittest.TestCase):
    """Test jittered sampling times."""

    def test_no_jitter(self) -> None:
        """Test that zero jitter gives the uniform grid."""
        np.testing.assert_array_equal(np.linspace(0.0, 20.0, 100), jittered_timestamps(0.0, 20.0, 100, 0.0, 0))

    def test_properties(self) -> None:
        """Test that jittered times are strictly increasing, within range, and reproducible."""
        for seed in range(5):
            times = jittered_timestamps(0.0, 1.0, 50, 0.5, seed)
            self.assertTrue(np.all(np.diff(times) > 0.0))
            self.assertGreaterEqual(times[0], 0.0)
            self.assertLessEqual(times[-1], 1.0)
            np.testing.assert_array_equal(times, jittered_timestamps(0.0, 1.0, 50, 0.5, seed))
        self.assertFalse(
            np.array_equal(jittered_timestamps(0.0, 1.0, 50, 0.5, 0), jittered_timestamps(0.0, 1.0, 50, 0.5, 1))
        )

    def test_mean_absolute_deviation(self) -> None:
        """Test that the jitter has the expected mean absolute deviation from the grid."""
        grid = np.linspace(0.0, 20.0, 100)
        deviations = np.concatenate(
            [np.abs(jittered_timestamps(0.0, 20.0, 100, 0.05, seed) - grid)[1:-1] for seed in range(20)]
        )
        expected = 0.05 * np.sqrt(2.0 / np.pi)
        self.assertAlmostEqual(expected, float(np.mean(deviations)), delta=0.3 * expected)

    def test_invalid(self) -> None:
        """Test invalid sampling requests."""
        with self.assertRaises(ValueError):
            jittered_timestamps(0.0, 1.0, 1, 0.0, 0)
        with self.assertRaises(ValueError):
            jittered_timestamps(0.0, 1.0, 10, -0.1, 0)
        with self.assertRaises(ValueError):
            jittered_timestamps(1.0, 1.0, 10, 0.0, 0)


class TestObserve(unittest.TestCase):
    """Test noisy observation of dense trajectories."""

    @classmethod
    def setUpClass(cls) -> None:
        """Simulate the mass-spring benchmark once."""
        cls.system = mass_spring()
        cls.trajectory = simulate_system(cls.system, (0.0, 10.0))

    def test_exact_at_grid(self) -> None:
        """Test that noiseless observations at grid times reproduce the integrator states."""
        times = self.trajectory.times[::50]
        rv = observe(self.trajectory, times, 0.0, 0)
        np.testing.assert_allclose(self.trajectory.states[::50], rv.states, atol=1e-12)
        np.testing.assert_allclose(self.system.inputs(times), rv.inputs)

    def test_interpolation(self) -> None:
        """Test that off-grid observations match a finer simulation."""
        fine = simulate_system(self.system, (0.0, 10.0), 1e-3)
        times = np.array([0.0123, 3.3333, 7.77771])
        rv = observe(self.trajectory, times, 0.0, 0)
        expected = observe(fine, times, 0.0, 0)
        np.testing.assert_allclose(expected.states, rv.states, atol=1e-7)

    def test_noise_variance(self) -> None:
        """Test that the empirical noise variance is within five percent of the requested one."""
        times = np.linspace(0.0, 10.0, 5000)
        truth = observe(self.trajectory, times, 0.0, 0).states
        rv = observe(self.trajectory, times, 0.1, 17)
        self.assertAlmostEqual(0.01, rv.noise_variance)
        self.assertAlmostEqual(0.01, float(np.var(rv.states - truth)), delta=0.05 * 0.01)

    def test_out_of_range(self) -> None:
        """Test that times outside the trajectory are rejected."""
        with self.assertRaises(TimestampRangeError) as e:
            observe(self.trajectory, np.array([5.0, 10.5]), 0.1, 0)
        self.assertEqual([10.5], e.exception.offending)


class TestDataset(unittest.TestCase):
    """Test datasets."""

    def test_generate(self) -> None:
        """Test generating a dataset end to end."""
        system = duffing()
        dataset = generate_dataset(system, n_samples=40, t_span=(0.0, 5.0), noise_variance=1e-3, jitter=0.05, seed=3)
        self.assertEqual(40, dataset.size)
        self.assertEqual(2, dataset.state_dim)
        self.assertEqual(1, dataset.input_dim)
        self.assertEqual(3, dataset.seed)
        np.testing.assert_allclose(system.inputs(dataset.timestamps), dataset.inputs)
        again = generate_dataset(system, n_samples=40, t_span=(0.0, 5.0), noise_variance=1e-3, jitter=0.05, seed=3)
        np.testing.assert_array_equal(dataset.states, again.states)
        other = generate_dataset(system, n_samples=40, t_span=(0.0, 5.0), noise_variance=1e-3, jitter=0.05, seed=4)
        self.assertFalse(np.array_equal(dataset.timestamps, other.timestamps))

    def test_validation(self) -> None:
        """Test that inconsistent datasets are rejected."""
        with self.assertRaises(ValidationError):
            TrajectoryDataset(
                timestamps=np.array([0.0, 0.0]), states=np.zeros((2, 2)), inputs=np.zeros((2, 1)), noise_variance=0.0
            )
        with self.assertRaises(ValidationError):
            TrajectoryDataset(
                timestamps=np.array([0.0, 1.0]), states=np.zeros((3, 2)), inputs=np.zeros((2, 1)), noise_variance=0.0
            )
        with self.assertRaises(ValidationError):
            TrajectoryDataset(
                timestamps=np.array([0.0, 1.0]), states=np.zeros((2, 2)), inputs=np.zeros((2, 1)), noise_variance=-1.0
            )

    def test_head(self) -> None:
        """Test truncating a dataset."""
        dataset = generate_dataset(mass_spring(), n_samples=10, t_span=(0.0, 1.0))
        head = dataset.head(4)
        self.assertEqual(4, head.size)
        np.testing.assert_array_equal(dataset.states[:4], head.states)

    def test_file(self) -> None:
        """Test that datasets survive a round trip through a file bit for bit."""
        dataset = generate_dataset(duffing(), n_samples=30, t_span=(0.0, 3.0), noise_variance=0.02, jitter=0.1, seed=9)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory).joinpath("data.csv")
            write_dataset(dataset, path)
            rv = read_dataset(path)
            fingerprint = dataset_fingerprint(path)
            write_dataset(rv, path)
            self.assertEqual(fingerprint, dataset_fingerprint(path))
        np.testing.assert_array_equal(dataset.timestamps, rv.timestamps)
        np.testing.assert_array_equal(dataset.states, rv.states)
        np.testing.assert_array_equal(dataset.inputs, rv.inputs)
        self.assertEqual(dataset.noise_variance, rv.noise_variance)
        self.assertEqual(dataset.seed, rv.seed)
