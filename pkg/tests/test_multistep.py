"""Tests for variable-step Adams-Bashforth constraints."""

import unittest

import numpy as np
from pydantic import ValidationError

from phsgp.multistep import (
    ConstraintError,
    InsufficientHistoryError,
    MultistepScheme,
    StepSizeError,
    ab_coefficients,
    build_constraints,
    kron_lift,
    lte_order_check,
    window_residuals,
)
from phsgp.systems import mass_spring


class TestCoefficients(unittest.TestCase):
    """Test single-window weights."""

    def test_constant_step(self) -> None:
        """Test the textbook constant-step weights."""
        h = 0.1
        np.testing.assert_allclose([h], ab_coefficients([h], 1), rtol=0, atol=1e-15)
        np.testing.assert_allclose([1.5 * h, -0.5 * h], ab_coefficients([h, h], 2), atol=1e-12)
        np.testing.assert_allclose(
            np.array([23.0, -16.0, 5.0]) / 12.0 * h, ab_coefficients([h, h, h], 3), atol=1e-12
        )

    def test_polynomial_exactness(self) -> None:
        """Test that variable-step weights integrate polynomials below the order exactly."""
        steps = [0.3, 0.1, 0.25]
        t_k = 2.0
        nodes = t_k - np.concatenate([[0.0], np.cumsum(steps[1:])])
        for order in (1, 2, 3):
            weights = ab_coefficients(steps, order)
            self.assertAlmostEqual(steps[0], float(np.sum(weights)), places=14)
            for degree in range(order):
                integral = ((t_k + steps[0]) ** (degree + 1) - t_k ** (degree + 1)) / (degree + 1)
                self.assertAlmostEqual(integral, float(weights @ nodes[:order] ** degree), places=12)

    def test_invalid(self) -> None:
        """Test invalid step histories."""
        with self.assertRaises(InsufficientHistoryError):
            ab_coefficients([0.1], 2)
        with self.assertRaises(StepSizeError):
            ab_coefficients([0.1, 0.0], 2)


class TestConstraints(unittest.TestCase):
    """Test stacked constraint matrices."""

    def test_forward_euler(self) -> None:
        """Test the forward Euler matrices on a small irregular grid."""
        rv = build_constraints(np.array([0.0, 0.1, 0.3]), MultistepScheme(order=1))
        np.testing.assert_array_equal([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]], rv.A)
        np.testing.assert_allclose([[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]], rv.B, atol=1e-15)
        self.assertEqual(2, rv.windows)

    def test_shapes(self) -> None:
        """Test that every order drops one window per consumed point."""
        timestamps = np.cumsum(np.random.default_rng(0).uniform(0.05, 0.15, size=12))
        for order in (1, 2, 3):
            rv = build_constraints(timestamps, MultistepScheme(order=order))
            self.assertEqual((12 - order, 12), rv.A.shape)
            self.assertEqual((12 - order, 12), rv.B.shape)
            np.testing.assert_array_equal(np.zeros(12 - order), rv.A.sum(axis=1))
            np.testing.assert_allclose(np.diff(timestamps)[order - 1 :], rv.B.sum(axis=1))
            A_I, B_I = rv.lift(2)
            self.assertEqual((2 * (12 - order), 24), A_I.shape)
            self.assertEqual((2 * (12 - order), 24), B_I.shape)

    def test_insufficient_history(self) -> None:
        """Test that a trajectory no longer than the window is rejected."""
        with self.assertRaises(InsufficientHistoryError) as e:
            build_constraints(np.array([0.0, 0.1, 0.2]), MultistepScheme(order=3))
        self.assertEqual(4, e.exception.required)
        self.assertEqual(3, e.exception.received)

    def test_not_increasing(self) -> None:
        """Test that repeated timestamps are rejected."""
        with self.assertRaises(StepSizeError):
            build_constraints(np.array([0.0, 0.1, 0.1, 0.2]), MultistepScheme(order=1))

    def test_step_ratio_warning(self) -> None:
        """Test that wildly uneven steps are reported."""
        with self.assertLogs("phsgp.multistep", level="WARNING") as logs:
            build_constraints(np.array([0.0, 0.001, 1.0, 1.1]), MultistepScheme(order=1))
        self.assertIn("step ratios", logs.output[0])

    def test_scheme(self) -> None:
        """Test scheme validation."""
        self.assertEqual("ab-3", MultistepScheme().key)
        self.assertEqual(2, MultistepScheme(order=2).window_width)
        with self.assertRaises(ValidationError):
            MultistepScheme(order=4)

    def test_kron_lift(self) -> None:
        """Test lifting to stacked states."""
        np.testing.assert_array_equal(
            [[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 2.0]], kron_lift(np.array([[1.0, 2.0]]), 2)
        )
        with self.assertRaises(ValueError):
            kron_lift(np.eye(2), 0)


class TestResiduals(unittest.TestCase):
    """Test window residuals and the empirical truncation order."""

    def test_exact_for_polynomials(self) -> None:
        """Test that a quadratic trajectory leaves no residual with order three."""
        timestamps = np.cumsum(np.random.default_rng(1).uniform(0.05, 0.15, size=10))
        states = np.column_stack([timestamps**3 / 3.0, timestamps])
        field_values = np.column_stack([timestamps**2, np.ones_like(timestamps)])
        residuals = window_residuals(timestamps, states, field_values, MultistepScheme(order=3))
        self.assertEqual((7,), residuals.shape)
        np.testing.assert_allclose(np.zeros(7), residuals, atol=1e-13)

    def test_mismatch(self) -> None:
        """Test that states must have one row per timestamp."""
        with self.assertRaises(ConstraintError):
            window_residuals(np.arange(5.0), np.zeros((4, 2)), np.zeros((4, 2)), MultistepScheme())

    def test_order_one(self) -> None:
        """Test that forward Euler residuals shrink quadratically on the mass-spring benchmark."""
        slope = lte_order_check(mass_spring(), MultistepScheme(order=1))
        self.assertGreaterEqual(slope, 1.7)
        self.assertLessEqual(slope, 2.3)

    def test_order_three(self) -> None:
        """Test that third-order residuals shrink with the fourth power of the step."""
        slope = lte_order_check(mass_spring(), MultistepScheme(order=3))
        self.assertGreaterEqual(slope, 3.5)
        self.assertLessEqual(slope, 4.5)

    def test_short_ladder(self) -> None:
        """Test that the regression needs four step levels."""
        with self.assertRaises(InsufficientHistoryError):
            lte_order_check(mass_spring(), MultistepScheme(order=1), [0.1, 0.05, 0.02])
