"""Tests for :mod:`phsgp`."""
