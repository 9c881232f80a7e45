"""Survival-analysis benchmarking engine for ECG-style cohorts."""

from survbench.__version__ import __version__

__all__ = ["__version__"]
