"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto stable exit codes so shell pipelines can react:
0 success, 2 configuration problem, 3 data problem, 4 numeric failure.
"""
from __future__ import annotations


class PipelineError(Exception):
    """Base class for errors that should surface as a clean CLI failure."""

    exit_code = 1


class ConfigError(PipelineError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(PipelineError):
    """Missing, unreadable, or structurally invalid data on disk."""

    exit_code = 3


class NumericError(PipelineError):
    """Non-finite losses or other numeric divergence during training."""

    exit_code = 4
