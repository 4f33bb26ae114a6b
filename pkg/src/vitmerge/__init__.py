"""Merging tiny Vision Transformers trained on synthetic tasks.

Static mergers (AvgMean, Task Arithmetic, RegMean) live in :mod:`vitmerge.merge`;
the gating-based controllable merge lives in :mod:`vitmerge.gate`.
"""

__version__ = "0.1.0"


class VitMergeError(Exception):
    """Base class for all package errors."""


class DimensionError(VitMergeError, ValueError):
    pass


class SingularSystemError(VitMergeError, ArithmeticError):
    pass


class ConfigError(VitMergeError, ValueError):
    pass


class DataError(VitMergeError, ValueError):
    pass


class TrainingError(VitMergeError, RuntimeError):
    pass


class MergeError(VitMergeError, ValueError):
    pass


class GateError(VitMergeError, ValueError):
    pass
