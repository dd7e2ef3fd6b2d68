"""Attention-gated multi-scale segmentation network on a numpy autograd core.

Submodules import lazily so the command line front end can pin BLAS thread
counts through the environment before numpy first loads.
"""

from .errors import (CheckpointError, ConfigError, GradientCheckError,
                     NumericalError, ShapeError, UsageError, ValidationError)

__version__ = "0.1.0"

_LAZY = {
    "Tensor": "tensor",
    "ComputationRecord": "tensor",
    "active_record": "tensor",
    "no_record": "tensor",
}

__all__ = [
    "Tensor",
    "ComputationRecord",
    "active_record",
    "no_record",
    "ShapeError",
    "UsageError",
    "ConfigError",
    "ValidationError",
    "NumericalError",
    "CheckpointError",
    "GradientCheckError",
    "__version__",
]


def __getattr__(name):
    if name in _LAZY:
        from importlib import import_module
        module = import_module(f".{_LAZY[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
