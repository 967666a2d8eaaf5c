"""SPD-preserving learned column-row updates for sparse precision estimation."""

from . import autodiff, baselines, core, datagen, linalg, models, training

__all__ = [
    "autodiff",
    "baselines",
    "core",
    "datagen",
    "linalg",
    "models",
    "training",
]

__version__ = "0.1.0"
