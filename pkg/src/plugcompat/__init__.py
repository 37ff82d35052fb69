"""Plug-in fine-tuning modules for dual encoders and their reuse across backbone upgrades."""

from plugcompat.errors import (
    CapacityError,
    ConfigError,
    ContainerError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    GenerationError,
    PlugCompatError,
    TrainingError,
    UpgradeError,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "ContainerError",
    "ContractError",
    "DegenerateInputError",
    "DimensionError",
    "GenerationError",
    "PlugCompatError",
    "TrainingError",
    "UpgradeError",
    "__version__",
]
