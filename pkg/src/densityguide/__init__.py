"""Log-density control for diffusion and flow samplers, checked on analytic targets."""

from .errors import (
    ConfigError,
    DegenerateScoreError,
    DensityGuideError,
    DomainError,
    IntegrationError,
    UndefinedDensityError,
    UnsupportedCapabilityError,
)
from .schedules import NoiseSchedule
from .targets import GaussianMixtureTarget

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateScoreError",
    "DensityGuideError",
    "DomainError",
    "GaussianMixtureTarget",
    "IntegrationError",
    "NoiseSchedule",
    "UndefinedDensityError",
    "UnsupportedCapabilityError",
]
