"""Monte Carlo virtual clinical trials for artificial-pancreas algorithms."""

from vctrial.errors import (
    ConfigError,
    DerivationInfeasible,
    NoRootError,
    NumericalBlowup,
    SamplingExhausted,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DerivationInfeasible",
    "NoRootError",
    "NumericalBlowup",
    "SamplingExhausted",
    "__version__",
]
