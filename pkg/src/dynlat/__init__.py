"""Dynamic latent-process network models for multivariate longitudinal data.

The package estimates systems of latent processes linked by a temporal
influence matrix from repeated marker measurements: model specification,
exact Gaussian likelihood, Levenberg-Marquardt maximization, prediction,
goodness of fit, discretization-step conversions and simulation studies.
"""

from .data import Dataset, load_long_csv, write_long_csv
from .modelspec import (InfluenceSpec, LinkSpec, MarkerSpec, ModelSpec,
                        Theta, pack, unpack)
from .optimizer import FitConfig, FitResult, fit

__all__ = [
    "Dataset", "load_long_csv", "write_long_csv",
    "InfluenceSpec", "LinkSpec", "MarkerSpec", "ModelSpec",
    "Theta", "pack", "unpack",
    "FitConfig", "FitResult", "fit",
]

__version__ = "0.1.0"
