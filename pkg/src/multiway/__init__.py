"""Array-variate normal models with Kronecker covariance for incomplete multiway data."""

from .avspmm import (AdditiveMean, AvspmmModel, KnownKernel, Unstructured, fit_avspmm,
                     kron_mse)
from .exceptions import (ConditioningError, ConfigError, DataError, DomainError,
                         MultiwayError, NotPositiveDefiniteError, NumericalError,
                         RankDeficiencyError, SizeLimitError)
from .kernels_io import (array_to_long_table, load_kernel_matrix, load_long_table,
                         marker_kernel)
from .missing import (FitConfig, FitReport, PartialSample, conditional_mean_impute,
                      flip_flop_incomplete, observed_loglik)
from .normal import ArrayNormal, log_density, sample

__version__ = "0.1.0"

__all__ = [
    "AdditiveMean",
    "ArrayNormal",
    "AvspmmModel",
    "ConditioningError",
    "ConfigError",
    "DataError",
    "DomainError",
    "FitConfig",
    "FitReport",
    "KnownKernel",
    "MultiwayError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "PartialSample",
    "RankDeficiencyError",
    "SizeLimitError",
    "Unstructured",
    "array_to_long_table",
    "conditional_mean_impute",
    "fit_avspmm",
    "flip_flop_incomplete",
    "kron_mse",
    "load_kernel_matrix",
    "load_long_table",
    "log_density",
    "marker_kernel",
    "observed_loglik",
    "sample",
]
