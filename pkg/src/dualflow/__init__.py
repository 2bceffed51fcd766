"""Optimal investment flows computed from the dual side.

Submodules: ``utility`` (utilities and conjugates), ``market`` (models and
path simulation), ``kernel`` (lognormal dual quadrature), ``duality``
(static and dynamic solutions, wealth flows), ``inverse`` (inverse flows),
``basis_risk`` (exponential utility with a non-traded factor), ``bspde``
(decompositions and BSPDE residuals), ``io`` and ``cli``.
"""

from .errors import (BlowUpError, CapabilityError, ConcavityError, ConfigError, DomainError,
                     DualflowError, DualityError, ExtrapolationError, GridError, IntegrabilityError,
                     ModelError, NumericsError, RegularityError, RepresentationError, WeightError)
from .market import BasisRisk, BlackScholes, MarkovSharpe, PathBundle, TimeGrid, simulate_paths
from .report import ResidualReport, Statistic
from .utility import Exponential, ExponentialMixture, check_regularity, conjugate, quadratic_utility

__version__ = "0.1.0"

__all__ = [
    "BasisRisk", "BlackScholes", "BlowUpError", "CapabilityError", "ConcavityError", "ConfigError",
    "DomainError", "DualflowError", "DualityError", "Exponential", "ExponentialMixture",
    "ExtrapolationError", "GridError", "IntegrabilityError", "MarkovSharpe", "ModelError",
    "NumericsError", "PathBundle", "RegularityError", "RepresentationError", "ResidualReport",
    "Statistic", "TimeGrid", "WeightError", "check_regularity", "conjugate", "quadratic_utility",
    "simulate_paths", "__version__",
]
