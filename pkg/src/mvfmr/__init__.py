"""Multivariable functional Mendelian randomization for sparse longitudinal exposures."""

__version__ = "0.1.0"

from .estimators import GmmOptions, InstrumentMatrix, PseudoExposureDesign, cu_gmm, two_sri
from .fpca import SparseFPCA, SparseFunctionalSample, fit_fpca
from .model import MVFMR, UFMR, ModelConfig, fit_mvfmr, fit_ufmr, fit_with_univariable
from .simulate import ScenarioConfig, simulate_replicate

__all__ = [
    "__version__",
    "GmmOptions",
    "InstrumentMatrix",
    "PseudoExposureDesign",
    "cu_gmm",
    "two_sri",
    "SparseFPCA",
    "SparseFunctionalSample",
    "fit_fpca",
    "MVFMR",
    "UFMR",
    "ModelConfig",
    "fit_mvfmr",
    "fit_ufmr",
    "fit_with_univariable",
    "ScenarioConfig",
    "simulate_replicate",
]
