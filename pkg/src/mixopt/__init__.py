"""Gaussian-process strength forecasting, GWP scoring and multi-objective mix design."""

from .dataset import DataError, Dataset, MixComposition, StrengthObservation, parse_mix_table
from .gp import FitError, GpModel, KernelHyperparams, fit, fit_dataset, predict
from .gwp import EmissionFactors, gwp, load_factors
from .metrics import EvalTable, evaluate_by_age, r_squared, rmse
from .mobo import DesignSpace, ehvi_mc, hypervolume, optimize_acquisition, pareto_front, qlog_ehvi

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "Dataset",
    "DesignSpace",
    "EmissionFactors",
    "EvalTable",
    "FitError",
    "GpModel",
    "KernelHyperparams",
    "MixComposition",
    "StrengthObservation",
    "ehvi_mc",
    "evaluate_by_age",
    "fit",
    "fit_dataset",
    "gwp",
    "hypervolume",
    "load_factors",
    "optimize_acquisition",
    "parse_mix_table",
    "pareto_front",
    "predict",
    "qlog_ehvi",
    "r_squared",
    "rmse",
]
