"""Maximum-likelihood inference for probit mixed models by expectation
propagation, with adaptive Gauss-Hermite and Laplace reference engines."""

from .data import DataFormatError, Group, GroupedDataset, read_csv, write_csv
from .ep import (
    EPGroupState,
    ImproperMessageError,
    NaturalParams,
    c_probit,
    ep_best_predict,
    ep_group_loglik,
    ep_group_loop,
    ep_logliks,
    k_probit,
    project_probit_site,
)
from .fit import CIRow, FitConfig, FitResult, LogLikelihood, confidence_intervals, fit
from .oracles import aghq_group_loglik, aghq_logliks, aghq_posterior_moments, laplace_fits
from .study import STUDY1, STUDY2, SimConfig, discrepancy_sweep, run_coverage, simulate

__version__ = "0.1.0"

__all__ = [
    "CIRow",
    "DataFormatError",
    "EPGroupState",
    "FitConfig",
    "FitResult",
    "Group",
    "GroupedDataset",
    "ImproperMessageError",
    "LogLikelihood",
    "NaturalParams",
    "STUDY1",
    "STUDY2",
    "SimConfig",
    "aghq_group_loglik",
    "aghq_logliks",
    "aghq_posterior_moments",
    "c_probit",
    "confidence_intervals",
    "discrepancy_sweep",
    "ep_best_predict",
    "ep_group_loglik",
    "ep_group_loop",
    "ep_logliks",
    "fit",
    "k_probit",
    "laplace_fits",
    "project_probit_site",
    "read_csv",
    "run_coverage",
    "simulate",
    "write_csv",
]
