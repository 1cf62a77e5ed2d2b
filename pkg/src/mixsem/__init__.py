"""Structural equation models with Gaussian mixtures, fitted by mean-field variational Bayes."""

from .criteria import CriteriaReport, compute_criteria, sample_theta, pointwise_loglik, vaic, vwaic
from .data import Dataset, DataError, load_csv, standardize_outcomes, write_csv
from .fitting import FitOptions, FitReport, NumericalError
from .latent import LatentInitOptions, LatentMixtureSpec, LatentQState, fit_latent, sweep_latent
from .outcome import InitOptions, OutcomeMixtureSpec, OutcomeQState, SpecError, fit, sweep
from .simulate import SimulationTruth, simulate
from .simstudy import StudyConfig, run_study
from .uncertainty import bootstrap, credible_interval, kde, percentile_interval, posterior_predictive

__version__ = "0.1.0"
