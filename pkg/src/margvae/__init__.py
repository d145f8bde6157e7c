"""Conditional VAEs (CVAE and GP prior variants) that learn from data with
missing values in both observations and auxiliary covariates by marginalising
the missing covariates through amortised variational inference."""

from . import cli, data, diffmath, distributions, elbo, kernels, models, networks
from .data import (
    CovariateTable,
    Dataset,
    MaskedTable,
    RotatedDigitsConfig,
    generate_rotated_digits,
    inject_mcar,
    knn_impute,
    load_longitudinal_csv,
    mean_impute,
    split,
)
from .distributions import Column, CovariatePrior, CovariateSchema, fit_covariate_prior
from .elbo import Batch, ElboBreakdown, InducingState, MissingExpectationPlan, elbo_step
from .kernels import KernelComponent, KernelSpec, LongitudinalIndex
from .models import (
    ModelConfig,
    TrainConfig,
    TrainedModel,
    evaluate,
    impute_covariates,
    predict_y,
    train,
)

__version__ = "0.1.0"
