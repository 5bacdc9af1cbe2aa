"""Heteroscedastic multi-output censored Gaussian process regression."""

from .data import CensoredDataset, load_csv, save_csv
from .kernels import LmcSpec, RbfKernelParams, lmc_covariance
from .likelihoods import LikelihoodSpec
from .model import ModelConfig, TrainedModel, TrainingConfig, fit, predict, variant_config

__all__ = [
    "CensoredDataset",
    "LikelihoodSpec",
    "LmcSpec",
    "ModelConfig",
    "RbfKernelParams",
    "TrainedModel",
    "TrainingConfig",
    "fit",
    "lmc_covariance",
    "load_csv",
    "predict",
    "save_csv",
    "variant_config",
]

__version__ = "0.1.0"
