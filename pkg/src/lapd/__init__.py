"""Langevin algorithm with prior diffusion and exact oracles for checking it."""

__version__ = "0.1.0"

from .model import (
    LikelihoodSpec,
    PriorSpec,
    Regularity,
    RidgeSeparableModel,
    build_ridge_separable,
    find_mode,
    norm_likelihood,
    quadratic_likelihood,
    sg_variance_at_mode,
    zero_likelihood,
)
from .oracle import GaussianMoments, gaussian_kl, gaussian_w2, run_moment_recursion
from .prior_diffusion import diffuse, ou_exact_step, separable_numeric_step
from .sampler import Recorder, Trajectory, init_from_prior, run_ensemble, run_lapd, run_sgld
from .schedule import StepSchedule, trajectory_weights

__all__ = [
    "__version__",
    "GaussianMoments",
    "LikelihoodSpec",
    "PriorSpec",
    "Recorder",
    "Regularity",
    "RidgeSeparableModel",
    "StepSchedule",
    "Trajectory",
    "build_ridge_separable",
    "diffuse",
    "find_mode",
    "gaussian_kl",
    "gaussian_w2",
    "init_from_prior",
    "norm_likelihood",
    "ou_exact_step",
    "quadratic_likelihood",
    "run_ensemble",
    "run_lapd",
    "run_moment_recursion",
    "run_sgld",
    "separable_numeric_step",
    "sg_variance_at_mode",
    "trajectory_weights",
    "zero_likelihood",
]
