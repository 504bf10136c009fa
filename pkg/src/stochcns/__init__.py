"""Pseudo-spectral Galerkin simulator and verification suite for a regularized
stochastic compressible Navier-Stokes system with quantum and drag terms on
the periodic torus."""
from .errors import (ConfigurationError, PositivityError, SingularOperatorError, SolverError,
                     StochCNSError)
from .kernels import BACKEND
from .spectral import SpectralField, TorusGrid, get_grid
from .state import FluidState, RegularizationParams, initial_fields, prepare_initial
from .noise import NoiseModel, make_noise, noise_from_table
from .scheme import DiagnosticTrace, integrate, run_path, window_step
from .montecarlo import EnsembleConfig, run_ensemble, simulate_ensemble
from .limits import LimitSchedule, build_schedule, sweep

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigurationError", "DiagnosticTrace", "EnsembleConfig", "FluidState", "LimitSchedule",
    "NoiseModel", "PositivityError", "RegularizationParams", "SingularOperatorError", "SolverError",
    "SpectralField", "StochCNSError", "TorusGrid", "build_schedule", "get_grid", "initial_fields",
    "integrate", "make_noise", "noise_from_table", "prepare_initial", "run_ensemble", "run_path",
    "simulate_ensemble", "sweep", "window_step",
]
