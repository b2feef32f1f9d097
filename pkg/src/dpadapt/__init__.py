"""Differentially private non-convex optimization toolkit.

Modules: accountant (privacy composition and calibration), models (loss
oracles and data), optimizer (the private adaptive loop), theory (bound
calculators), harness (validation experiments), report (CSV + figures),
cli (command-line entry point).
"""

__version__ = "0.1.0"

from .accountant import (CalibrationError, MechanismSpec, MomentLedger,
                         PrivacyBudget, advanced_composition_eps,
                         compose_step_log_moments, eps_for_delta,
                         sigma_for_budget)
from .models import (Dataset, GradientSample, LossModel, MLPModel,
                     QuadraticModel, SigmoidClusterModel, clip,
                     empirical_gradient, load_idx, population_gradient)
from .optimizer import (AveragingKind, OptimizerConfig, OptimizerState,
                        ParameterInfeasibleError, TrajectoryRecord, averaging,
                        noisy_gradient, run, set_params_from_theory, step)
from .theory import (BoundReport, ConcentrationSpec, concentration,
                     empirical_bound, mu_for_failure, population_bound,
                     uniform_convergence_bound)

__all__ = [
    "__version__",
    "CalibrationError", "MechanismSpec", "MomentLedger", "PrivacyBudget",
    "advanced_composition_eps", "compose_step_log_moments", "eps_for_delta",
    "sigma_for_budget",
    "Dataset", "GradientSample", "LossModel", "MLPModel", "QuadraticModel",
    "SigmoidClusterModel", "clip", "empirical_gradient", "load_idx",
    "population_gradient",
    "AveragingKind", "OptimizerConfig", "OptimizerState",
    "ParameterInfeasibleError", "TrajectoryRecord", "averaging",
    "noisy_gradient", "run", "set_params_from_theory", "step",
    "BoundReport", "ConcentrationSpec", "concentration", "empirical_bound",
    "mu_for_failure", "population_bound", "uniform_convergence_bound",
]
