"""Gaussian-mixture density steering for discrete-time linear systems.

Steers the state density of x_{k+1} = A_k x_k + B_k u_k, modeled as a
Gaussian mixture, onto a target mixture: exactly via closed-form covariance
steering and a transportation LP, or under soft / total / per-step cost
formulations via block-coordinate descent over bilinear conic programs.
"""

from .bcd import (
    BcdConfig,
    BcdReport,
    BcdState,
    BcdStatus,
    check_feasibility,
    recover_feedback,
    solve_soft,
    solve_step,
    solve_total,
)
from .bounds import ErrorField, absolute_bound, default_grid, propagate_error, relative_bound_check
from .conic import ConicProgram, ConicSolution, ConicStatus, solve_conic
from .covariance import (
    CovSteerSolution,
    MeanSteerSolution,
    ThetaSet,
    build_thetas,
    cov_steer,
    cov_steer_sdp_value,
    mean_steer,
)
from .gaussians import Gaussian, Gmm, fit_em, pdf, sample, sqrtm_psd, w2_gaussian
from .hard import build_cost_matrix, solve_hard
from .lti import CostWeights, LinearSystem, SteeringOperators, build_operators, check_controllable
from .policy import (
    GmmPolicy,
    TerminalPrediction,
    component_likelihoods,
    expected_cost,
    predict_terminal,
    sample_control,
    simulate,
    step_cost,
)
from .transport import TransportPlan, gmm_wasserstein, solve_transport

__version__ = "0.1.0"

__all__ = [
    "BcdConfig", "BcdReport", "BcdState", "BcdStatus",
    "ConicProgram", "ConicSolution", "ConicStatus",
    "CostWeights", "CovSteerSolution", "ErrorField", "Gaussian", "Gmm",
    "GmmPolicy", "LinearSystem", "MeanSteerSolution", "SteeringOperators",
    "TerminalPrediction", "ThetaSet", "TransportPlan",
    "absolute_bound", "build_cost_matrix", "build_operators", "build_thetas",
    "check_controllable", "check_feasibility", "component_likelihoods",
    "cov_steer", "cov_steer_sdp_value", "default_grid", "expected_cost",
    "fit_em", "gmm_wasserstein", "mean_steer", "pdf", "predict_terminal",
    "propagate_error", "recover_feedback", "relative_bound_check", "sample",
    "sample_control", "simulate", "solve_conic", "solve_hard", "solve_soft",
    "solve_step", "solve_total", "solve_transport", "sqrtm_psd", "step_cost",
    "w2_gaussian",
]
