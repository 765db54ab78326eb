"""Adaptive controllers with state-and-estimate dependent nonlinear damping."""

from . import expr
from .backstep import SynthesisTrace, synthesize, synthesize_base, backstep_stage
from .matched import (AdaptiveController, damped_controller, fit_rho_envelope, project_ball, residual_radius,
                      standard_controller)
from .model import (DesignConstants, GridSpec, MatchedSystem, StrictFeedbackSystem, TrueParameters,
                    validate_matched, validate_strict_feedback)
from .sim import ClosedLoop, Trajectory, integrate, sweep
from .verify import VerificationReport

build_closed_loop = ClosedLoop

__all__ = [
    "expr", "SynthesisTrace", "synthesize", "synthesize_base", "backstep_stage", "AdaptiveController",
    "damped_controller", "fit_rho_envelope", "project_ball", "residual_radius", "standard_controller",
    "DesignConstants", "GridSpec", "MatchedSystem", "StrictFeedbackSystem", "TrueParameters", "validate_matched",
    "validate_strict_feedback", "ClosedLoop", "Trajectory", "integrate", "sweep", "VerificationReport",
    "build_closed_loop",
]
