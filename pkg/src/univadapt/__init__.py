"""Adaptive control with parameter-dependent certificates and a scaled adaptation gain."""
from .errors import (ConfigurationError, DegeneracyError, DivergenceError, InfeasibleError, InvariantViolation,
                     NumericError, PreconditionError, SynthesisError, UnivAdaptError)
from .lyap import AdaptGains, AdaptState, ScalingFunction, UclfFamily, backstepping_uclf
from .sysmodel import CONTRACTING, STRICT_FEEDBACK, ParameterBox, SystemModel, eval_dynamics, get_model

__version__ = "0.1.0"
