"""Log-normal response-time modelling for online course clickstreams."""

from .cohort import CourseStructure, QualificationConfig, build_subsets, qualify_matrix
from .diagnostics import (
    compare_fits,
    describe_question,
    moment_deviations,
    pearson_with_se,
    raw_moments,
)
from .events import EventLog, RawEvent, parse_courses, parse_events
from .extraction import ResponseObservation, extract
from .matrix import ResponseMatrix
from .model import FitConfig, FitReport, ModelParams, fit, nll, nll_gradient, standardized_residuals
from .outcomes import LearnerRecord, logistic_fixed_effects, odds_factor, ols_fixed_effects
from .synthetic import SynthSpec, emit_event_log, generate, recovery_report

__all__ = [
    "CourseStructure", "EventLog", "FitConfig", "FitReport", "LearnerRecord", "ModelParams",
    "QualificationConfig", "RawEvent", "ResponseMatrix", "ResponseObservation", "SynthSpec",
    "build_subsets", "compare_fits", "describe_question", "emit_event_log", "extract", "fit",
    "generate", "logistic_fixed_effects", "moment_deviations", "nll", "nll_gradient",
    "odds_factor", "ols_fixed_effects", "parse_courses", "parse_events", "pearson_with_se",
    "qualify_matrix", "raw_moments", "recovery_report", "standardized_residuals",
]
