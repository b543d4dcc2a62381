"""Riemannian metric certificates: metric families, geodesics, pointwise checks and fitting."""
from .adapt import EnergyRateReport, adapt_rhs_uccm, energy_rate_report, estimate_rate_uccm
from .certify import (C1_TOL, C2_TOL, ValidationReport, annihilator, check_c1, check_c2, validate_uccm,
                      validate_uclf)
from .fit import FitSettings, fit_metric_coeffs, refine_metric_fit
from .geodesic import Geodesic, curve_energy, energy_param_grad, node_speeds, solve_geodesic
from .metric import MetricFamily, PolynomialMetric, constant_metric, monomial_exponents

__all__ = [
    "C1_TOL", "C2_TOL", "EnergyRateReport", "FitSettings", "Geodesic", "MetricFamily", "PolynomialMetric",
    "ValidationReport", "adapt_rhs_uccm", "annihilator", "check_c1", "check_c2", "constant_metric",
    "curve_energy", "energy_param_grad", "energy_rate_report", "estimate_rate_uccm", "fit_metric_coeffs", "monomial_exponents",
    "node_speeds", "refine_metric_fit", "solve_geodesic", "validate_uccm", "validate_uclf",
]
