"""Robust uniform inference for regression discontinuity and kink designs."""
from .bandwidth import BandwidthPlan, select_bandwidths, step1_preliminary, step2_pilot, step3_mse_and_rot
from .bootstrap import (BandResult, TestResult, draw_multipliers, emp_component, run_bootstrap,
                        assemble_process, test_dominance, test_homogeneity, test_uniform_nullity,
                        uniform_band)
from .cdfquant import GridFunction, left_inverse, make_grids, rearrange_monotone
from .data import ObservationSet
from .designs import Bandwidths, BandwidthPolicy, DesignSpec, EstimateResult, estimate_components, estimate_tau, hadamard_coefficients
from .dgp_sim import DgpSpec, McReport, generate, run_monte_carlo, true_effect
from .kernels import KernelSpec, eval_kernel, moment_matrices, psi_matrix
from .localpoly import LocalFit, ResponseFn, fit_one_sided, tilde_mu
from .pipeline import Analysis, analyze

__version__ = "0.1.0"
