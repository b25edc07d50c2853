"""Allocation designs and importance-sampling estimators for A/B tests on
marketplace graphs with network interference."""

from .errors import (OasisError, ParameterError, IoError, ParseError, InputError, DesignError,
                     DegenerateScoreError, DivisionByZeroError, DegenerateDensityError,
                     InsufficientOverlapError, EstimationError, NoDataError)
from .graph import MarketplaceGraph, TreatmentSet, validate, generate_clustered_graph
from .partition import Partition, RiskConfig, sample_partition, compute_sum_bounds
from .qp import QpConfig, QpProblem, solve_qp
from .allocation import build_full_problem, make_block_plan, solve_allocation
from .design import assemble_design, compute_boost_factors
from .estimator import EstimatorConfig, bootstrap_ci, collect_exposures
from .sim import SimConfig, build_setting, run_oasis_trial, run_cb_trial, run_simulation, summarize
from .plotting import emit_plots

__version__ = "0.1.0"
