"""Estimation and inference with value-added measures as regressors or outcomes."""
from .gmm import (
    ConvergenceError, GmmError, GmmFit, MomentSystem, evaluate, gmm_minimize, j_test, numerical_jacobian,
    optimal_gmm, sandwich_covariance, solve_exactly_identified,
)
from .inference import (
    CorrectedKappa, GradientBlocks, VaOutcomeFit, build_longrun_system, build_overid_system,
    build_va_outcome_system, corrected_sigma2, dx_orthogonality_test, fit_2sls_random_assignment, fit_3sls,
    va_outcome_fit, variance_gap_diagnostic,
)
from .panel import (
    ClassPanel, PanelData, PanelError, StudentRecord, TeacherYearVars, class_aggregate, load_panel,
    load_teacher_year_vars, within_transform, write_panel,
)
from .pipeline import (
    KappaFit, PhiSpec, VaEstimates, analytic_shrinkage_factor, estimate_va, fit_blp, multistep_ols_kappa,
    residualize_outcome, residualize_scores, shrunk_va,
)
from .regression import FeFit, SingularDesignError, TslsFit, cluster_sandwich, ols, ols_fe, tsls
from .simulation import DgpConfig, McSummary, het_effects_run, rho_sweep, run_replications, simulate_panel

__version__ = "0.1.0"
