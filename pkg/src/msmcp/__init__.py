"""IPW and doubly robust estimation for marginal structural models with Cp-type model selection."""

from .criteria import CriterionReport, penalty_plugins, qicw, select, ucp, wcp, wcp_conditional
from .design import Dataset, DesignSet, TrueParams, build_orthonormal_design, map_coefficients, polynomial_design
from .estimators import DR, IPW_ESTIMATED, IPW_KNOWN, EstimatorFit, dr_fit, ipw_fit
from .outcome import OutcomeFit, fit_outcome, fit_outcome_per_arm
from .propensity import PropensityFit, PropensityModel, evaluate_scores, fit_mle
from .study import StudyConfig, StudyTables, run_study

__version__ = "0.1.0"
