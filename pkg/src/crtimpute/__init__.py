"""Multiple imputation of bivariate outcomes in cluster randomised trials.

Simulation components: seeded random streams, trial data generation,
missingness mechanisms, chained-equation (SMI, FMI) and multilevel (MMI)
imputation, a bivariate random-intercept model fitted by maximum likelihood,
Rubin's rules, the study runner and a factorial ANOVA of its results.
"""
from .anova import AnovaTable, analyse_performance, factorial_anova, manova_wilks, normalize_and_scale_f
from .bench import AcceptanceCase, Assertion, load_suite, run_acceptance
from .datagen import (
    DESIGNS, ICC_LEVELS, METHODS, Design, GenParams, ScenarioConfig, TrialDataset, build_scenario_grid,
    generate_dataset,
)
from .fcs import FcsModelSpec, ImputationError, ImputedSet, fcs_impute
from .lmm import FitResult, cca_prepare, fit_bivariate_lmm, marginal_loglik
from .missingness import MissingnessSpec, calibrate_alpha0, impose_missingness, make_missingness_spec
from .mmi import MmiPriors, SamplerDegenerate, conditional_normal_impute, pan_gibbs_impute
from .pooling import PooledEstimate, rubin_pool
from .rngkit import RngStream, draw_inverse_wishart, draw_mvn, draw_scaled_inv_chisq, make_stream
from .simrunner import (
    PerfSummary, ReplicateRecord, ScenarioResult, compute_performance, run_replicate, run_scenario, run_study,
    summarize_run,
)

__version__ = "0.1.0"
