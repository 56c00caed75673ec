"""Landmark dynamic prediction of survival from longitudinal covariates.

Mixed models summarize each subject's covariate trajectories up to a
landmark time by predicted random effects; a penalized Cox model then uses
those summaries with baseline covariates to predict conditional survival.
"""

__version__ = "0.1.0"

from dynsurv._backend import BACKEND  # noqa: E402
from dynsurv.cox import (  # noqa: E402
    CoxFit,
    DesignMatrix,
    PenaltySpec,
    assemble_design,
    breslow_baseline,
    cox_partial_loglik,
    fit_locf_baseline_cox,
    fit_penalized_cox,
    predict_survival,
    predict_survival_new_subjects,
)
from dynsurv.data import (  # noqa: E402
    DataError,
    Dataset,
    Schema,
    StepFunction,
    apply_landmark,
    kaplan_meier,
    load_dataset,
    log_transform,
    write_dataset,
)
from dynsurv.lmm import (  # noqa: E402
    LmmFit,
    LmmFitError,
    LmmSpec,
    RandomEffectSummary,
    fit_all_lmms,
    fit_lmm,
    predict_random_effects,
    summarize_lmms,
)
from dynsurv.metrics import brier_score, concordance_index, td_auc  # noqa: E402
from dynsurv.pipeline import PipelineConfig, PrcModel, fit_prc, load_model, save_model  # noqa: E402
from dynsurv.simulate import SimConfig, simulate_prclmm_data, simulate_t_weibull  # noqa: E402
from dynsurv.validation import PerformanceReport, resample_clusters, run_cbocp  # noqa: E402
