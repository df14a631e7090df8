"""causal_fuse: combine a randomized trial with an observational study.

Pipeline: load or generate a two-source study, mark the overlap region,
fit generalization scores, build the triplet matched design, then run the
two-parameter (gamma, delta) sensitivity analysis producing observational,
trial, and combined confidence intervals for the average treatment effect
on the observational treated population.
"""

from .combine import CombinedResult, combined_ci, combined_limit, kappa_alpha
from .gen_score import CopyPlan, GeneralizationModel, fit_generalization, plan_copies
from .os_sens import (
    LOWER,
    UPPER,
    EtaVector,
    OsTestResult,
    SetData,
    SetOutcomes,
    collect_sets,
    os_ci,
    os_p_value,
    os_test,
    separable_eta,
    tilde_tau,
)
from .rct_infer import (
    BERNOULLI,
    BLOCKED,
    COMPLETE,
    RctDesign,
    RctTestResult,
    RctUnit,
    build_rct_design,
    delta_rescalings,
    draw_assignments,
    rct_ci,
    rct_estimate,
    rct_test,
)
from .results import IntervalResult
from .sim_lab import (
    ALL,
    LIMITED,
    MAJORITY,
    ScenarioReport,
    ScenarioSpec,
    generate,
    run_scenario,
    true_effect,
)
from .stat_kernel import (
    RegressionFit,
    SeededRng,
    chi2_4_quantile,
    find_root,
    fit_linear,
    fit_logistic,
    normal_cdf,
    normal_quantile,
)
from .study_data import (
    OS,
    RCT,
    OverlapRule,
    StudyData,
    UnitRecord,
    apply_overlap,
    load_csv,
    residualize,
    save_csv,
)
from .tri_match import (
    BalanceReport,
    MatchedSet,
    mahalanobis_matrix,
    match_triplets,
    smd,
)

__version__ = "0.1.0"
