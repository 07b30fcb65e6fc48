"""Cohort difference-in-differences designs, cluster-robust weighted 2SLS,
weak-instrument-robust wild bootstrap inference, changes-in-changes quantile
effects, and a Monte Carlo study of trend-grouped ratio estimators."""

from .cic import (
    CellClusterIds,
    CellData,
    QuantileEffectCurve,
    bootstrap_effect_cis,
    cic_counterfactual,
    cic_effects,
    cic_with_covariates,
    covariate_adjusted_outcome,
    cvm_tests,
    high_treatment_split,
)
from .data import Dataset, FitResult, ModelSpec
from .designs import (
    CohortFrame,
    DesignProduct,
    build_by_cohort,
    build_cohort_controls,
    build_placebo,
    build_spline_design,
    build_young_old,
    fit_design,
    horserace,
    placebo_equality_test,
    spline_term,
    trend_break_impact,
    weight_endogeneity_test,
)
from .estimation import (
    absorb_fixed_effects,
    cluster_robust_vce,
    coefficient_test,
    wald_test,
    wls_fit,
)
from .exceptions import (
    AbsorptionError,
    CollinearityError,
    DidtoolsError,
    EstimationError,
    NotOveridentifiedError,
    SupportError,
    ValidationError,
)
from .io import (
    format_confidence_set,
    format_simulation_table,
    load_csv,
    parse_confidence_set,
    write_dataset_csv,
)
from .iv import IVFitResult, first_stage_f, hansen_j, kp_f, tsls_fit
from .simulation import (
    SimConfig,
    SimulationSummary,
    form_supergroups,
    generate_dataset,
    run_simulation,
    wald_cic,
    wald_did,
)
from .weakiv import (
    ARBootstrap,
    ConfidenceCurve,
    ConfidenceSet,
    ar_statistic,
    confidence_curve,
    extract_confidence_set,
    wre_bootstrap_p,
)

__version__ = "0.1.0"
