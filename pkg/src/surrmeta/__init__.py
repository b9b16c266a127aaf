"""Trial-level surrogate marker screening across studies.

Rank-based within-study treatment effects, random-effects pooling with an
equivalence test, a weighted composite signature, agreement metrics and a
Monte Carlo harness.
"""

from .data import (
    PAIRED,
    TWO_ARM,
    ColumnMapping,
    StudyDataset,
    aggregate_genesets,
    filter_studies,
    parse_study_csv,
    parse_study_frame,
    read_geneset_catalog,
    split_studies,
    split_within_study,
    write_study_csv,
)
from .equivalence import EquivalenceResult, bh_adjust, lead, screen_markers, tost_p
from .estimators import RandomEffectsMeta, SurrogateScreener
from .meta import MetaInput, PooledResult, estimate_tau2_reml, pool_effects, prediction_interval
from .metrics import EffectPairs, bca_bootstrap_ci, ccc, icc21, r2_trial_wls
from .pipeline import ScreenResult, forest_table, screen
from .ranks import WithinStudyEstimate, estimate_paired, estimate_two_arm, g_compare, select_epsilon_power, study_effects
from .signature import SignatureSpec, compose_signature, evaluate_signature, signature_weights, standardize_within_study
from .simulate import SimConfig, SimSummary, permute_within_study, run_calibration, run_permutation_fpr, run_power

__version__ = "0.1.0"

__all__ = [
    "PAIRED", "TWO_ARM", "ColumnMapping", "StudyDataset", "aggregate_genesets", "filter_studies",
    "parse_study_csv", "parse_study_frame", "read_geneset_catalog", "split_studies", "split_within_study",
    "write_study_csv", "EquivalenceResult", "bh_adjust", "lead", "screen_markers", "tost_p",
    "RandomEffectsMeta", "SurrogateScreener", "MetaInput", "PooledResult", "estimate_tau2_reml",
    "pool_effects", "prediction_interval", "EffectPairs", "bca_bootstrap_ci", "ccc", "icc21", "r2_trial_wls",
    "ScreenResult", "forest_table", "screen", "WithinStudyEstimate", "estimate_paired", "estimate_two_arm",
    "g_compare", "select_epsilon_power", "study_effects", "SignatureSpec", "compose_signature",
    "evaluate_signature", "signature_weights", "standardize_within_study", "SimConfig", "SimSummary",
    "permute_within_study", "run_calibration", "run_permutation_fpr", "run_power",
]
