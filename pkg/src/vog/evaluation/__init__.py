"""Statistics, OoD metrics and difficulty analyses over VoG scores."""

from .analysis import (
    AnalysisError,
    BoundaryAnalysis,
    DecileErrorTable,
    StabilityReport,
    StageFlipReport,
    boundary_distance_analysis,
    boundary_distances,
    class_error_vs_vog,
    correctness_from_records,
    decile_error,
    flip_between,
    stability_report,
    stage_flip_report,
)
from .ood import (
    OodMetrics,
    QuartileRow,
    aupr,
    auroc,
    msp_scores,
    ood_metrics,
    ood_percentile_representation,
    vog_detection_scores,
)
from .stats import (
    CorrelationUndefinedError,
    WelchResult,
    correlations,
    pearson,
    spearman,
    t_cdf,
    welch_ttest,
    welch_ttest_samples,
)

__all__ = [
    "AnalysisError",
    "BoundaryAnalysis",
    "CorrelationUndefinedError",
    "DecileErrorTable",
    "OodMetrics",
    "QuartileRow",
    "StabilityReport",
    "StageFlipReport",
    "WelchResult",
    "aupr",
    "auroc",
    "boundary_distance_analysis",
    "boundary_distances",
    "class_error_vs_vog",
    "correctness_from_records",
    "correlations",
    "decile_error",
    "flip_between",
    "msp_scores",
    "ood_metrics",
    "ood_percentile_representation",
    "pearson",
    "spearman",
    "stability_report",
    "stage_flip_report",
    "t_cdf",
    "vog_detection_scores",
    "welch_ttest",
    "welch_ttest_samples",
]
