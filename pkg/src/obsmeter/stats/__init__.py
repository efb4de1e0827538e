"""Statistics for comparing treatments: resampling, assumption gates,
two-way (permutation) ANOVA and Tukey HSD."""

from .anova import AnovaRow, AnovaTable, Design, anova_two_way, make_design, permanova_two_way, stars
from .gates import VarianceCheck, brown_forsythe, heteroskedasticity_gate, normality_gate
from .pipeline import (
    PipelineResult,
    ResponseSeries,
    analysis_pipeline,
    anova_tsv,
    format_anova,
    format_result,
    format_tukey,
    read_response_tsv,
    tukey_tsv,
    write_response_tsv,
)
from .resample import TestResult, bootstrap_iid, count_turning_points, turning_point_test
from .tukey import TukeyRow, ptukey, qtukey, tukey_factor, tukey_hsd

__all__ = [
    "AnovaRow", "AnovaTable", "Design", "anova_two_way", "make_design", "permanova_two_way", "stars",
    "VarianceCheck", "brown_forsythe", "heteroskedasticity_gate", "normality_gate", "PipelineResult",
    "ResponseSeries", "analysis_pipeline", "anova_tsv", "format_anova", "format_result", "format_tukey", "tukey_tsv", "read_response_tsv", "write_response_tsv",
    "TestResult", "bootstrap_iid", "count_turning_points", "turning_point_test", "TukeyRow", "ptukey",
    "qtukey", "tukey_factor", "tukey_hsd",
]
