"""Experiment orchestration: recipes, response variables, set runners, reports."""

from .recipes import Recipe, default_recipe, load_recipe, parse_recipe
from .responses import (
    IntervalReport,
    compute_jitter_diff,
    compute_loss_ratio,
    compute_sending_rate,
    compute_throughput_diff,
    compute_timestamp_diff,
)
from .sets import SetResult, run_set

__all__ = [
    "Recipe", "default_recipe", "load_recipe", "parse_recipe", "IntervalReport", "compute_jitter_diff",
    "compute_loss_ratio", "compute_sending_rate", "compute_throughput_diff", "compute_timestamp_diff",
    "SetResult", "run_set",
]
