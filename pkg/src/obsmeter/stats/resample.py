"""Resampling and serial-independence checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import EmptySeries, SeriesTooShort


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    df: Optional[tuple] = None

    __test__ = False  # not a pytest class


def normal_two_sided(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def bootstrap_iid(series: Sequence[float], n_out: int, seed) -> np.ndarray:
    """Draw `n_out` values uniformly with replacement.

    Resampling breaks the serial dependence of windowed measurements, so the
    result can be treated as independent draws from the observed values.
    """
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise EmptySeries("cannot resample an empty series")
    if n_out < 0:
        raise ValueError("n_out must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x[rng.integers(0, x.size, n_out)]


def count_turning_points(series: Sequence[float]) -> int:
    x = np.asarray(series, dtype=float)
    if x.size < 3:
        return 0
    # equal values are ordered by position, i.e. a tie counts as "later is larger"
    up = (x[1:] > x[:-1]) | (x[1:] == x[:-1])
    return int(np.count_nonzero(up[:-1] != up[1:]))


def turning_point_test(series: Sequence[float]) -> TestResult:
    """Turning-point test of serial independence.

    Parameters
    ----------
    series : sequence of float
        Ordered observations, at least 20.

    Returns
    -------
    TestResult
        ``statistic`` is the standardized count
        ``z = (T - 2(n-2)/3) / sqrt((16n - 29)/90)``; the p-value is two-sided.
        Too few turning points indicate trend or positive autocorrelation,
        too many indicate oscillation.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 20:
        raise SeriesTooShort(f"turning-point test needs n >= 20, got {n}")
    t = count_turning_points(x)
    z = (t - 2.0 * (n - 2) / 3.0) / math.sqrt((16.0 * n - 29.0) / 90.0)
    return TestResult(z, normal_two_sided(z))
