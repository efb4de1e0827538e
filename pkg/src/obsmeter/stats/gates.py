"""Assumption gates: normality per treatment group and equality of variances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import FewerThanTwoGroups, SeriesTooShort
from .fdist import chi2_sf_2df, f_sf
from .resample import TestResult


def _skew_z(x: np.ndarray) -> float:
    n = x.size
    d = x - x.mean()
    m2 = np.mean(d**2)
    m3 = np.mean(d**3)
    b1 = m3 / m2**1.5
    y = b1 * math.sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)))
    beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0) / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0))
    w2 = -1.0 + math.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / math.sqrt(0.5 * math.log(w2))
    alpha = math.sqrt(2.0 / (w2 - 1.0))
    if y == 0:
        y = 1.0
    return delta * math.log(y / alpha + math.sqrt((y / alpha) ** 2 + 1.0))


def _kurtosis_z(x: np.ndarray) -> float:
    n = x.size
    d = x - x.mean()
    m2 = np.mean(d**2)
    b2 = np.mean(d**4) / m2**2
    mean = 3.0 * (n - 1.0) / (n + 1.0)
    var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) ** 2 * (n + 3.0) * (n + 5.0))
    xs = (b2 - mean) / math.sqrt(var)
    sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0)) * math.sqrt(
        6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))
    )
    a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + math.sqrt(1.0 + 4.0 / sqrt_beta1**2))
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + xs * math.sqrt(2.0 / (a - 4.0))
    if denom == 0:
        return math.inf
    term2 = math.copysign(abs((1.0 - 2.0 / a) / denom) ** (1.0 / 3.0), denom)
    return (term1 - term2) / math.sqrt(2.0 / (9.0 * a))


def normality_gate(group: Sequence[float]) -> TestResult:
    """D'Agostino-Pearson omnibus test from sample skewness and kurtosis.

    Parameters
    ----------
    group : sequence of float
        Observations of one treatment group, at least 20.

    Returns
    -------
    TestResult
        ``statistic`` is K^2 = Z(skew)^2 + Z(kurtosis)^2 and the p-value is
        its chi-square(2) tail. A constant group has p = 0.
    """
    x = np.asarray(group, dtype=float)
    if x.size < 20:
        raise SeriesTooShort(f"normality gate needs n >= 20, got {x.size}")
    if np.all(x == x[0]):
        return TestResult(math.inf, 0.0, (2,))
    k2 = _skew_z(x) ** 2 + _kurtosis_z(x) ** 2
    return TestResult(k2, chi2_sf_2df(k2), (2,))


@dataclass(frozen=True)
class VarianceCheck:
    levene: TestResult
    variance_ratio: float


def brown_forsythe(groups: Sequence[Sequence[float]]) -> TestResult:
    """Levene's test centred on group medians (Brown-Forsythe variant)."""
    gs = [np.asarray(g, dtype=float) for g in groups]
    if len(gs) < 2:
        raise FewerThanTwoGroups(f"need at least two groups, got {len(gs)}")
    k = len(gs)
    z = [np.abs(g - np.median(g)) for g in gs]
    n = np.array([g.size for g in gs], dtype=float)
    total = n.sum()
    zbar_i = np.array([zi.mean() for zi in z])
    zbar = sum(zi.sum() for zi in z) / total
    between = float(np.sum(n * (zbar_i - zbar) ** 2))
    within = float(sum(np.sum((zi - m) ** 2) for zi, m in zip(z, zbar_i)))
    df1, df2 = k - 1, int(total) - k
    if within == 0:
        f = 0.0 if between == 0 else math.inf
        return TestResult(f, 1.0 if between == 0 else 0.0, (df1, df2))
    f = float((df2 / df1) * between / within)
    return TestResult(f, f_sf(f, df1, df2), (df1, df2))


def heteroskedasticity_gate(groups: Sequence[Sequence[float]]) -> VarianceCheck:
    """Brown-Forsythe test plus the ratio of largest to smallest group variance."""
    test = brown_forsythe(groups)
    var = np.array([np.var(np.asarray(g, dtype=float), ddof=1) for g in groups])
    lo = var.min()
    ratio = math.inf if lo == 0 and var.max() > 0 else (1.0 if lo == 0 else float(var.max() / lo))
    return VarianceCheck(test, ratio)
