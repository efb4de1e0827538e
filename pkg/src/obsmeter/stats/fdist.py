"""Survival functions used by the tests, built on the regularized incomplete beta."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import betainc


def f_sf(f, df1: float, df2: float):
    """P(F > f) for an F(df1, df2) variable."""
    f = np.asarray(f, dtype=float)
    x = df2 / (df2 + df1 * np.maximum(f, 0.0))
    p = betainc(df2 / 2.0, df1 / 2.0, x)
    p = np.where(f <= 0, 1.0, p)
    return float(p) if p.ndim == 0 else p


def chi2_sf_2df(x: float) -> float:
    """P(X > x) for a chi-square variable with two degrees of freedom."""
    return math.exp(-x / 2.0) if x > 0 else 1.0
