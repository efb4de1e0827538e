"""Tukey honest significant differences and the studentized range distribution."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln, ndtr

from ..errors import FewerThanTwoGroups, UnbalancedDesign
from .anova import Design, _sums_of_squares, stars

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(48)
_EDGES = np.linspace(-8.5, 8.5, 11)
_Z = np.concatenate([(b - a) / 2 * _NODES + (a + b) / 2 for a, b in zip(_EDGES[:-1], _EDGES[1:])])
_WZ = np.concatenate([(b - a) / 2 * _WEIGHTS for a, b in zip(_EDGES[:-1], _EDGES[1:])])
_PHI_Z = np.exp(-0.5 * _Z**2) / math.sqrt(2 * math.pi)
_CDF_Z = ndtr(_Z)


def range_cdf(w, k: int):
    """P(range of k iid standard normals <= w)."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    inner = np.clip(_CDF_Z[None, :] - ndtr(_Z[None, :] - w[:, None]), 0.0, 1.0)
    out = k * np.sum(_WZ * _PHI_Z * inner ** (k - 1), axis=1)
    out = np.where(w <= 0, 0.0, np.minimum(out, 1.0))
    return out if out.size > 1 else float(out[0])


@functools.lru_cache(maxsize=4096)
def ptukey(q: float, k: int, df: float) -> float:
    """CDF of the studentized range Q(k, df) at `q`, by numerical quadrature.

    Integrates the range CDF at ``q * s`` against the density of
    ``s = sqrt(chi2_df / df)``.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if q <= 0:
        return 0.0
    if math.isinf(df) or df > 50000:
        return float(range_cdf(q, k))
    half = df / 2.0
    log_c = math.log(2.0) + half * math.log(half) - gammaln(half)

    def integrand(s: float) -> float:
        if s <= 0:
            return 0.0
        log_f = log_c + (df - 1.0) * math.log(s) - df * s * s / 2.0
        return math.exp(log_f) * range_cdf(q * s, k)

    # the density of s concentrates around 1 with spread ~ 1/sqrt(2 df)
    spread = 1.0 / math.sqrt(2.0 * df)
    hi = 1.0 + 40.0 * spread + 2.0
    mid = [max(1.0 - 4 * spread, 0.05), 1.0, 1.0 + 4 * spread]
    value, _ = integrate.quad(integrand, 0.0, hi, points=mid, limit=200, epsabs=1e-13, epsrel=1e-11)
    return min(max(value, 0.0), 1.0)


def tukey_pvalue(q: float, k: int, df: float) -> float:
    return min(1.0, max(0.0, 1.0 - ptukey(float(q), int(k), float(df))))


def qtukey(p: float, k: int, df: float) -> float:
    """Quantile: the q with P(Q <= q) = p."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return optimize.brentq(lambda q: ptukey(q, k, df) - p, 1e-9, 200.0, xtol=1e-12)


@dataclass(frozen=True)
class TukeyRow:
    pair: str
    diff: float
    q: float
    p_adj: float
    significant: bool

    @property
    def stars(self) -> str:
        return stars(self.p_adj)


def tukey_hsd(
    groups: Mapping[str, Sequence[float]] | Design,
    alpha: float = 0.05,
    ms_resid: Optional[float] = None,
    df_resid: Optional[float] = None,
) -> list[TukeyRow]:
    """All pairwise comparisons of balanced groups.

    Parameters
    ----------
    groups : mapping or Design
        Group label to observations; a :class:`Design` compares its a*b cells,
        labelled ``"<a>:<b>"``.
    alpha : float
        Rows with ``p_adj <= alpha`` are flagged significant.
    ms_resid, df_resid : float, optional
        Error mean square and its degrees of freedom; default to the pooled
        within-group values.

    Returns
    -------
    list of TukeyRow
        For groups in order g1..gk, row ``"gj-gi"`` (i < j) has
        ``diff = mean(gj) - mean(gi)`` and ``q = |diff| / sqrt(ms_resid / n)``.
    """
    if isinstance(groups, Design):
        d = groups
        groups = {f"{a}:{b}": d.data[i, j] for i, a in enumerate(d.levels_a) for j, b in enumerate(d.levels_b)}
    labels = list(groups)
    data = [np.asarray(groups[g], dtype=float) for g in labels]
    k = len(data)
    if k < 2:
        raise FewerThanTwoGroups("Tukey HSD needs at least two groups")
    sizes = {x.size for x in data}
    if len(sizes) != 1:
        raise UnbalancedDesign(f"groups have different sizes {sorted(sizes)}")
    n = sizes.pop()
    if ms_resid is None:
        # exactly rounded so the result does not depend on group order
        ms_resid = math.fsum(float(np.sum((x - x.mean()) ** 2)) for x in data) / (k * (n - 1))
        df_resid = k * (n - 1)
    elif df_resid is None:
        raise ValueError("df_resid is required with ms_resid")
    se = math.sqrt(ms_resid / n)
    means = [float(x.mean()) for x in data]
    rows = []
    for i, j in combinations(range(k), 2):
        diff = means[j] - means[i]
        q = abs(diff) / se if se > 0 else (math.inf if diff else 0.0)
        p = 0.0 if math.isinf(q) else tukey_pvalue(q, k, df_resid)
        rows.append(TukeyRow(f"{labels[j]}-{labels[i]}", diff, q, p, p <= alpha))
    return rows


def tukey_factor(design: Design, factor: int, alpha: float = 0.05) -> list[TukeyRow]:
    """Tukey comparisons of one factor's levels (0 for A, 1 for B), pooled over
    the other factor, using the two-way model's residual mean square."""
    a, b, n = design.shape
    ss = _sums_of_squares(design.data)
    df_r = a * b * (n - 1)
    ms_r = float(ss[3]) / df_r
    if factor == 0:
        groups = {str(lv): design.data[i].reshape(-1) for i, lv in enumerate(design.levels_a)}
    elif factor == 1:
        groups = {str(lv): design.data[:, j].reshape(-1) for j, lv in enumerate(design.levels_b)}
    else:
        raise ValueError("factor must be 0 or 1")
    return tukey_hsd(groups, alpha, ms_r, df_r)
