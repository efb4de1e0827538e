"""Balanced two-way ANOVA with interaction, parametric and by permutation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ..errors import DegenerateVariance, FewerThanTwoGroups, UnbalancedDesign
from .fdist import f_sf

STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


def stars(p: Optional[float]) -> str:
    if p is None:
        return ""
    for level, mark in STAR_LEVELS:
        if p <= level:
            return mark
    return ""


@dataclass
class Design:
    """Balanced a x b layout: ``data[i, j]`` holds the n observations of cell (A_i, B_j)."""

    data: np.ndarray
    levels_a: tuple
    levels_b: tuple
    factors: tuple[str, str] = ("A", "B")

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise UnbalancedDesign("cell data must form an a x b x n array")
        a, b, n = self.data.shape
        if a < 2 or b < 2:
            raise FewerThanTwoGroups(f"each factor needs at least two levels, got {a}x{b}")
        if n < 2:
            raise UnbalancedDesign("each cell needs at least two observations")
        if len(self.levels_a) != a or len(self.levels_b) != b:
            raise ValueError("level labels do not match the data shape")

    @property
    def n(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def cell(self, a_level, b_level) -> np.ndarray:
        return self.data[self.levels_a.index(a_level), self.levels_b.index(b_level)]

    def cell_means(self) -> np.ndarray:
        return self.data.mean(axis=2)


def make_design(cells: Mapping[tuple, Sequence[float]], factors=("A", "B")) -> Design:
    """Build a :class:`Design` from ``{(a_level, b_level): observations}``.

    Level order follows first appearance in `cells`.
    """
    levels_a, levels_b = [], []
    for a, b in cells:
        if a not in levels_a:
            levels_a.append(a)
        if b not in levels_b:
            levels_b.append(b)
    sizes = {len(v) for v in cells.values()}
    if len(sizes) != 1:
        raise UnbalancedDesign(f"cells have different sizes {sorted(sizes)}")
    if len(cells) != len(levels_a) * len(levels_b):
        raise UnbalancedDesign("some factor combinations have no cell")
    n = sizes.pop()
    data = np.empty((len(levels_a), len(levels_b), n))
    for (a, b), v in cells.items():
        data[levels_a.index(a), levels_b.index(b)] = np.asarray(v, dtype=float)
    return Design(data, tuple(levels_a), tuple(levels_b), tuple(factors))


@dataclass(frozen=True)
class AnovaRow:
    term: str
    df: int
    ss: float
    ms: float
    f: Optional[float] = None
    p: Optional[float] = None

    @property
    def stars(self) -> str:
        return stars(self.p)


@dataclass
class AnovaTable:
    rows: list[AnovaRow]
    method: str  # "anova" or "permanova"
    n_perm: Optional[int] = None
    notes: list[str] = field(default_factory=list)

    def row(self, term: str) -> AnovaRow:
        for r in self.rows:
            if r.term == term:
                return r
        raise KeyError(term)

    @property
    def effects(self) -> list[AnovaRow]:
        return [r for r in self.rows if r.f is not None]

    @property
    def residual(self) -> AnovaRow:
        return self.rows[-1]


def _sums_of_squares(y: np.ndarray) -> np.ndarray:
    """SS_A, SS_B, SS_AB, SS_resid for arrays of shape (..., a, b, n)."""
    a, b, n = y.shape[-3:]
    cell = y.mean(axis=-1)
    grand = cell.mean(axis=(-2, -1))
    ma = cell.mean(axis=-1)
    mb = cell.mean(axis=-2)
    g = grand[..., None]
    ss_a = b * n * np.sum((ma - g) ** 2, axis=-1)
    ss_b = a * n * np.sum((mb - g) ** 2, axis=-1)
    inter = cell - ma[..., :, None] - mb[..., None, :] + grand[..., None, None]
    ss_ab = n * np.sum(inter**2, axis=(-2, -1))
    ss_r = np.sum((y - cell[..., None]) ** 2, axis=(-3, -2, -1))
    return np.stack([ss_a, ss_b, ss_ab, ss_r], axis=-1)


def _degrees(design: Design) -> tuple[int, int, int, int]:
    a, b, n = design.shape
    return a - 1, b - 1, (a - 1) * (b - 1), a * b * (n - 1)


def _f_values(ss: np.ndarray, dfs) -> np.ndarray:
    ms = ss / np.asarray(dfs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return ms[..., :3] / ms[..., 3:4]


def _check_variance(design: Design, ss: np.ndarray) -> None:
    total = float(np.sum((design.data - design.data.mean()) ** 2))
    if ss[3] <= 1e-14 * total or total == 0:
        raise DegenerateVariance("residual mean square is zero")


def _table(design: Design, ss: np.ndarray, pvals, method: str, n_perm=None) -> AnovaTable:
    dfs = _degrees(design)
    fa, fb = design.factors
    terms = (fa, fb, f"{fa}:{fb}", "Residuals")
    f = _f_values(ss, dfs)
    rows = [AnovaRow(terms[i], dfs[i], float(ss[i]), float(ss[i] / dfs[i]), float(f[i]), float(pvals[i])) for i in range(3)]
    rows.append(AnovaRow("Residuals", dfs[3], float(ss[3]), float(ss[3] / dfs[3])))
    return AnovaTable(rows, method, n_perm)


def anova_two_way(design: Design) -> AnovaTable:
    """Classical two-way ANOVA with interaction for a balanced design.

    Parameters
    ----------
    design : Design
        a x b cells with n observations each (a, b >= 2).

    Returns
    -------
    AnovaTable
        Rows for A, B, A:B and Residuals; p-values from the F survival function.
    """
    ss = _sums_of_squares(design.data)
    _check_variance(design, ss)
    dfs = _degrees(design)
    f = _f_values(ss, dfs)
    return _table(design, ss, [f_sf(f[i], dfs[i], dfs[3]) for i in range(3)], "anova")


def permanova_two_way(design: Design, n_perm: int = 999, seed=0, chunk: int = 100) -> AnovaTable:
    """Two-way ANOVA with p-values from unrestricted permutation of observations.

    Parameters
    ----------
    design : Design
        Balanced cells.
    n_perm : int
        Number of permutations, at least 99. The smallest attainable p-value
        is ``1 / (1 + n_perm)``.
    seed : int or numpy.random.Generator
        Makes the result a pure function of (data, seed).

    Returns
    -------
    AnovaTable
        Same sums of squares and F statistics as :func:`anova_two_way`;
        ``p = (1 + #{F_perm >= F_obs}) / (1 + n_perm)`` for every term.
    """
    if n_perm < 99:
        raise ValueError("n_perm must be at least 99")
    ss = _sums_of_squares(design.data)
    _check_variance(design, ss)
    dfs = _degrees(design)
    f_obs = _f_values(ss, dfs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = design.data.reshape(-1)
    shape = design.shape
    exceed = np.zeros(3, dtype=np.int64)
    tol = 1e-12 * np.abs(f_obs)
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        perm = rng.permuted(np.broadcast_to(flat, (m, flat.size)), axis=1)
        f_perm = _f_values(_sums_of_squares(perm.reshape((m,) + shape)), dfs)
        f_perm = np.nan_to_num(f_perm, nan=0.0, posinf=np.inf)
        exceed += np.sum(f_perm >= f_obs - tol, axis=0)
        done += m
    pvals = (1.0 + exceed) / (1.0 + n_perm)
    return _table(design, ss, pvals, "permanova", n_perm)
