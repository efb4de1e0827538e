"""End-to-end analysis of a two-factor experiment: trim, resample, gate, test, localize."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ..errors import EmptySeries, SeriesTooShort
from .anova import AnovaTable, Design, anova_two_way, make_design, permanova_two_way
from .gates import VarianceCheck, heteroskedasticity_gate, normality_gate
from .resample import TestResult, bootstrap_iid, turning_point_test
from .tukey import TukeyRow, tukey_factor, tukey_hsd

MIN_TRIMMED = 10


@dataclass
class ResponseSeries:
    values: np.ndarray
    level_a: str
    level_b: str
    trial: str = "0"
    trimmed: bool = False

    def trim(self) -> "ResponseSeries":
        """Drop the first and last samples (start-up and tear-down windows)."""
        if self.trimmed:
            return self
        v = np.asarray(self.values, dtype=float)[1:-1]
        if v.size < MIN_TRIMMED:
            raise SeriesTooShort(
                f"cell {self.level_a}/{self.level_b} trial {self.trial}: {v.size} samples after trimming, need {MIN_TRIMMED}"
            )
        return ResponseSeries(v, self.level_a, self.level_b, self.trial, True)


@dataclass
class Gates:
    turning_points: dict[str, TestResult]
    normality: dict[str, TestResult]
    variance: VarianceCheck

    @property
    def all_normal(self) -> bool:
        return all(r.pvalue > self.alpha for r in self.normality.values())

    alpha: float = 0.05


@dataclass
class PipelineResult:
    design: Design
    gates: Gates
    table: AnovaTable
    tukey: "OrderedDict[str, list[TukeyRow]]"
    verdict: dict[str, str]
    alpha: float
    notes: list[str] = field(default_factory=list)

    @property
    def method(self) -> str:
        return self.table.method

    def significant(self, term: str) -> bool:
        return self.verdict[term] == "reject"


def read_response_tsv(path) -> list[ResponseSeries]:
    """Rows ``value factorA factorB trial`` (TAB-separated, optional header)."""
    groups: "OrderedDict[tuple, list[float]]" = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            if row[0] == "value":
                continue
            value, a, b, trial = row[:4]
            groups.setdefault((a, b, trial), []).append(float(value))
    return [ResponseSeries(np.array(v), a, b, t) for (a, b, t), v in groups.items()]


def write_response_tsv(path, series: Iterable[ResponseSeries]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("value\tfactorA\tfactorB\ttrial\n")
        for s in series:
            for v in np.asarray(s.values, dtype=float):
                fh.write(f"{float(v)!r}\t{s.level_a}\t{s.level_b}\t{s.trial}\n")


def _pool(series: Sequence[ResponseSeries]) -> "OrderedDict[tuple, np.ndarray]":
    pooled: "OrderedDict[tuple, list]" = OrderedDict()
    for s in series:
        pooled.setdefault((s.level_a, s.level_b), []).append(np.asarray(s.trim().values, dtype=float))
    return OrderedDict((k, np.concatenate(v)) for k, v in pooled.items())


def analysis_pipeline(
    series: Sequence[ResponseSeries],
    alpha: float = 0.05,
    n_perm: int = 999,
    seed: int = 0,
    n_out: Optional[int] = None,
    factors: tuple[str, str] = ("A", "B"),
) -> PipelineResult:
    """Run the full two-factor analysis.

    Parameters
    ----------
    series : sequence of ResponseSeries
        One windowed response series per (cell, trial).
    alpha : float
        Significance level for every decision.
    n_perm : int
        Permutations for the non-parametric branch.
    seed : int
        Seeds both the resampling and the permutations.
    n_out : int, optional
        Resampled size per cell; defaults to the smallest pooled cell.
    factors : (str, str)
        Names of factor A and factor B for the table rows.

    Returns
    -------
    PipelineResult
        Gates, the ANOVA table (parametric if every cell passes the normality
        gate, otherwise by permutation), Tukey rows for significant terms with
        the interaction first, and a reject/retain verdict per term.
    """
    if not series:
        raise EmptySeries("no response series given")
    rng = np.random.default_rng(seed)
    pooled = _pool(series)
    size = n_out or min(v.size for v in pooled.values())
    cells = OrderedDict((k, bootstrap_iid(v, size, rng)) for k, v in pooled.items())
    design = make_design(cells, factors)

    labels = {k: f"{k[0]}:{k[1]}" for k in cells}
    tp = {labels[k]: turning_point_test(v) for k, v in cells.items()}
    normal = {labels[k]: normality_gate(v) for k, v in cells.items()}
    var = heteroskedasticity_gate(list(cells.values()))
    gates = Gates(tp, normal, var, alpha)

    notes = ["normality gate: D'Agostino-Pearson K^2", "variance gate: Brown-Forsythe Levene + variance ratio"]
    if gates.all_normal:
        table = anova_two_way(design)
    else:
        table = permanova_two_way(design, n_perm, rng)
        notes.append(f"non-normal cells: permutation ANOVA with {n_perm} permutations")
    table.notes = notes

    fa, fb = factors
    inter = f"{fa}:{fb}"
    verdict = {r.term: ("reject" if r.p <= alpha else "retain") for r in table.effects}
    tukey: "OrderedDict[str, list[TukeyRow]]" = OrderedDict()
    if verdict[inter] == "reject":
        tukey[inter] = tukey_hsd(design, alpha, table.residual.ms, table.residual.df)
    for idx, term in ((0, fa), (1, fb)):
        if verdict[term] == "reject":
            tukey[term] = tukey_factor(design, idx, alpha)
    return PipelineResult(design, gates, table, tukey, verdict, alpha, notes)


# text output -----------------------------------------------------------------


def _num(x: Optional[float]) -> str:
    if x is None:
        return ""
    if x == 0 or (1e-3 <= abs(x) < 1e5):
        return f"{x:.4g}"
    return f"{x:.3e}"


def _pval(p: Optional[float]) -> str:
    return "" if p is None else f"{p:.3f}"


def format_anova(table: AnovaTable, title: str = "") -> str:
    """Aligned text: term, d.f., SS, MS, F, p, significance."""
    head = ("", "d.f.", "SS", "MS", "F", "p", "Signif.")
    body = [
        (r.term, str(r.df), _num(r.ss), _num(r.ms), _num(r.f), _pval(r.p), (r.stars or "--") if r.p is not None else "")
        for r in table.rows
    ]
    out = _align([head] + body)
    lines = ([title] if title else []) + out
    lines.append(f"method: {table.method}" + (f" ({table.n_perm} permutations)" if table.n_perm else ""))
    lines.append("Significance level: * 0.05, ** 0.01, *** 0.001")
    return "\n".join(lines) + "\n"


def format_tukey(rows: Sequence[TukeyRow], only_significant: bool = False, title: str = "") -> str:
    head = ("", "diff", "p-adj", "Signif.")
    body = [(r.pair, _num(r.diff), f"{r.p_adj:.2f}", r.stars or "--") for r in rows if r.significant or not only_significant]
    return "\n".join(([title] if title else []) + _align([head] + body)) + "\n"


def anova_tsv(table: AnovaTable) -> str:
    lines = ["term\tdf\tss\tms\tf\tp\tstars"]
    for r in table.rows:
        f = "" if r.f is None else repr(r.f)
        p = "" if r.p is None else repr(r.p)
        lines.append(f"{r.term}\t{r.df}\t{r.ss!r}\t{r.ms!r}\t{f}\t{p}\t{r.stars}")
    return "\n".join(lines) + "\n"


def tukey_tsv(rows: Sequence[TukeyRow]) -> str:
    lines = ["pair\tdiff\tq\tp_adj\tstars"]
    lines += [f"{r.pair}\t{r.diff!r}\t{r.q!r}\t{r.p_adj!r}\t{r.stars}" for r in rows]
    return "\n".join(lines) + "\n"


def format_result(result: PipelineResult, title: str = "") -> str:
    parts = [format_anova(result.table, title)]
    g = result.gates
    worst_tp = min(r.pvalue for r in g.turning_points.values())
    worst_norm = min(r.pvalue for r in g.normality.values())
    parts.append(
        f"gates: turning-point min p {worst_tp:.3f}; normality min p {worst_norm:.3g}; "
        f"Levene p {g.variance.levene.pvalue:.3g}; variance ratio {g.variance.variance_ratio:.3g}\n"
    )
    for term, rows in result.tukey.items():
        parts.append(format_tukey(rows, title=f"Tukey HSD ({term})"))
    parts.append("verdict: " + ", ".join(f"{t} {v}" for t, v in result.verdict.items()) + "\n")
    return "\n".join(parts)


def _align(rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return out
