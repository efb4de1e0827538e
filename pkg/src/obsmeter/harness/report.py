"""Writing run outputs and re-analysing them from disk."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

from ..stats.pipeline import anova_tsv, format_result, read_response_tsv, tukey_tsv, write_response_tsv
from .sets import Analysis, SetResult, run_analysis

MANIFEST = "manifest.tsv"
PARAMS = "params.tsv"


def _slug(*parts: str) -> str:
    return "-".join(p.replace(":", "x").replace("/", "_") for p in parts)


def write_run(result: SetResult, out: Path, recipe_text: Optional[str] = None) -> None:
    """Persist responses and per-cell bookkeeping; analysis is done by :func:`analyze`."""
    out = Path(out)
    (out / "responses").mkdir(parents=True, exist_ok=True)
    r = result.recipe
    with open(out / PARAMS, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"set\t{r.set_id}\nalpha\t{r.alpha!r}\npermutations\t{r.n_perm}\nseed\t{r.seed}\n")
        fh.write(f"duration\t{r.duration!r}\nrepetitions\t{r.repetitions}\ninterval\t{r.report_interval!r}\n")
    if recipe_text is not None:
        (out / "recipe.txt").write_text(recipe_text, encoding="utf-8")
    with open(out / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("response\tsubset\tfactorA\tfactorB\tfile\n")
        for a in result.analyses:
            name = f"responses/{_slug(a.response, a.subset)}.tsv"
            write_response_tsv(out / name, a.series)
            fh.write(f"{a.response}\t{a.subset}\t{a.factors[0]}\t{a.factors[1]}\t{name}\n")
    with open(out / "cells.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cell\trep\tinjected\tstored\tclient_gaps\tserver_drops\tclient_drops\tbalanced\tvalid\n")
        for run in result.runs:
            c = run.conservation
            cell = "/".join(str(x) for x in run.cell)
            fh.write(
                f"{cell}\t{run.rep}\t{c.injected}\t{c.stored}\t{c.client_gaps}\t{c.server_drops}\t"
                f"{c.client_drops}\t{int(c.balanced)}\t{int(run.valid)}\n"
            )
    for name, text in result.tables.items():
        (out / name).write_text(text, encoding="utf-8")


def _read_params(path: Path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return {row[0]: row[1] for row in csv.reader(fh, delimiter="\t") if row}


def _aligned_tsv(text: str) -> str:
    rows = [line.split("\t") for line in text.strip().splitlines()]
    fmt = []
    for r in rows:
        cells = []
        for i, c in enumerate(r):
            try:
                c = f"{float(c):.6g}"
            except ValueError:
                pass
            cells.append(c)
        fmt.append(cells)
    widths = [max(len(r[i]) for r in fmt) for i in range(len(fmt[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip() for r in fmt) + "\n"


def analyze(run_dir: Path) -> str:
    """Re-run the statistics over a run directory; writes analysis/ and report.txt."""
    run_dir = Path(run_dir)
    params = _read_params(run_dir / PARAMS)
    alpha, n_perm, seed = float(params["alpha"]), int(params["permutations"]), int(params["seed"])
    adir = run_dir / "analysis"
    adir.mkdir(exist_ok=True)
    parts = [
        f"Experiment set {params['set']}",
        f"duration {params['duration']} s x {params['repetitions']} repetitions, report interval {params['interval']} s, "
        f"alpha {alpha:g}, {n_perm} permutations, seed {seed}",
        "",
    ]
    cells = (run_dir / "cells.tsv").read_text(encoding="utf-8").strip().splitlines()[1:]
    unbalanced = [c for c in cells if c.split("\t")[7] != "1"]
    parts.append(f"cells: {len(cells)} runs, {len(unbalanced)} failing injected = stored + gaps + server drops")
    parts.append("")
    with open(run_dir / MANIFEST, encoding="utf-8") as fh:
        entries = list(csv.DictReader(fh, delimiter="\t"))
    for e in entries:
        series = read_response_tsv(run_dir / e["file"])
        a = run_analysis(Analysis(e["response"], e["subset"], (e["factorA"], e["factorB"]), series), alpha, n_perm, seed)
        title = f"== {a.response} ({a.subset}) =="
        slug = _slug(a.response, a.subset)
        if a.result is None:
            parts.append(f"{title}\n{a.note}\n")
            continue
        (adir / f"anova-{slug}.tsv").write_text(anova_tsv(a.result.table), encoding="utf-8")
        for term, rows in a.result.tukey.items():
            (adir / f"tukey-{slug}-{_slug(term)}.tsv").write_text(tukey_tsv(rows), encoding="utf-8")
        parts.append(format_result(a.result, title))
    for name in ("timestamp_diff.tsv", "frequency_curve.tsv"):
        p = run_dir / name
        if p.exists():
            parts.append(f"== {name[:-4]} ==")
            parts.append(_aligned_tsv(p.read_text(encoding="utf-8")))
    text = "\n".join(parts).rstrip() + "\n"
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    return text
