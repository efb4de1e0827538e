"""obsmeter-bench: run experiment sets and analyse their outputs."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from ..errors import ObsmeterError
from .recipes import default_recipe, parse_recipe
from .report import analyze, write_run
from .sets import run_set

log = logging.getLogger("obsmeter.bench")


def _cmd_run(args) -> int:
    if args.recipe:
        text = Path(args.recipe).read_text(encoding="utf-8")
        recipe = parse_recipe(text, args.set)
    else:
        text = None
        recipe = default_recipe(args.set)
    if args.seed is not None:
        recipe.seed = args.seed
    if args.full_scale:
        recipe = recipe.full_scale()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    result = run_set(recipe, out / "stores" if args.keep_stores else None, keep_stores=args.keep_stores)
    log.info("set %d: %d runs in %.1f s", recipe.set_id, len(result.runs), time.monotonic() - t0)
    write_run(result, out, text)
    sys.stdout.write(analyze(out))
    return 0


def _cmd_analyze(args) -> int:
    sys.stdout.write(analyze(Path(args.input)))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="obsmeter-bench", description="Observer-effect experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment set")
    run.add_argument("--set", type=int, choices=(1, 2, 3), required=True)
    run.add_argument("--recipe", help="RunConfig file with grid lines (defaults apply when omitted)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--full-scale", "--paper-scale", dest="full_scale", action="store_true", help="five-minute runs instead of desk-scale ones")
    run.add_argument("--keep-stores", action="store_true", help="keep every run's collection store under <out>/stores")
    run.set_defaults(func=_cmd_run)

    an = sub.add_parser("analyze", help="re-run the statistics over a run directory")
    an.add_argument("--in", dest="input", required=True)
    an.set_defaults(func=_cmd_analyze)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ObsmeterError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
