"""Command line: ``emptdm generate | pretrain | run | report | plot``.

Every config field can be set from a YAML file (``--config``) and overridden
with repeated ``--set key=value`` flags. Outputs go under ``--out``, else the
config's ``output_dir``, else ``$EMPTDM_OUTPUT``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import nn
from ..datagen import (CORPUS_KINDS, BallsTaskSpec, gen_balls_task, gen_prior_corpus,
                       ingest_species_csv, species_to_task)
from ..domain import save_task
from ..memory_permanent import save_score_model
from .config import METHODS, load_config, save_config
from .report import emit_plots, table_rows, write_table
from .runner import build_prior, load_suite, run_suite, save_suite

log = logging.getLogger("emptdm")


def _int_list(text: str) -> list[int]:
    """``"0-4,7"`` -> ``[0, 1, 2, 3, 4, 7]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    return out


def _config(args):
    cfg = load_config(args.config, args.set or [])
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "balls":
        for s in _int_list(args.seeds):
            task = gen_balls_task(BallsTaskSpec(seed=s, patch=args.patch, budget=args.budget))
            save_task(task, out / f"balls_{s}.json")
        print(f"wrote {len(_int_list(args.seeds))} tasks to {out}")
    elif args.what == "corpus":
        buf = gen_prior_corpus(args.kind, args.n, args.seed)
        np.save(out / f"corpus_{args.kind}.npy", buf.samples)
        print(f"wrote {len(buf)} {args.kind} grids to {out}")
    else:
        if not args.csv or not args.region:
            raise SystemExit("species generation needs --csv and --region")
        grid = ingest_species_csv(args.csv, [float(v) for v in args.region.split(",")], args.size)
        task = species_to_task(grid, args.threshold, args.budget)
        save_task(task, out / "species.json")
        print(f"species task written; {grid.skipped} records outside region skipped")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    model = build_prior(cfg)
    path = Path(args.checkpoint or cfg.out_dir() / "prior.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_score_model(model, path)
    losses = getattr(model, "train_log", None)
    if losses:
        print(f"DSM loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} epochs")
    print(f"checkpoint: {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args).validate()
    methods = args.methods.split(",") if args.methods else [cfg.method]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise SystemExit(f"unknown methods {bad}")
    budgets = _int_list(args.budgets) if args.budgets else [cfg.budget]
    seeds = _int_list(args.seeds) if args.seeds else list(cfg.seeds)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    res = run_suite(cfg, methods, budgets, seeds, log_dir=out / "logs")
    save_suite(res, out / "results.json")
    write_table(res, out / "sr_table.csv")
    _print_table(res)
    return 0 if all(res.complete(m, b) for m in methods for b in budgets) else 2


def _print_table(res) -> None:
    print(f"{'method':<16}{'B':>6}{'n':>4}  SR (mean ± sd)")
    for row in table_rows(res):
        flag = "" if row["complete"] else "  [incomplete]"
        print(f"{row['method']:<16}{row['budget']:>6}{row['n']:>4}  {row['cell']}{flag}")


def cmd_report(args) -> int:
    res = load_suite(args.results)
    _print_table(res)
    if args.csv:
        write_table(res, args.csv)
    return 0


def cmd_plot(args) -> int:
    res = load_suite(args.results)
    out = args.out or Path(args.results).parent / "plots"
    for f in emit_plots(res, out):
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emptdm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (repeatable)")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate", help="write benchmark tasks or prior corpora")
    g.add_argument("what", choices=["balls", "corpus", "species"])
    g.add_argument("--out", required=True)
    g.add_argument("--seeds", default="0-19")
    g.add_argument("--patch", type=int, default=1)
    g.add_argument("--budget", type=int, default=250)
    g.add_argument("--kind", choices=CORPUS_KINDS, default="digits-like")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--csv", help="species records lat,lon,count")
    g.add_argument("--region", help="lat_min,lat_max,lon_min,lon_max")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--threshold", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("pretrain", help="build and save the permanent memory")
    with_config(t)
    t.add_argument("--checkpoint", help="output .npz path")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="run episodes over methods x budgets x seeds")
    with_config(r)
    r.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
    r.add_argument("--budgets", help="e.g. 150,200,250")
    r.add_argument("--seeds", help="e.g. 0-19")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="print the SR table of a finished run")
    rep.add_argument("results", help="results.json written by 'run'")
    rep.add_argument("--csv", help="also write the table here")
    rep.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="discovery curves and SR-vs-budget charts")
    pl.add_argument("results")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    nn.tune_allocator()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
