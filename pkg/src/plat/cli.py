"""Command-line entry point: ``plat <subcommand> [options]``.

Exit codes: 0 success, 2 usage or config error, 3 missing upstream artifact,
4 corrupt checkpoint, 5 numeric failure, 1 anything else. Errors are printed
to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from plat import checkpoint as ckpt_io
from plat import pipeline as pl
from plat.config import PROFILES, RunConfig, load_config
from plat.data import Vocab
from plat.errors import CheckpointError, ConfigError, DependencyError, NumericError, PlatError

log = logging.getLogger("plat")

EXIT_CODES = [(ConfigError, 2), (DependencyError, 3), (CheckpointError, 4), (NumericError, 5)]


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="sectioned config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="named preset applied before the file")
    p.add_argument("--seed", type=int, help="global seed (same as --set run.seed=N)")
    p.add_argument("--force", action="store_true", help="redo a stage that already finished")


def _run_arg(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--run", type=Path, required=required,
                   help="run directory (default root: $%s or ./runs)" % pl.RUN_ROOT_ENV)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plat", description="Latent planning experiments on synthetic arithmetic.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate the corpus and its splits")
    _config_args(p)
    _run_arg(p, required=False)
    p.add_argument("--n", type=int, help="corpus size (same as --set data.n=N)")

    for name, helptext in (("train-cot", "CoT-SFT baseline"), ("train-plat", "latent reconstruction SFT"),
                           ("train-rl", "decoupled GRPO on the decoder")):
        p = sub.add_parser(name, help=helptext)
        _config_args(p)
        _run_arg(p)
        if name == "train-cot":
            p.add_argument("--resume", action="store_true", help="continue an interrupted run")
            p.add_argument("--stop-at", type=int, help="stop after this global step")

    p = sub.add_parser("infer", help="lazy-decode questions and print traces as JSON lines")
    _config_args(p)
    _run_arg(p)
    p.add_argument("--phase", default="plat", choices=["plat", "rl"])
    p.add_argument("--question", action="append", default=[], help="question text (repeatable)")
    p.add_argument("--split", help="decode the first --limit questions of a split instead")
    p.add_argument("--limit", type=int, default=5)
    p.add_argument("--eager", action="store_true", help="also verbalize every intermediate state")

    p = sub.add_parser("eval", help="greedy accuracy, Pass@k and pass counts")
    _config_args(p)
    _run_arg(p)
    p.add_argument("--phase", default="plat", choices=["cot", "plat", "rl"])
    p.add_argument("--split")

    for name in ("branch", "entropy"):
        p = sub.add_parser(name, help=f"{name} analysis for CoT and PLaT")
        _config_args(p)
        _run_arg(p)
        p.add_argument("--phases", default="cot,plat")

    p = sub.add_parser("ablate", help="train and compare planner ablations")
    _config_args(p)
    _run_arg(p)
    p.add_argument("--variants", help="comma-separated subset of: " + ", ".join(pl.ABLATIONS))

    p = sub.add_parser("plot", help="charts from branching/entropy/scatter CSVs")
    _run_arg(p)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("grad-check", help="finite-difference check of every op and the composed losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true")
    return ap


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "n", None) is not None:
        overrides.append(f"data.n={args.n}")
    return load_config(args.config, overrides, profile=args.profile)


def _json_safe(obj):
    # NaN marks empty bins; emit null so the output stays valid JSON
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _print(obj) -> None:
    print(json.dumps(_json_safe(obj), indent=2, default=str, allow_nan=False))


def cmd_infer(args, cfg: RunConfig) -> None:
    from plat.data import question_ids
    from plat.verbalizer import decode_all_steps, lazy_infer

    bundle = pl.load_model(args.run, args.phase)
    vocab = Vocab()
    if args.question:
        questions = [vocab.tokenize(q) + [vocab.special.enc] for q in args.question]
    elif args.split:
        questions = [question_ids(s, vocab) for s in pl.load_split(args.run, args.split)[:args.limit]]
    else:
        raise ConfigError("give --question or --split")
    fn = decode_all_steps if args.eager else lazy_infer
    for q in questions:
        print(fn(bundle, q).to_json(vocab))


def cmd_plot(args) -> None:
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = args.run
    d = pl.stage_dir(run, "plots", args.force)
    made = []

    def read(path):
        with open(pl.require(path, path.parent.name)) as f:
            return list(csv.DictReader(f))

    for stage, fname, ycols in (("branch", "branching.csv", ["branch_mean", "valid_mean"]),
                                ("entropy", "entropy.csv", ["H_mean"])):
        path = Path(run) / stage / fname
        if not path.exists():
            continue
        rows = read(path)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in sorted({r["method"] for r in rows}):
            sel = [r for r in rows if r["method"] == method]
            x = [(int(r["bin"]) + 0.5) * 100 / len(sel) for r in sel]
            for col in ycols:
                ax.plot(x, [float(r[col]) for r in sel], marker="o", label=f"{method} {col}")
        ax.set_xlabel("reasoning progress (%)")
        ax.legend()
        fig.tight_layout()
        out = d / fname.replace(".csv", ".png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        made.append(out.name)
    scatter = Path(run) / "branch" / "scatter.csv"
    if scatter.exists():
        rows = read(scatter)
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for method in sorted({r["method"] for r in rows}):
            sel = [r for r in rows if r["method"] == method]
            ax.scatter([int(r["branch_count"]) for r in sel], [int(r["valid_count"]) for r in sel],
                       label=method, alpha=0.6)
        ax.set_xlabel("branch count")
        ax.set_ylabel("valid branch count")
        ax.legend()
        fig.tight_layout()
        fig.savefig(d / "scatter.png", dpi=120)
        plt.close(fig)
        made.append("scatter.png")
    if not made:
        raise DependencyError(f"no branch/entropy CSVs under {run}; run `plat branch` or `plat entropy` first")
    (d / "manifest.json").write_text(json.dumps({"stage": "plots", "files": made, "build_id": pl.build_id()}))
    _print({"plots": made})


def cmd_grad_check(args) -> int:
    from plat.gradsuite import run_suite

    results = run_suite(seed=args.seed, include_models=not args.ops_only)
    for r in results:
        print(f"{r.name:32s} {r.report}  ({r.seconds:.2f}s)")
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} passed")
    return 1 if bad else 0


def dispatch(args) -> int:
    if args.cmd == "grad-check":
        return cmd_grad_check(args)
    if args.cmd == "plot":
        cmd_plot(args)
        return 0
    cfg = resolve_config(args)
    if args.cmd == "gen-data":
        run = args.run or pl.new_run_dir(cfg.run.name)
        splits = pl.gen_data(cfg, Path(run), force=args.force)
        _print({"run": str(run), "sizes": {k: len(v) for k, v in splits.items()}})
    elif args.cmd == "train-cot":
        path = pl.train_cot(cfg, args.run, force=args.force, resume=args.resume, stop_at=args.stop_at)
        _print({"checkpoint": str(path)})
    elif args.cmd == "train-plat":
        _print({"checkpoint": str(pl.train_plat(cfg, args.run, force=args.force))})
    elif args.cmd == "train-rl":
        _print({"checkpoint": str(pl.train_rl(cfg, args.run, force=args.force))})
    elif args.cmd == "infer":
        cmd_infer(args, cfg)
    elif args.cmd == "eval":
        rep = pl.run_eval(cfg, args.run, args.phase, force=args.force, split=args.split)
        d = rep.to_dict()
        d.pop("questions")
        _print(d)
    elif args.cmd == "branch":
        reps = pl.run_branch(cfg, args.run, args.phases.split(","), force=args.force)
        _print({r.method: {"branch_mean": r.branch_mean, "valid_mean": r.valid_mean} for r in reps})
    elif args.cmd == "entropy":
        profs = pl.run_entropy(cfg, args.run, args.phases.split(","), force=args.force)
        _print({p.method: p.h_mean for p in profs})
    elif args.cmd == "ablate":
        variants = args.variants.split(",") if args.variants else None
        rows = pl.run_ablation(cfg, args.run, variants, force=args.force)
        print(pl.ablation_table(rows))
    return 0


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return dispatch(args)
    except PlatError as exc:
        code = next((c for t, c in EXIT_CODES if isinstance(exc, t)), 1)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.cmd}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
