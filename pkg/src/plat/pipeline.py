"""Run orchestration: each stage reads upstream artifacts and writes its own directory.

Layout of a run directory::

    run/
      data/       corpus.jsonl, train/val/test/hard_ood.jsonl
      cot/        model.ckpt, log.csv
      plat/       model.ckpt, log.csv
      rl/         model.ckpt, log.csv
      eval-<phase>/eval.json
      branch/     branching.csv, scatter.csv
      entropy/    entropy.csv
      ablate/     ablation.json, ablation.md
      plots/      *.png

Every stage directory also holds ``config.ini`` (the resolved config),
``manifest.json`` (stage, seed, build id, files) and never touches another
stage's files.
"""
from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import logging
import os
import subprocess
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from plat import __version__
from plat import checkpoint as ckpt_io
from plat.backbone import Backbone, BackboneConfig
from plat.config import RunConfig, dump_config
from plat.data import Vocab, generate_corpus, make_splits, read_jsonl, write_jsonl
from plat.errors import ConfigError, DependencyError
from plat.evaluation import (EvalReport, branch_analysis, cot_entropy_profile, entropy_profile,
                             evaluate_cot, evaluate_plat, write_branching_csv, write_entropy_csv,
                             write_scatter_csv)
from plat.model import ModelBundle, PlannerConfig
from plat.training.grpo import train_grpo
from plat.training.optim import Adam
from plat.training.sft import train_cot_sft, train_plat_sft, write_log

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "PLAT_RUN_ROOT"
SPLITS = ("train", "val", "test", "hard_ood")
# stage that produces each phase checkpoint, for dependency messages
PRODUCER = {"data": "gen-data", "cot": "train-cot", "plat": "train-plat", "rl": "train-rl",
            "branch": "branch", "entropy": "entropy"}


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def new_run_dir(name: str = "") -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = run_root() / (f"{stamp}-{name}" if name else stamp)
    path, i = base, 1
    while path.exists():
        path = Path(f"{base}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def stage_dir(run: Path, stage: str, force: bool = False) -> Path:
    d = Path(run) / stage
    if (d / "manifest.json").exists() and not force:
        raise ConfigError(f"{d} already holds a finished '{stage}' stage; pass --force to redo it")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(d: Path, cfg: RunConfig, stage: str, seed: int, extra: dict | None = None) -> None:
    (d / "config.ini").write_text(dump_config(cfg))
    files = sorted(p.name for p in d.iterdir() if p.name != "manifest.json")
    manifest = {"stage": stage, "seed": cfg.run.seed, "component_seed": seed, "build_id": build_id(),
                "files": files, **(extra or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def require(path: Path, phase: str) -> Path:
    if not path.exists():
        producer = PRODUCER.get(phase, phase)
        raise DependencyError(f"missing '{phase}' phase output at {path}; run `plat {producer}` first")
    return path


def checkpoint_path(run: Path, phase: str) -> Path:
    return Path(run) / phase / "model.ckpt"


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
def gen_data(cfg: RunConfig, run: Path, force: bool = False) -> dict[str, list]:
    d = stage_dir(run, "data", force)
    seed = cfg.seed_for("data")
    dc = cfg.data
    corpus = generate_corpus(seed, dc.n, dc.step_range, dc.operand_range, dc.max_value, dc.ops)
    splits = make_splits(corpus, dc.fractions, seed=seed, n_hard=dc.n_hard)
    write_jsonl(corpus, d / "corpus.jsonl")
    for name, samples in splits.items():
        write_jsonl(samples, d / f"{name}.jsonl")
    write_manifest(d, cfg, "data", seed, {"sizes": {k: len(v) for k, v in splits.items()}})
    return splits


def load_split(run: Path, name: str) -> list:
    if name not in SPLITS:
        raise ConfigError(f"unknown split {name!r}; choose from {SPLITS}")
    return read_jsonl(require(Path(run) / "data" / f"{name}.jsonl", "data"))


def _eval_subset(cfg: RunConfig, samples: list) -> list:
    n = cfg.eval.max_questions
    return samples if n is None else samples[:n]


def backbone_config(cfg: RunConfig, vocab: Vocab) -> BackboneConfig:
    return dataclasses.replace(cfg.backbone, vocab_size=len(vocab))


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------
def _progress(phase: str, every: int = 100) -> Callable[[int, float], None]:
    t0 = time.time()

    def cb(step, loss):
        if step % every == 0:
            log.info("%s step %d loss %.4f (%.0fs)", phase, step, loss, time.time() - t0)
    return cb


def _save_phase(d: Path, bundle: ModelBundle, phase: str, opt: Adam | None, meta: dict,
                partition: dict | None = None) -> Path:
    path = d / "model.ckpt"
    ck = ckpt_io.from_bundle(bundle, phase, partition=partition,
                             optimizer=None if opt is None else opt.state_dict(), meta=meta)
    ckpt_io.save(ck, path)
    return path


def train_cot(cfg: RunConfig, run: Path, force: bool = False, resume: bool = False,
              stop_at: int | None = None) -> Path:
    """CoT-SFT baseline. ``stop_at`` ends early (checkpoint keeps optimizer state); ``resume`` continues it."""
    train = load_split(run, "train")
    vocab = Vocab()
    seed = cfg.seed_for("cot")
    sft = dataclasses.replace(cfg.cot, seed=seed)
    d = Path(run) / "cot"
    prior_rows: list = []
    if resume:
        ck = ckpt_io.load(require(d / "model.ckpt", "cot"))
        bb = ckpt_io.backbone_from_checkpoint(ck)
        opt = Adam({k: bb.params[k] for k in bb.base_parameter_names()}, lr=sft.lr,
                   weight_decay=sft.weight_decay, grad_clip=sft.grad_clip)
        opt.load_state_dict(ck.optimizer)
        prior_rows = ck.meta.get("losses", [])
        d.mkdir(exist_ok=True)
    else:
        d = stage_dir(run, "cot", force)
        bb = Backbone(backbone_config(cfg, vocab), seed=cfg.seed_for("init"))
        opt = None
    res, opt = train_cot_sft(bb, train, vocab, sft, optimizer=opt, callback=_progress("cot"), stop_at=stop_at)
    bundle = ModelBundle.create(bb.cfg, cfg.planner, vocab.special, seed=cfg.seed_for("init"), backbone=bb)
    losses = list(prior_rows) + res.losses
    _save_phase(d, bundle, "cot", opt, {"losses": losses, "steps": res.steps})
    write_log(res.rows, d / ("log.csv" if not resume else f"log.resume-{len(prior_rows)}.csv"))
    write_manifest(d, cfg, "cot", seed, {"steps": res.steps})
    return d / "model.ckpt"


def init_plat_bundle(cfg: RunConfig, cot_ckpt: ckpt_io.Checkpoint, planner: PlannerConfig | None = None) -> ModelBundle:
    """Fresh projectors and planner settings on top of the CoT backbone."""
    bb = ckpt_io.backbone_from_checkpoint(cot_ckpt)
    special = Vocab().special
    return ModelBundle.create(bb.cfg, planner or cfg.planner, special, seed=cfg.seed_for("init"), backbone=bb)


def train_plat(cfg: RunConfig, run: Path, force: bool = False, planner: PlannerConfig | None = None,
               stage: str = "plat") -> Path:
    train = load_split(run, "train")
    cot = ckpt_io.load(require(checkpoint_path(run, "cot"), "cot"))
    d = stage_dir(run, stage, force)
    vocab = Vocab()
    bundle = init_plat_bundle(cfg, cot, planner)
    seed = cfg.seed_for("plat")
    res, opt = train_plat_sft(bundle, train, vocab, dataclasses.replace(cfg.plat, seed=seed),
                              callback=_progress(stage))
    _save_phase(d, bundle, "plat", opt, {"losses": res.losses, "steps": res.steps})
    write_log(res.rows, d / "log.csv")
    write_manifest(d, cfg, stage, seed, {"steps": res.steps})
    return d / "model.ckpt"


def rl_pool(cfg: RunConfig, run: Path) -> list:
    """GRPO questions: the train split, or ``rl.pool_size`` fresh in-domain questions.

    The SFT model has memorized its train split, so rollouts there rarely
    disagree and the group advantages vanish. A fresh pool from the same
    generator (minus the val/test questions) keeps a learning signal.
    """
    n = cfg.rl.pool_size
    if n == 0:
        return load_split(run, "train")
    held = {s.question for name in ("val", "test") for s in load_split(run, name)}
    dc = cfg.data
    fresh = generate_corpus(cfg.seed_for("rl-pool"), n + len(held), dc.step_range, dc.operand_range,
                            dc.max_value, dc.ops)
    return [s for s in fresh if s.question not in held][:n]


def train_rl(cfg: RunConfig, run: Path, force: bool = False) -> Path:
    train = rl_pool(cfg, run)
    ck = ckpt_io.load(require(checkpoint_path(run, "plat"), "plat"))
    d = stage_dir(run, "rl", force)
    vocab = Vocab()
    bundle = ckpt_io.to_bundle(ck)
    seed = cfg.seed_for("rl")
    rl_cfg = dataclasses.replace(cfg.rl, seed=seed)
    res, opt = train_grpo(bundle, train, vocab, rl_cfg)
    _save_phase(d, bundle, "rl", opt, {"reward_curve": res.reward_curve},
                partition=res.partition.to_dict())
    write_log(res.rows, d / "log.csv")
    write_manifest(d, cfg, "rl", seed, {"steps": rl_cfg.steps})
    return d / "model.ckpt"


# ---------------------------------------------------------------------------
# evaluation stages
# ---------------------------------------------------------------------------
def load_model(run: Path, phase: str):
    """A CoT :class:`Backbone` for ``cot``, otherwise a :class:`ModelBundle`."""
    ck = ckpt_io.load(require(checkpoint_path(run, phase), phase))
    if phase == "cot":
        return ckpt_io.backbone_from_checkpoint(ck)
    return ckpt_io.to_bundle(ck)


def evaluate_model(model, samples: list, cfg: RunConfig, seed: int, name: str, ks=None) -> EvalReport:
    vocab = Vocab()
    ec = cfg.eval
    ks = ec.ks if ks is None else ks
    if isinstance(model, ModelBundle):
        return evaluate_plat(model, samples, vocab, ks, ec.n_samples, ec.temperature, seed, name)
    return evaluate_cot(model, samples, vocab, ks, ec.n_samples, ec.temperature, seed, name)


def run_eval(cfg: RunConfig, run: Path, phase: str, force: bool = False, split: str | None = None,
             ks: Sequence[int] | None = None) -> EvalReport:
    model = load_model(run, phase)
    samples = _eval_subset(cfg, load_split(run, split or cfg.eval.split))
    d = stage_dir(run, f"eval-{phase}", force)
    seed = cfg.seed_for("eval")
    rep = evaluate_model(model, samples, cfg, seed, split or cfg.eval.split, ks)
    rep.method = phase
    rep.save(d / "eval.json")
    write_manifest(d, cfg, f"eval-{phase}", seed)
    return rep


def run_branch(cfg: RunConfig, run: Path, phases: Sequence[str] = ("cot", "plat"), force: bool = False,
               temperature: float | None = None) -> list:
    samples = _eval_subset(cfg, load_split(run, cfg.eval.split))
    models = [(p, load_model(run, p)) for p in phases]
    d = stage_dir(run, "branch", force)
    seed = cfg.seed_for("branch")
    vocab = Vocab()
    tau = cfg.eval.temperature if temperature is None else temperature
    reports = []
    for phase, model in models:
        rep = branch_analysis(model, samples, vocab, cfg.eval.branch_samples, tau, cfg.eval.bins, seed)
        rep.method = phase
        reports.append(rep)
    write_branching_csv(reports, d / "branching.csv")
    write_scatter_csv(reports, d / "scatter.csv")
    write_manifest(d, cfg, "branch", seed)
    return reports


def run_entropy(cfg: RunConfig, run: Path, phases: Sequence[str] = ("cot", "plat"), force: bool = False) -> list:
    samples = _eval_subset(cfg, load_split(run, cfg.eval.split))
    models = [(p, load_model(run, p)) for p in phases]
    d = stage_dir(run, "entropy", force)
    vocab = Vocab()
    profiles = []
    for phase, model in models:
        if isinstance(model, ModelBundle):
            prof = entropy_profile(model, samples, vocab, cfg.eval.bins)
        else:
            prof = cot_entropy_profile(model, samples, vocab, cfg.eval.bins)
        prof.method = phase
        profiles.append(prof)
    write_entropy_csv(profiles, d / "entropy.csv")
    write_manifest(d, cfg, "entropy", cfg.seed_for("entropy"))
    return profiles


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------
ABLATIONS: dict[str, dict] = {
    "PLaT": {},
    "w/o context": {"use_context": False},
    "w/o EMA": {"aggregation": "none"},
    "w/o denoising": {"noise_std": 0.0},
    "Residual": {"aggregation": "residual"},
    "Indep. Decoder": {"independent_decoder": True},
}


def _slug(name: str) -> str:
    return name.lower().replace("/", "").replace(".", "").replace(" ", "-")


def run_ablation(cfg: RunConfig, run: Path, variants: Sequence[str] | None = None, force: bool = False,
                 n_eval_seeds: int = 3) -> list[dict]:
    """Train each planner variant from the CoT checkpoint; report greedy and Pass@k_max.

    Pass@k is averaged over ``n_eval_seeds`` sampling seeds (mean and std), as
    greedy accuracy does not depend on the seed.
    """
    names = list(variants or ABLATIONS)
    unknown = set(names) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablations {sorted(unknown)}; choose from {list(ABLATIONS)}")
    require(checkpoint_path(run, "cot"), "cot")
    samples = _eval_subset(cfg, load_split(run, cfg.eval.split))
    d = stage_dir(run, "ablate", force)
    k = max(cfg.eval.ks)
    rows = []
    for name in names:
        planner = dataclasses.replace(cfg.planner, **ABLATIONS[name])
        sub = f"ablate/{_slug(name)}"
        path = train_plat(cfg, run, force=True, planner=planner, stage=sub)
        bundle = ckpt_io.to_bundle(ckpt_io.load(path))
        passes = []
        greedy = None
        for s in range(n_eval_seeds):
            rep = evaluate_model(bundle, samples, cfg, cfg.seed_for(f"ablate-eval-{s}"), cfg.eval.split, ks=(k,))
            passes.append(rep.pass_at_k[k])
            greedy = rep.greedy_accuracy
        rows.append({"method": name, "greedy": greedy, "k": k,
                     "pass_mean": float(np.mean(passes)), "pass_std": float(np.std(passes))})
    (d / "ablation.json").write_text(json.dumps(rows, indent=2))
    (d / "ablation.md").write_text(ablation_table(rows))
    write_manifest(d, cfg, "ablate", cfg.seed_for("ablate"))
    return rows


def ablation_table(rows: Sequence[dict]) -> str:
    k = rows[0]["k"] if rows else 0
    lines = [f"| Method | Acc. | Pass@{k} |", "|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {100 * r['greedy']:.2f} | "
                     f"{100 * r['pass_mean']:.2f} ± {100 * r['pass_std']:.2f} |")
    return "\n".join(lines) + "\n"
