"""Measurement suite: accuracy, Pass@k, pass accounting, entropy and branching.

Every PLaT measurement reuses the same fact: the planner is deterministic, so
a question's latent states are rolled once and all sampling happens in the
decoder. CoT baselines are measured on a plain :class:`Backbone`.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.backbone import Backbone, pad_left
from plat.data import ReasoningSample, Vocab, question_ids
from plat.equations import canonical_step, extract_equation
from plat.errors import ConfigError
from plat.model import ModelBundle
from plat.planner import roll_trajectory
from plat.training.rewards import parse_answer
from plat.verbalizer import (InferOptions, _next_token_logits, default_stops, generate,
                             lazy_infer, sample_from_logits)

SMALL_CONSTANTS = frozenset(range(0, 13))
DEFAULT_KS = (1, 4, 8, 16)


# ---------------------------------------------------------------------------
# Pass@k
# ---------------------------------------------------------------------------
def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    """``1 - C(n-c, k) / C(n, k)`` as an exact fraction."""
    if not 0 <= c <= n:
        raise ConfigError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must lie in [1, n={n}]")
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(n: int, c: int, k: int) -> float:
    return float(pass_at_k_exact(n, c, k))


def pass_at_k_enumerated(outcomes: Sequence[bool], k: int) -> Fraction:
    """Fraction of all k-subsets that contain at least one correct sample."""
    subsets = list(itertools.combinations(range(len(outcomes)), k))
    hits = sum(1 for s in subsets if any(outcomes[i] for i in s))
    return Fraction(hits, len(subsets))


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------
def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def progress_bin(j: int, m: int, bins: int) -> int:
    """0-based bin of step ``j`` (1-based) out of ``m`` on normalized progress (0, 1]."""
    return min(bins - 1, max(0, math.ceil(j / m * bins) - 1))


# ---------------------------------------------------------------------------
# step oracles
# ---------------------------------------------------------------------------
def question_numbers(question: str) -> set[int]:
    return {int(x) for x in re.findall(r"\d+", question)}


def validate_step(step: str, question: str | set[int], prior_results: Sequence[int] = (),
                  gt_steps: Sequence[str] | None = None) -> bool:
    """True iff the equation parses, holds, and uses only grounded operands.

    Grounded: a number in the question, a result of a prior valid step, or a
    small constant 0-12. ``gt_steps`` is accepted for interface parity and
    does not change the verdict.
    """
    eq = extract_equation(step)
    if eq is None or not eq.correct:
        return False
    nums = question if isinstance(question, set) else question_numbers(question)
    allowed = set(nums) | set(int(r) for r in prior_results) | SMALL_CONSTANTS
    return all(v in allowed for v in eq.operands)


def validate_path(steps: Sequence[str], question: str) -> list[bool]:
    """Validity of each step given the earlier valid steps of the same path."""
    nums = question_numbers(question)
    results: list[int] = []
    out = []
    for s in steps:
        ok = validate_step(s, nums, results)
        out.append(ok)
        if ok:
            rhs = extract_equation(s).rhs
            if rhs.denominator == 1:
                results.append(int(rhs))
    return out


def cluster_steps(steps: Sequence[str]) -> list[list[str]]:
    """Partition steps by canonical equation; unparseable texts only group with identical texts.

    Equation clusters come first, then the raw ones. Output order depends only
    on the multiset of inputs.
    """
    groups: dict[str, list[str]] = {}
    for s in sorted(steps):
        key = canonical_step(s)
        key = f"eq:{key}" if key is not None else f"raw:{s}"
        groups.setdefault(key, []).append(s)
    return [groups[k] for k in sorted(groups) if k.startswith("eq:")] + \
        [groups[k] for k in sorted(groups) if k.startswith("raw:")]


# ---------------------------------------------------------------------------
# CoT baseline generation
# ---------------------------------------------------------------------------
def cot_prompt(sample: ReasoningSample, vocab: Vocab) -> list[int]:
    return vocab.tokenize(sample.question)


def cot_generate(bb: Backbone, prompts: Sequence[Sequence[int]], vocab: Vocab,
                 temperature: float | None = None, max_tokens: int = 64,
                 rng: np.random.Generator | None = None) -> list[list[int]]:
    """Batched left-padded generation until ``<eos>`` (kept) or the budget runs out."""
    eos, pad = vocab.special.eos, vocab.special.pad
    seqs = [list(p) for p in prompts]
    out: list[list[int]] = [[] for _ in prompts]
    active = list(range(len(prompts)))
    with ad.no_grad():
        for _ in range(max_tokens):
            if not active:
                break
            full = [seqs[b] + out[b] for b in active]
            if max(len(f) for f in full) >= bb.cfg.max_seq_len:
                break
            ids, mask = pad_left(full, pad)
            h = bb.run(bb.embed_batch([ids], mask), mask)
            logits = bb.logits(h[:, -1, :]).data
            nxt = sample_from_logits(logits, temperature, rng)
            still = []
            for b, t in zip(active, nxt):
                out[b].append(int(t))
                if int(t) != eos:
                    still.append(b)
            active = still
    return out


def parse_cot(tokens: Sequence[int], vocab: Vocab) -> tuple[list[str], str | None]:
    """Split generated CoT tokens into step texts and the answer segment text."""
    s = vocab.special
    steps: list[str] = []
    cur: list[int] | None = None
    for i, t in enumerate(tokens):
        if t == s.ans:
            if cur is not None:
                steps.append(vocab.detokenize(cur))
            return steps, vocab.detokenize(tokens[i:])
        if t == s.step:
            if cur is not None:
                steps.append(vocab.detokenize(cur))
            cur = []
        elif cur is not None and t != s.eos:
            cur.append(t)
    if cur:
        steps.append(vocab.detokenize(cur))
    return steps, None


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class QuestionResult:
    index: int
    gold: int
    greedy: int | None
    correct: bool
    n_samples: int = 0
    n_correct: int = 0
    planner_passes: int = 0  # encoder + planner
    probe_passes: int = 0
    answer_passes: int = 0
    steps: int = 0


@dataclass
class EvalReport:
    dataset: str
    method: str
    greedy_accuracy: float
    pass_at_k: dict[int, float] = field(default_factory=dict)
    mean_planner_passes: float = float("nan")
    mean_decoder_passes: float = float("nan")
    mean_probe_passes: float = float("nan")
    questions: list[QuestionResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass_at_k"] = {str(k): v for k, v in self.pass_at_k.items()}
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _question_rng(seed: int, i: int) -> np.random.Generator:
    # per-question streams keep results independent of evaluation order
    return np.random.default_rng([seed, 7919, i])


def plat_sample_answers(bundle: ModelBundle, question: Sequence[int], n: int, temperature: float,
                        rng: np.random.Generator, max_answer_tokens: int = 8,
                        max_steps: int | None = None) -> list[list[int]]:
    """``n`` lazy-decoding samples with the probe and the answer sampled at ``temperature``.

    Equivalent in distribution to ``n`` independent sampled :func:`lazy_infer`
    calls, but the trajectory and each state's probe logits are computed once.
    """
    s = bundle.special
    t_max = max_steps or bundle.planner_cfg.max_plan_steps
    _, agg = roll_trajectory(bundle, question, t_max)
    answers: list[list[int]] = [[] for _ in range(n)]
    pending = list(range(n))
    for a in agg:
        if not pending:
            break
        with ad.no_grad():
            logits = _next_token_logits(bundle, a.slots[None], [[]])
        probes = sample_from_logits(np.repeat(logits, len(pending), axis=0), temperature, rng)
        hit = [i for i, p in zip(pending, probes) if p == s.ans]
        pending = [i for i, p in zip(pending, probes) if p != s.ans]
        if hit:
            outs = generate(bundle, np.repeat(a.slots[None], len(hit), axis=0), temperature,
                            max_answer_tokens, default_stops(bundle), rng, prefix=[s.ans])
            for i, o in zip(hit, outs):
                answers[i] = o
    return answers


def evaluate_plat(bundle: ModelBundle, dataset: Sequence[ReasoningSample], vocab: Vocab,
                  ks: Sequence[int] = DEFAULT_KS, n_samples: int = 32, temperature: float = 0.9,
                  seed: int = 0, name: str = "test", method: str = "plat") -> EvalReport:
    """Greedy lazy decoding, pass@k over sampled answers, and forward-pass means."""
    if ks and n_samples < max(ks):
        raise ConfigError(f"n_samples={n_samples} < max k={max(ks)}")
    results = []
    for i, sample in enumerate(dataset):
        q = question_ids(sample, vocab)
        tr = lazy_infer(bundle, q)
        greedy = parse_answer(vocab.detokenize(tr.answer)) if tr.answer else None
        r = QuestionResult(i, sample.answer, greedy, greedy == sample.answer,
                           planner_passes=tr.encoder_passes + tr.planner_passes,
                           probe_passes=tr.probe_passes, answer_passes=tr.answer_passes,
                           steps=tr.n_steps)
        if ks:
            outs = plat_sample_answers(bundle, q, n_samples, temperature, _question_rng(seed, i))
            r.n_samples = n_samples
            r.n_correct = sum(parse_answer(vocab.detokenize(o)) == sample.answer for o in outs if o)
        results.append(r)
    return _report(name, method, results, ks)


def evaluate_cot(bb: Backbone, dataset: Sequence[ReasoningSample], vocab: Vocab,
                 ks: Sequence[int] = (), n_samples: int = 32, temperature: float = 0.9,
                 seed: int = 0, name: str = "test", batch_size: int = 64,
                 max_tokens: int = 64) -> EvalReport:
    if ks and n_samples < max(ks):
        raise ConfigError(f"n_samples={n_samples} < max k={max(ks)}")
    prompts = [cot_prompt(s, vocab) for s in dataset]
    outs: list[list[int]] = []
    for i in range(0, len(prompts), batch_size):
        outs += cot_generate(bb, prompts[i:i + batch_size], vocab, max_tokens=max_tokens)
    results = []
    for i, (sample, o) in enumerate(zip(dataset, outs)):
        steps, ans = parse_cot(o, vocab)
        greedy = parse_answer(ans)
        r = QuestionResult(i, sample.answer, greedy, greedy == sample.answer, steps=len(steps))
        if ks:
            rng = _question_rng(seed, i)
            samples = cot_generate(bb, [prompts[i]] * n_samples, vocab, temperature, max_tokens, rng)
            r.n_samples = n_samples
            r.n_correct = sum(parse_answer(parse_cot(s, vocab)[1]) == sample.answer for s in samples)
        results.append(r)
    return _report(name, "cot", results, ks)


def _report(name: str, method: str, results: list[QuestionResult], ks: Sequence[int]) -> EvalReport:
    acc = float(np.mean([r.correct for r in results])) if results else 0.0
    table = {}
    for k in ks:
        table[k] = float(np.mean([pass_at_k(r.n_samples, r.n_correct, k) for r in results]))
    rep = EvalReport(name, method, acc, table, questions=results)
    if method != "cot" and results:
        rep.mean_planner_passes = float(np.mean([r.planner_passes for r in results]))
        rep.mean_probe_passes = float(np.mean([r.probe_passes for r in results]))
        rep.mean_decoder_passes = float(np.mean([r.probe_passes + r.answer_passes for r in results]))
    return rep


def greedy_accuracy(model, dataset: Sequence[ReasoningSample], vocab: Vocab) -> float:
    if isinstance(model, ModelBundle):
        return evaluate_plat(model, dataset, vocab, ks=()).greedy_accuracy
    return evaluate_cot(model, dataset, vocab).greedy_accuracy


def efficiency_counts(bundle: ModelBundle, dataset: Sequence[ReasoningSample], vocab: Vocab) -> tuple[float, float]:
    rep = evaluate_plat(bundle, dataset, vocab, ks=())
    return rep.mean_planner_passes, rep.mean_decoder_passes


# ---------------------------------------------------------------------------
# entropy profiles
# ---------------------------------------------------------------------------
@dataclass
class EntropyProfile:
    method: str
    h_mean: list[float]
    counts: list[int]
    values: list[float] = field(default_factory=list)  # every measured H, for bound checks


def _profile(method: str, per_question: list[list[float]], bins: int) -> EntropyProfile:
    sums = np.zeros(bins)
    counts = np.zeros(bins, dtype=int)
    flat = []
    for hs in per_question:
        for j, h in enumerate(hs, start=1):
            b = progress_bin(j, len(hs), bins)
            sums[b] += h
            counts[b] += 1
            flat.append(float(h))
    means = [float(s / c) if c else float("nan") for s, c in zip(sums, counts)]
    return EntropyProfile(method, means, counts.tolist(), flat)


def entropy_profile(bundle: ModelBundle, dataset: Sequence[ReasoningSample], vocab: Vocab,
                    bins: int = 10) -> EntropyProfile:
    """First-token entropy at every state of each greedy lazy trace, binned by k/T."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    per_q = []
    for sample in dataset:
        tr = lazy_infer(bundle, question_ids(sample, vocab))
        states = np.stack([a.slots for a in tr.aggregated])
        with ad.no_grad():
            logits = _next_token_logits(bundle, states, [[]] * len(states))
        per_q.append(entropy(_softmax(logits)).tolist())
    return _profile("plat", per_q, bins)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def cot_entropy_profile(bb: Backbone, dataset: Sequence[ReasoningSample], vocab: Vocab,
                        bins: int = 10) -> EntropyProfile:
    """CoT analogue: the distribution right after each ``<step>`` and the one that emits ``<ans>``."""
    s = vocab.special
    per_q = []
    prompts = [cot_prompt(x, vocab) for x in dataset]
    outs = cot_generate(bb, prompts, vocab)
    for p, o in zip(prompts, outs):
        seq = p + o
        positions = [len(p) + j for j, t in enumerate(o) if t == s.step]
        ans = [len(p) + j - 1 for j, t in enumerate(o) if t == s.ans]
        positions += ans[:1]
        if not positions:
            per_q.append([])
            continue
        ids = np.array([seq], dtype=np.int64)
        with ad.no_grad():
            h = bb.run(bb.embed_batch([ids], np.ones(ids.shape, dtype=bool)), np.ones(ids.shape, dtype=bool))
            logits = bb.logits(h).data[0]
        per_q.append(entropy(_softmax(logits[positions])).tolist())
    return _profile("cot", per_q, bins)


# ---------------------------------------------------------------------------
# branching
# ---------------------------------------------------------------------------
@dataclass
class BranchRecord:
    index: int
    bins: list[tuple[int, int] | None]  # (branch count, valid count) per progress bin
    paths: list[list[str]]
    branch_total: int = 0
    valid_total: int = 0


def branch_record(index: int, question: str, paths: Sequence[Sequence[str]], bins: int = 10) -> BranchRecord:
    """Cluster the steps that fall in each progress bin across all sampled paths."""
    per_bin: list[list[tuple[str, bool]]] = [[] for _ in range(bins)]
    everything: list[tuple[str, bool]] = []
    for path in paths:
        ok = validate_path(path, question)
        for j, (st, v) in enumerate(zip(path, ok), start=1):
            per_bin[progress_bin(j, len(path), bins)].append((st, v))
            everything.append((st, v))

    def counts(items):
        verdict: dict[str, bool] = {}
        for st, v in items:
            verdict[st] = verdict.get(st, False) or v
        clusters = cluster_steps([st for st, _ in items])
        # a cluster's representative is its first member in sorted order
        return len(clusters), sum(verdict[c[0]] for c in clusters)

    rec = BranchRecord(index, [counts(x) if x else None for x in per_bin], [list(p) for p in paths])
    rec.branch_total, rec.valid_total = counts(everything) if everything else (0, 0)
    return rec


def plat_branch_paths(bundle: ModelBundle, sample: ReasoningSample, vocab: Vocab, n: int,
                      temperature: float | None, rng: np.random.Generator | None,
                      max_step_tokens: int = 16) -> list[list[str]]:
    """Sample ``n`` texts from every pre-answer state of the greedy lazy trace."""
    tr = lazy_infer(bundle, question_ids(sample, vocab))
    states = tr.aggregated[:-1] if tr.termination == "answer" else tr.aggregated
    paths: list[list[str]] = [[] for _ in range(n)]
    for a in states:
        outs = generate(bundle, np.repeat(a.slots[None], n, axis=0), temperature, max_step_tokens,
                        default_stops(bundle), rng)
        for i, o in enumerate(outs):
            paths[i].append(vocab.detokenize(o))
    return paths


def cot_branch_paths(bb: Backbone, sample: ReasoningSample, vocab: Vocab, n: int,
                     temperature: float | None, rng: np.random.Generator | None) -> list[list[str]]:
    outs = cot_generate(bb, [cot_prompt(sample, vocab)] * n, vocab, temperature, rng=rng)
    return [parse_cot(o, vocab)[0] for o in outs]


@dataclass
class BranchReport:
    method: str
    records: list[BranchRecord]
    branch_mean: list[float]
    valid_mean: list[float]


def branch_analysis(model, dataset: Sequence[ReasoningSample], vocab: Vocab, n_samples: int = 10,
                    temperature: float | None = 0.9, bins: int = 10, seed: int = 0) -> BranchReport:
    """``temperature=None`` gives greedy decoding, i.e. the tau -> 0 limit."""
    records = []
    for i, sample in enumerate(dataset):
        rng = _question_rng(seed, i)
        if isinstance(model, ModelBundle):
            paths = plat_branch_paths(model, sample, vocab, n_samples, temperature, rng)
        else:
            paths = cot_branch_paths(model, sample, vocab, n_samples, temperature, rng)
        records.append(branch_record(i, sample.question, paths, bins))
    b_mean, v_mean = [], []
    for b in range(bins):
        cells = [r.bins[b] for r in records if r.bins[b] is not None]
        b_mean.append(float(np.mean([c[0] for c in cells])) if cells else float("nan"))
        v_mean.append(float(np.mean([c[1] for c in cells])) if cells else float("nan"))
    method = "plat" if isinstance(model, ModelBundle) else "cot"
    return BranchReport(method, records, b_mean, v_mean)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------
def write_branching_csv(reports: Sequence[BranchReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin", "branch_mean", "valid_mean", "method"])
        for rep in reports:
            for b, (bm, vm) in enumerate(zip(rep.branch_mean, rep.valid_mean)):
                w.writerow([b, bm, vm, rep.method])


def write_scatter_csv(reports: Sequence[BranchReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["question_id", "branch_count", "valid_count", "method"])
        for rep in reports:
            for r in rep.records:
                w.writerow([r.index, r.branch_total, r.valid_total, rep.method])


def write_entropy_csv(profiles: Sequence[EntropyProfile], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin", "H_mean", "count", "method"])
        for p in profiles:
            for b, (h, c) in enumerate(zip(p.h_mean, p.counts)):
                w.writerow([b, h, c, p.method])
