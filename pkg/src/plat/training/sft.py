"""Supervised phases: the CoT baseline and the latent reconstruction objective."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.backbone import Backbone, pad_right
from plat.data import ReasoningSample, Vocab, question_ids, render_cot, render_plat
from plat.errors import ConfigError, NumericError
from plat.model import ModelBundle
from plat.planner import noisy, roll_batch
from plat.training.optim import Adam
from plat.verbalizer import decoder_logits

log = logging.getLogger(__name__)


@dataclass
class SftConfig:
    """Supervised fine-tuning settings.

    Reference schedule at GPT-2 scale: 25 epochs at lr 5e-4 for the latent
    phase and lr 1e-4 for CoT-SFT. Desk-scale defaults differ.
    """

    phase: str = "cot"
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 32
    noise_std: float | None = None  # None -> take the planner config's value
    seed: int = 0
    warmup_steps: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    max_steps: int | None = None
    pos_jitter: int = 0  # random per-sequence position offset in [0, pos_jitter] during training

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pos_jitter < 0:
            raise ConfigError("pos_jitter must be >= 0")
        if self.phase not in ("cot", "plat"):
            raise ConfigError(f"phase must be 'cot' or 'plat', got {self.phase!r}")


class TrainingDiverged(NumericError):
    def __init__(self, step: int, loss: float, history: list[float]):
        self.step, self.loss, self.history = step, loss, history
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class LogRow:
    phase: str
    step: int
    loss: float
    reward_mean: float = float("nan")
    kl: float = float("nan")
    grad_norm: float = float("nan")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    rows: list[LogRow] = field(default_factory=list)
    steps: int = 0


LOG_FIELDS = ["phase", "step", "loss", "reward_mean", "kl", "grad_norm"]


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of global step ``step``: a pure function, so resumed runs see the same batches."""
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, 101, epoch]).permutation(n)
    return order[pos * batch_size:(pos + 1) * batch_size]


# ---------------------------------------------------------------------------
# CoT baseline
# ---------------------------------------------------------------------------
def jitter_offsets(cfg: SftConfig, n: int, step: int) -> np.ndarray | None:
    if cfg.pos_jitter == 0:
        return None
    return np.random.default_rng([cfg.seed, 505, step]).integers(0, cfg.pos_jitter + 1, size=n)


def cot_loss(bb: Backbone, batch: Sequence[tuple[list[int], int]], pad_id: int,
             offsets: np.ndarray | None = None) -> tuple[Tensor, float]:
    """Token-mean NLL over everything after the question; also returns the token count."""
    ids, mask = pad_right([s for s, _ in batch], pad_id)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    weights = mask[:, 1:].astype(np.float64)
    for i, (_, q_len) in enumerate(batch):
        weights[i, :q_len - 1] = 0.0
    key_mask = mask[:, :-1]
    h = bb.run(bb.embed_batch([inputs], key_mask, offsets), key_mask)
    nll = ad.cross_entropy(bb.logits(h), targets)
    n_tok = float(weights.sum())
    return ad.scale(ad.sum_(ad.mul(nll, weights)), 1.0 / n_tok), n_tok


def _finite_or_raise(loss: float, step: int, history: list[float]) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(step, loss, history)


def total_steps(cfg: SftConfig, n_items: int) -> int:
    total = cfg.epochs * math.ceil(n_items / cfg.batch_size)
    return total if cfg.max_steps is None else min(total, cfg.max_steps)


def _run_loop(params, cfg: SftConfig, n_items: int, loss_fn, phase: str,
              optimizer: Adam | None, callback: Callable[[int, float], None] | None,
              stop_at: int | None = None) -> tuple[TrainResult, Adam]:
    """Optimize until the schedule ends (or ``stop_at``); an optimizer with ``t > 0`` resumes."""
    opt = optimizer or Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    total = total_steps(cfg, n_items)
    end = total if stop_at is None else min(total, stop_at)
    res = TrainResult()
    step = opt.t
    while step < end:
        idx = batch_indices(n_items, cfg.batch_size, cfg.seed, step)
        try:
            loss = loss_fn(idx, step)
        except NumericError as exc:
            raise TrainingDiverged(step, float("nan"), res.losses) from exc
        value = loss.item()
        _finite_or_raise(value, step, res.losses)
        opt.zero_grad()
        loss.backward()
        gn = opt.step(lr_at(step, total, cfg.lr, cfg.warmup_steps))
        res.losses.append(value)
        res.rows.append(LogRow(phase, step, value, grad_norm=gn))
        if callback is not None:
            callback(step, value)
        step += 1
    res.steps = step
    return res, opt


def train_cot_sft(bb: Backbone, corpus: Sequence[ReasoningSample], vocab: Vocab, cfg: SftConfig,
                  optimizer: Adam | None = None, callback=None,
                  stop_at: int | None = None) -> tuple[TrainResult, Adam]:
    """Next-token cross-entropy on CoT renderings with question tokens masked out."""
    data = [render_cot(s, vocab, bb.cfg.max_seq_len) for s in corpus]
    params = {k: bb.params[k] for k in bb.base_parameter_names()}

    def loss_fn(idx, step):
        return cot_loss(bb, [data[i] for i in idx], vocab.special.pad, jitter_offsets(cfg, len(idx), step))[0]

    return _run_loop(params, cfg, len(data), loss_fn, "cot", optimizer, callback, stop_at)


# ---------------------------------------------------------------------------
# latent reconstruction
# ---------------------------------------------------------------------------
@dataclass
class PlatBatchLoss:
    mean: Tensor  # token-mean NLL, what the optimizer sees
    total: float  # summed NLL over every segment token
    n_tokens: int


def plat_loss(bundle: ModelBundle, questions: Sequence[list[int]], segments: Sequence[list[list[int]]],
              noise_std: float, rng: np.random.Generator) -> PlatBatchLoss:
    """Teacher-forced reconstruction loss over all steps of a batch.

    Each question is rolled for as many steps as it has target segments; the
    batch is rolled to the longest and shorter rows ignore the extra steps.
    """
    T = [len(s) for s in segments]
    roll = roll_batch(bundle, questions, max(T))
    rows, segs = [], []
    states = []
    for k in range(max(T)):
        valid = [b for b in range(len(questions)) if T[b] > k]
        agg = roll.aggregated[k]
        if len(valid) < len(questions):
            agg = agg[np.array(valid)]
        states.append(noisy(agg, noise_std, rng))
        rows += valid
        segs += [segments[b][k] for b in valid]
    stacked = states[0] if len(states) == 1 else ad.concat(states, axis=0)
    logits, targets, mask = decoder_logits(bundle, stacked, segs)
    nll = ad.cross_entropy(logits, targets)
    w = mask.astype(np.float64)
    total = ad.sum_(ad.mul(nll, w))
    n_tok = int(w.sum())
    return PlatBatchLoss(ad.scale(total, 1.0 / n_tok), total.item(), n_tok)


def plat_examples(corpus: Sequence[ReasoningSample], vocab: Vocab) -> list[tuple[list[int], list[list[int]]]]:
    return [(question_ids(s, vocab), render_plat(s, vocab)) for s in corpus]


def train_plat_sft(bundle: ModelBundle, corpus: Sequence[ReasoningSample], vocab: Vocab, cfg: SftConfig,
                   optimizer: Adam | None = None, callback=None,
                   stop_at: int | None = None) -> tuple[TrainResult, Adam]:
    """End-to-end reconstruction training of planner, projectors and decoder."""
    data = plat_examples(corpus, vocab)
    too_long = [len(s) for _, s in data if len(s) > bundle.planner_cfg.max_plan_steps]
    if too_long:
        raise ConfigError(f"samples need {max(too_long)} steps > max_plan_steps")
    sigma = bundle.planner_cfg.noise_std if cfg.noise_std is None else cfg.noise_std

    def loss_fn(idx, step):
        batch = [data[i] for i in idx]
        noise_rng = np.random.default_rng([cfg.seed, 303, step])
        return plat_loss(bundle, [q for q, _ in batch], [s for _, s in batch], sigma, noise_rng).mean

    return _run_loop(bundle.parameters(), cfg, len(data), loss_fn, "plat", optimizer, callback, stop_at)
