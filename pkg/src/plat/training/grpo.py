"""Decoupled GRPO: the planner is frozen, only the decoder explores.

For each question the latent trajectory is rolled once without gradients.
G verbalizations are sampled from those shared states, scored with the rule
reward, and normalized within the group. The decoder then maximizes the
clipped ratio objective minus a per-token KL penalty to a frozen reference.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.data import ReasoningSample, Vocab, question_ids
from plat.errors import ConfigError, ContractError, FrozenParameterError
from plat.model import ModelBundle
from plat.training.optim import Adam
from plat.training.rewards import RewardBreakdown, compute_reward
from plat.training.sft import LogRow
from plat.verbalizer import decoder_logits, default_stops, generate, lazy_infer

log = logging.getLogger(__name__)


@dataclass
class RlConfig:
    group_size: int = 8
    lr: float = 5e-5
    beta: float = 0.01
    clip_eps: float = 0.0
    temperature: float = 0.9
    batch_size: int = 4
    seed: int = 0
    steps: int = 50
    max_step_tokens: int = 16
    pool_size: int = 0  # 0: train on the SFT train split; N: a fresh in-domain pool of N questions

    def __post_init__(self):
        if self.pool_size < 0:
            raise ConfigError("pool_size must be >= 0")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.clip_eps < 0:
            raise ConfigError("clip_eps must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------
@dataclass
class ParamPartition:
    frozen: list[str]
    trainable: list[str]

    def __post_init__(self):
        overlap = set(self.frozen) & set(self.trainable)
        if overlap:
            raise ContractError(f"parameters both frozen and trainable: {sorted(overlap)[:5]}")

    @classmethod
    def for_bundle(cls, bundle: ModelBundle) -> "ParamPartition":
        if bundle.shared:
            raise ContractError("split_decoder() must run before partitioning")
        return cls(bundle.planner_parameter_names(), bundle.decoder_parameter_names())

    def to_dict(self) -> dict:
        return {"frozen": list(self.frozen), "trainable": list(self.trainable)}


def prepare_rl(bundle: ModelBundle) -> ParamPartition:
    """Duplicate the shared stack so the decoder copy can move while the planner stays put."""
    bundle.split_decoder()
    return ParamPartition.for_bundle(bundle)


def snapshot(bundle: ModelBundle, names: Sequence[str]) -> dict[str, bytes]:
    params = bundle.parameters()
    return {k: params[k].data.tobytes() for k in names}


def verify_frozen(partition: ParamPartition, before: dict[str, bytes], after: dict[str, bytes],
                  strict: bool = False) -> bool:
    """Bitwise comparison of the frozen set; ``strict`` raises on a breach."""
    changed = [k for k in partition.frozen if before.get(k) != after.get(k)]
    if changed and strict:
        raise FrozenParameterError(f"frozen parameters changed: {changed[:5]}")
    return not changed


# ---------------------------------------------------------------------------
# group statistics and objective
# ---------------------------------------------------------------------------
def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(R - mean) / std with the population std; all zeros when the group is flat."""
    r = np.asarray(rewards, dtype=np.float64)
    sd = r.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(r)
    return (r - r.mean()) / sd


def clipped_surrogate(logp: Tensor, logp_old: np.ndarray, adv: np.ndarray, eps: float) -> Tensor:
    """Per-token ``min(r A, clip(r, 1-eps, 1+eps) A)`` with ``r = exp(logp - logp_old)``.

    On ties the ``minimum`` passes the gradient to ``r A``, so at ``r = 1``
    the gradient is exactly ``A * d logp``, whatever ``eps`` is.
    """
    ratio = ad.exp(ad.add(logp, Tensor(-np.asarray(logp_old, dtype=np.float64))))
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), adv)
    return ad.minimum(unclipped, clipped)


def surrogate_closed_form(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def token_kl(logp_all: Tensor, ref_logp_all: np.ndarray) -> Tensor:
    """Exact per-position KL(pi || pi_ref) over the full vocabulary: ``[..., V] -> [...]``."""
    p = ad.exp(logp_all)
    diff = ad.add(logp_all, Tensor(-ref_logp_all))
    return ad.sum_(ad.mul(p, diff), axis=-1)


def grpo_objective(logp: Tensor, logp_old: np.ndarray, adv: np.ndarray, weights: np.ndarray,
                   eps: float, kl: Tensor | None = None, beta: float = 0.0) -> Tensor:
    """Weighted sum of per-token surrogate minus ``beta * KL``; to be maximized."""
    per_tok = clipped_surrogate(logp, logp_old, adv, eps)
    if kl is not None and beta > 0:
        per_tok = ad.add(per_tok, ad.scale(kl, -beta))
    return ad.sum_(ad.mul(per_tok, np.asarray(weights, dtype=np.float64)))


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------
@dataclass
class Rollout:
    segments: list[list[int]]  # sampled token ids per step, stop token included
    step_texts: list[str]
    answer_text: str | None
    reward: RewardBreakdown

    @property
    def total(self) -> float:
        return self.reward.total


@dataclass
class RolloutGroup:
    question: list[int]
    states: np.ndarray  # [T_max, n_latent, d_latent], shared by every rollout
    rollouts: list[Rollout]
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.total for r in self.rollouts])


def rollout_states(ref: ModelBundle, question: Sequence[int]) -> np.ndarray:
    """Aggregated states of the reference model's greedy lazy trace.

    The trace ends where the reference decoder probes ``<ans>``, so a rollout
    cannot earn extra step rewards by postponing its answer.
    """
    return np.stack([a.slots for a in lazy_infer(ref, question).aggregated])


def sample_group(bundle: ModelBundle, sample: ReasoningSample, vocab: Vocab, cfg: RlConfig,
                 rng: np.random.Generator, states: np.ndarray | None = None) -> RolloutGroup:
    """G rollouts from one fixed trajectory (``states``, default: this bundle's lazy trace).

    Every rollout walks the same states; a rollout ends at the first segment
    that opens with ``<ans>`` or when the states run out.
    """
    q = question_ids(sample, vocab)
    if states is None:
        states = rollout_states(bundle, q)
    G = cfg.group_size
    segs: list[list[list[int]]] = [[] for _ in range(G)]
    answers: list[str | None] = [None] * G
    active = list(range(G))
    stops = default_stops(bundle)
    for k in range(len(states)):
        if not active:
            break
        out = generate(bundle, np.repeat(states[k][None], len(active), axis=0), cfg.temperature,
                       cfg.max_step_tokens, stops, rng)
        still = []
        for i, toks in zip(active, out):
            segs[i].append(toks)
            if toks and toks[0] == bundle.special.ans:
                answers[i] = vocab.detokenize(toks)
            else:
                still.append(i)
        active = still
    rollouts = []
    for i in range(G):
        n_steps = len(segs[i]) - (answers[i] is not None)
        texts = [vocab.detokenize(s) for s in segs[i][:n_steps]]
        rollouts.append(Rollout(segs[i], texts, answers[i], compute_reward(texts, answers[i], sample.answer)))
    group = RolloutGroup(q, states, rollouts)
    group.advantages = group_advantages(group.rewards)
    return group


def _flatten_group(groups: Sequence[RolloutGroup]):
    states, segs, adv, weights = [], [], [], []
    for g in groups:
        G = len(g.rollouts)
        for i, r in enumerate(g.rollouts):
            n_tok = sum(len(s) for s in r.segments)
            for k, s in enumerate(r.segments):
                states.append(g.states[k])
                segs.append(s)
                adv.append(g.advantages[i])
                weights.append(1.0 / (G * n_tok * len(groups)))
    return np.stack(states), segs, np.array(adv), np.array(weights)


@dataclass
class StepStats:
    objective: float
    reward_mean: float
    kl: float
    grad_norm: float
    skipped_groups: int


def grpo_step(bundle: ModelBundle, ref: ModelBundle, groups: Sequence[RolloutGroup],
              optimizer: Adam, cfg: RlConfig) -> StepStats:
    """One update on the trainable (decoder) set from pre-sampled groups.

    The old policy is the sampling policy, so with one update per batch the
    ratio is exactly 1 and the gradient is the advantage-weighted score.
    """
    states, segs, adv, seg_w = _flatten_group(groups)
    tau = cfg.temperature
    with ad.no_grad():
        ref_logits, _, _ = decoder_logits(ref, Tensor(states), segs)
        ref_lp = ad.log_softmax(ad.scale(ref_logits, 1.0 / tau)).data
    logits, targets, mask = decoder_logits(bundle, Tensor(states), segs)
    lp_all = ad.log_softmax(ad.scale(logits, 1.0 / tau))
    logp = ad.neg(ad.cross_entropy(ad.scale(logits, 1.0 / tau), targets))
    w = mask * seg_w[:, None]
    adv_tok = np.broadcast_to(adv[:, None], mask.shape)
    kl = token_kl(lp_all, ref_lp)
    obj = grpo_objective(logp, logp.data.copy(), adv_tok, w, cfg.clip_eps, kl, cfg.beta)
    loss = ad.neg(obj)
    optimizer.zero_grad()
    loss.backward()
    gn = optimizer.step()
    kl_mean = float((kl.data * mask).sum() / mask.sum())
    rewards = np.concatenate([g.rewards for g in groups])
    skipped = sum(1 for g in groups if not np.any(g.advantages))
    return StepStats(obj.item(), float(rewards.mean()), kl_mean, gn, skipped)


@dataclass
class RlResult:
    rows: list[LogRow] = field(default_factory=list)
    reward_curve: list[float] = field(default_factory=list)
    partition: ParamPartition | None = None


def train_grpo(bundle: ModelBundle, corpus: Sequence[ReasoningSample], vocab: Vocab, cfg: RlConfig,
               rng: np.random.Generator | None = None, check_frozen: bool = True) -> tuple[RlResult, Adam]:
    """Run ``cfg.steps`` updates; the reference policy is the bundle as it enters."""
    partition = prepare_rl(bundle)
    ref = copy.deepcopy(bundle)
    params = bundle.parameters()
    opt = Adam({k: params[k] for k in partition.trainable}, lr=cfg.lr)
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 404])
    before = snapshot(bundle, partition.frozen) if check_frozen else None
    res = RlResult(partition=partition)
    trajectories: dict[int, np.ndarray] = {}  # the planner is frozen, so each is computed once
    for step in range(cfg.steps):
        idx = rng.choice(len(corpus), size=min(cfg.batch_size, len(corpus)), replace=False)
        for i in idx:
            if i not in trajectories:
                trajectories[i] = rollout_states(ref, question_ids(corpus[i], vocab))
        groups = [sample_group(bundle, corpus[i], vocab, cfg, rng, trajectories[i]) for i in idx]
        st = grpo_step(bundle, ref, groups, opt, cfg)
        res.rows.append(LogRow("rl", step, -st.objective, st.reward_mean, st.kl, st.grad_norm))
        res.reward_curve.append(st.reward_mean)
    if check_frozen:
        verify_frozen(partition, before, snapshot(bundle, partition.frozen), strict=True)
    return res, opt
