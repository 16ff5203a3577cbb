"""Latent planner: initial encoding, autoregressive latent steps, aggregation, noise.

The batched functions (``encode_batch``, ``plan_next_batch``, ``roll_batch``)
carry autodiff tensors and are what training uses. The per-question functions
wrap them with ``B = 1`` and return plain arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.backbone import pad_left
from plat.errors import CapacityError, ConfigError, ContractError
from plat.model import ModelBundle


@dataclass
class LatentState:
    values: np.ndarray
    step_index: int  # k, 1-based
    slot_index: int  # i, 1-based


@dataclass
class LatentTrajectory:
    steps: list[list[LatentState]] = field(default_factory=list)
    terminated: bool = True

    def flat(self) -> list[LatentState]:
        return [s for step in self.steps for s in step]


@dataclass
class AggregatedState:
    slots: np.ndarray  # [n_latent, d_latent]
    step_index: int


@dataclass
class BatchRollout:
    """Raw latent states in trajectory order and per-step decoder inputs.

    ``raw[j]`` is ``[B, d_latent]`` for flat index ``j = (k-1) * n_latent + (i-1)``;
    ``aggregated[k-1]`` is ``[B, n_latent, d_latent]``.
    """

    raw: list[Tensor]
    aggregated: list[Tensor]


def _check_question(bundle: ModelBundle, q: Sequence[int]) -> None:
    if not q or q[-1] != bundle.special.enc:
        raise ContractError("question tokens must end with the <enc> token")


def _context(bundle: ModelBundle, questions: Sequence[Sequence[int]]) -> list[list[int]]:
    """Token context placed before ``<plan>``; the stub drops the question entirely."""
    if bundle.planner_cfg.use_context:
        return [list(q) for q in questions]
    return [[bundle.special.enc] for _ in questions]


def encode_batch(bundle: ModelBundle, questions: Sequence[Sequence[int]]) -> Tensor:
    """``[B, d_latent]`` initial states from the hidden state at each question's ``<enc>``."""
    for q in questions:
        _check_question(bundle, q)
    bb = bundle.planner_backbone
    ids, mask = pad_left(questions, bundle.special.pad)
    h = bb.run(bb.embed_batch([ids], mask), mask, use_planner_layers=True)
    bundle.counter.encoder += len(questions)
    return bundle.projectors["enc"](h[:, -1, :])


def plan_next_batch(bundle: ModelBundle, questions: Sequence[Sequence[int]],
                    history: Sequence[Tensor]) -> Tensor:
    """Next raw state from ``[context, <plan>, L2H(history...)]``, read at the last position."""
    bb = bundle.planner_backbone
    ctx = _context(bundle, questions)
    ids, mask = pad_left(ctx, bundle.special.pad)
    B = len(questions)
    length = ids.shape[1] + 1 + len(history)
    if length > bb.cfg.max_seq_len:
        raise CapacityError(f"planner input of {length} items exceeds max_seq_len={bb.cfg.max_seq_len}")
    plan = np.full((B, 1), bundle.special.plan, dtype=np.int64)
    blocks: list = [ids, plan]
    if history:
        hist = ad.stack(list(history), axis=1)  # [B, n, d_latent]
        blocks.append(bundle.projectors["l2h"](hist))
    key_mask = np.concatenate([mask, np.ones((B, 1 + len(history)), dtype=bool)], axis=1)
    h = bb.run(bb.embed_batch(blocks, key_mask), key_mask, use_planner_layers=True)
    bundle.counter.planner += B
    return bundle.projectors["h2l"](h[:, -1, :])


def raw_states_cached(bundle: ModelBundle, questions: Sequence[Sequence[int]], n_states: int) -> list[Tensor]:
    """``n_states`` raw states with the question's keys/values computed once.

    Equal to the encoder pass followed by :func:`plan_next_batch` calls, since
    every planner input starts with the encoder's input under a causal mask.
    Pass counters advance exactly as in the uncached path.
    """
    for q in questions:
        _check_question(bundle, q)
    bb = bundle.planner_backbone
    B = len(questions)
    ids, mask = pad_left(questions, bundle.special.pad)
    if ids.shape[1] + n_states > bb.cfg.max_seq_len:
        raise CapacityError(f"planner input of {ids.shape[1] + n_states} items exceeds "
                            f"max_seq_len={bb.cfg.max_seq_len}")
    h, cache = bb.run_cached(bb.embed_batch([ids], mask), mask, None, use_planner_layers=True)
    bundle.counter.encoder += B
    raw = [bundle.projectors["enc"](h[:, -1, :])]
    while len(raw) < n_states:
        hist = bundle.projectors["l2h"](ad.reshape(raw[-1], (B, 1, raw[-1].shape[-1])))
        blocks: list = [hist]
        if len(raw) == 1:
            blocks.insert(0, np.full((B, 1), bundle.special.plan, dtype=np.int64))
        new_mask = np.ones((B, len(blocks)), dtype=bool)
        x = bb.embed_batch(blocks, new_mask, offset=cache.n_real)
        h, cache = bb.run_cached(x, new_mask, cache, use_planner_layers=True)
        bundle.counter.planner += B
        raw.append(bundle.projectors["h2l"](h[:, -1, :]))
    return raw


def aggregate(bundle: ModelBundle, raw: Tensor, prev: Tensor | None) -> Tensor:
    """Decoder-side aggregation of one slot (EMA, raw pass-through, or residual sum)."""
    cfg = bundle.planner_cfg
    if prev is None or cfg.aggregation == "none":
        return raw
    if cfg.aggregation == "residual":
        return ad.add(raw, prev)
    return ema_tensor(raw, prev, cfg.alpha_ema)


def ema_tensor(raw: Tensor, prev: Tensor, alpha: float) -> Tensor:
    if alpha == 1.0:
        return raw
    return ad.add(ad.scale(raw, alpha), ad.scale(prev, 1.0 - alpha))


def roll_batch(bundle: ModelBundle, questions: Sequence[Sequence[int]], n_steps: int) -> BatchRollout:
    """Roll ``n_steps`` reasoning steps: one encoder pass then ``N_L * T - 1`` planner passes."""
    cfg = bundle.planner_cfg
    if n_steps < 1 or n_steps > cfg.max_plan_steps:
        raise ConfigError(f"n_steps={n_steps} outside [1, {cfg.max_plan_steps}]")
    if cfg.use_context:
        raw = raw_states_cached(bundle, questions, cfg.n_latent * n_steps)
    else:
        raw = [encode_batch(bundle, questions)]
        while len(raw) < cfg.n_latent * n_steps:
            raw.append(plan_next_batch(bundle, questions, raw))
    aggregated: list[Tensor] = []
    prev: list[Tensor | None] = [None] * cfg.n_latent
    for k in range(n_steps):
        slots = []
        for i in range(cfg.n_latent):
            a = aggregate(bundle, raw[k * cfg.n_latent + i], prev[i])
            prev[i] = a
            slots.append(a)
        aggregated.append(ad.stack(slots, axis=1))
    return BatchRollout(raw, aggregated)


def noisy(state: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """Add i.i.d. N(0, sigma^2) to a decoder-bound aggregated tensor."""
    if sigma == 0:
        return state
    return ad.add(state, Tensor(rng.normal(0.0, sigma, size=state.shape)))


# ---------------------------------------------------------------------------
# single-question API
# ---------------------------------------------------------------------------
def encode_initial(bundle: ModelBundle, question_tokens: Sequence[int]) -> LatentState:
    _check_question(bundle, question_tokens)
    with ad.no_grad():
        s = encode_batch(bundle, [list(question_tokens)])
    return LatentState(s.data[0].copy(), 1, 1)


def plan_next(bundle: ModelBundle, question_tokens: Sequence[int],
              history: Sequence[LatentState]) -> LatentState:
    n = bundle.planner_cfg.n_latent
    j = len(history)
    with ad.no_grad():
        hist = [Tensor(h.values[None, :]) for h in history]
        s = plan_next_batch(bundle, [list(question_tokens)], hist)
    return LatentState(s.data[0].copy(), j // n + 1, j % n + 1)


def aggregate_ema(raw: LatentState | np.ndarray, prev: np.ndarray | None, alpha: float) -> np.ndarray:
    """``alpha * raw + (1 - alpha) * prev``; the first step (``prev is None``) returns ``raw``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha_ema must lie in [0, 1], got {alpha}")
    values = raw.values if isinstance(raw, LatentState) else np.asarray(raw, dtype=np.float64)
    if prev is None:
        return values.copy()
    return alpha * values + (1.0 - alpha) * np.asarray(prev, dtype=np.float64)


def inject_noise(state: AggregatedState, sigma: float, rng: np.random.Generator) -> AggregatedState:
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return AggregatedState(state.slots.copy(), state.step_index)
    return AggregatedState(state.slots + rng.normal(0.0, sigma, size=state.slots.shape), state.step_index)


def aggregate_states(bundle: ModelBundle, traj: LatentTrajectory) -> list[AggregatedState]:
    out: list[AggregatedState] = []
    prev: list[Tensor | None] = [None] * bundle.planner_cfg.n_latent
    with ad.no_grad():
        for k, step in enumerate(traj.steps, start=1):
            slots = []
            for i, s in enumerate(step):
                a = aggregate(bundle, Tensor(s.values), prev[i])
                prev[i] = a
                slots.append(a.data)
            out.append(AggregatedState(np.stack(slots), k))
    return out


class TrajectoryRoller:
    """Incremental single-question planner, one reasoning step per :meth:`step` call."""

    def __init__(self, bundle: ModelBundle, question_tokens: Sequence[int]):
        _check_question(bundle, question_tokens)
        self.bundle = bundle
        self.question = list(question_tokens)
        self.trajectory = LatentTrajectory(terminated=True)
        self.aggregated: list[AggregatedState] = []
        self._prev: list[Tensor | None] = [None] * bundle.planner_cfg.n_latent

    def step(self) -> AggregatedState | None:
        """Produce S_k for the next k; ``None`` (and ``terminated=False``) when capacity runs out."""
        b = self.bundle
        n = b.planner_cfg.n_latent
        k = len(self.trajectory.steps) + 1
        flat = self.trajectory.flat()
        new: list[LatentState] = []
        try:
            for i in range(1, n + 1):
                if k == 1 and i == 1:
                    new.append(encode_initial(b, self.question))
                else:
                    new.append(plan_next(b, self.question, flat + new))
        except CapacityError:
            self.trajectory.terminated = False
            return None
        self.trajectory.steps.append(new)
        slots = []
        with ad.no_grad():
            for i, s in enumerate(new):
                a = aggregate(b, Tensor(s.values), self._prev[i])
                self._prev[i] = a
                slots.append(a.data)
        agg = AggregatedState(np.stack(slots), k)
        self.aggregated.append(agg)
        return agg


def roll_trajectory(bundle: ModelBundle, question_tokens: Sequence[int],
                    n_steps: int) -> tuple[LatentTrajectory, list[AggregatedState]]:
    """Deterministic T-step trajectory and its aggregated decoder inputs.

    On capacity overflow the trajectory is truncated and ``terminated`` is False.
    """
    if n_steps < 1 or n_steps > bundle.planner_cfg.max_plan_steps:
        raise ConfigError(f"n_steps={n_steps} outside [1, {bundle.planner_cfg.max_plan_steps}]")
    roller = TrajectoryRoller(bundle, question_tokens)
    for _ in range(n_steps):
        if roller.step() is None:
            break
    return roller.trajectory, roller.aggregated


def dump_trajectory(traj: LatentTrajectory, fh: IO[str]) -> None:
    """One JSON line per latent state: step index, slot index, values."""
    for s in traj.flat():
        fh.write(json.dumps({"step": s.step_index, "slot": s.slot_index,
                             "values": [float(v) for v in s.values]}) + "\n")
