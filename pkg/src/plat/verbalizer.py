"""Decoder side: soft-prefix generation, first-token probing and lazy inference."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.backbone import pad_right
from plat.errors import ConfigError, ContractError
from plat.model import ModelBundle
from plat.planner import AggregatedState, LatentTrajectory, TrajectoryRoller


@dataclass
class DecodeRequest:
    state: AggregatedState
    temperature: float | None = None  # None -> greedy
    max_tokens: int = 16
    stop_tokens: tuple[int, ...] = ()

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ContractError("max_tokens must be >= 1")
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigError("temperature must be > 0 when sampling")


def default_stops(bundle: ModelBundle) -> tuple[int, ...]:
    s = bundle.special
    return (s.eos, s.step)


def decoder_inputs(bundle: ModelBundle, states: Tensor, tokens: np.ndarray,
                   token_mask: np.ndarray) -> Tensor:
    """Hidden states for ``[Dec(S) slots, <dec>, tokens...]``; ``states`` is ``[B, N_L, d_latent]``."""
    bb = bundle.decoder_backbone
    B, n, _ = states.shape
    prefix = bundle.projectors["dec"](states)
    dec = np.full((B, 1), bundle.special.dec, dtype=np.int64)
    blocks: list = [prefix, dec]
    key_mask = np.ones((B, n + 1), dtype=bool)
    if tokens.shape[1]:
        blocks.append(tokens)
        key_mask = np.concatenate([key_mask, token_mask], axis=1)
    h = bb.run(bb.embed_batch(blocks, key_mask), key_mask, use_planner_layers=False)
    bundle.counter.decoder += B
    return h


def decoder_logits(bundle: ModelBundle, states: Tensor, segments: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Teacher-forced logits predicting each segment token from its soft prefix.

    Returns ``(logits [B, L, V], targets [B, L], mask [B, L])`` where position
    ``j`` predicts ``segments[b][j]``.
    """
    n = states.shape[1]
    targets, mask = pad_right(segments, bundle.special.pad)
    inputs = targets[:, :-1]
    h = decoder_inputs(bundle, states, inputs, mask[:, :-1])
    L = targets.shape[1]
    h = h[:, n:n + L, :]
    return bundle.decoder_backbone.logits(h), targets, mask


def _next_token_logits(bundle: ModelBundle, states: np.ndarray, generated: list[list[int]]) -> np.ndarray:
    L = max(len(g) for g in generated)
    toks = np.zeros((len(generated), L), dtype=np.int64)
    for b, g in enumerate(generated):
        toks[b, :len(g)] = g
    # all rows share a length here, so no padding mask is required
    h = decoder_inputs(bundle, Tensor(states), toks, np.ones(toks.shape, dtype=bool))
    return bundle.decoder_backbone.logits(h[:, -1, :]).data


def sample_from_logits(logits: np.ndarray, temperature: float | None,
                       rng: np.random.Generator | None) -> np.ndarray:
    """Greedy argmax when ``temperature`` is None, else one categorical draw per row."""
    if temperature is None:
        return logits.argmax(axis=-1)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random(len(p))
    idx = (p.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def generate(bundle: ModelBundle, states: np.ndarray, temperature: float | None = None,
             max_tokens: int = 16, stop_tokens: Sequence[int] = (),
             rng: np.random.Generator | None = None,
             prefix: Sequence[int] = ()) -> list[list[int]]:
    """Batched autoregressive decoding from ``[B, N_L, d_latent]`` prefixes.

    Each row stops after emitting a stop token (which is kept) or ``max_tokens``
    total tokens. ``prefix`` tokens are forced first and count toward the budget.
    """
    if max_tokens < 1:
        raise ContractError("empty generation budget")
    if temperature is not None and rng is None:
        raise ContractError("sampling needs an rng")
    states = np.asarray(states, dtype=np.float64)
    stops = set(int(t) for t in stop_tokens)
    out: list[list[int]] = [list(prefix) for _ in range(len(states))]
    active = [] if prefix and prefix[-1] in stops else list(range(len(states)))
    with ad.no_grad():
        for _ in range(max_tokens - len(prefix)):
            if not active:
                break
            logits = _next_token_logits(bundle, states[active], [out[b] for b in active])
            nxt = sample_from_logits(logits, temperature, rng)
            still = []
            for b, t in zip(active, nxt):
                out[b].append(int(t))
                if int(t) not in stops:
                    still.append(b)
            active = still
    return out


def decode_step(bundle: ModelBundle, req: DecodeRequest, rng: np.random.Generator | None = None) -> list[int]:
    """Verbalize one aggregated state; conditions on nothing but ``req.state``."""
    if req.state.slots.shape[0] != bundle.planner_cfg.n_latent:
        raise ContractError(f"state has {req.state.slots.shape[0]} slots, expected {bundle.planner_cfg.n_latent}")
    stops = req.stop_tokens or default_stops(bundle)
    return generate(bundle, req.state.slots[None], req.temperature, req.max_tokens, stops, rng)[0]


def first_token_distribution(bundle: ModelBundle, states: np.ndarray) -> np.ndarray:
    """Softmax over the vocabulary for the first decoded token, ``[B, V]``."""
    with ad.no_grad():
        logits = _next_token_logits(bundle, np.asarray(states, dtype=np.float64), [[]] * len(states))
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def probe_first_token(bundle: ModelBundle, state: AggregatedState) -> int:
    """Greedy first token after ``<dec>``; exactly one backbone pass."""
    with ad.no_grad():
        logits = _next_token_logits(bundle, state.slots[None], [[]])
    return int(logits[0].argmax())


# ---------------------------------------------------------------------------
# lazy decoding
# ---------------------------------------------------------------------------
@dataclass
class StepRecord:
    step: int
    probe: int
    text: list[int] | None = None


@dataclass
class InferenceTrace:
    question: list[int]
    records: list[StepRecord] = field(default_factory=list)
    answer: list[int] = field(default_factory=list)
    encoder_passes: int = 0
    planner_passes: int = 0
    probe_passes: int = 0
    answer_passes: int = 0
    step_text_passes: int = 0
    termination: str = "answer"  # or "step_cap"
    trajectory: LatentTrajectory | None = None
    aggregated: list[AggregatedState] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.records)

    def to_json(self, vocab=None) -> str:
        d = {
            "question": self.question,
            "records": [asdict(r) for r in self.records],
            "answer": self.answer,
            "counters": {"encoder": self.encoder_passes, "planner": self.planner_passes,
                         "probe": self.probe_passes, "answer": self.answer_passes,
                         "step_text": self.step_text_passes},
            "termination": self.termination,
        }
        if vocab is not None:
            d["question_text"] = vocab.detokenize(self.question)
            d["answer_text"] = vocab.detokenize(self.answer)
            d["step_texts"] = [None if r.text is None else vocab.detokenize(r.text) for r in self.records]
        return json.dumps(d)


@dataclass
class InferOptions:
    answer_temperature: float | None = None  # None -> greedy answer decoding
    probe_temperature: float | None = None  # None -> greedy probing
    step_temperature: float | None = None  # only used when decoding all steps
    max_answer_tokens: int = 8
    max_step_tokens: int = 16
    max_steps: int | None = None  # defaults to planner max_plan_steps


def _infer(bundle: ModelBundle, question: Sequence[int], eager: bool,
           opts: InferOptions, rng: np.random.Generator | None) -> InferenceTrace:
    s = bundle.special
    t_max = opts.max_steps or bundle.planner_cfg.max_plan_steps
    roller = TrajectoryRoller(bundle, question)
    trace = InferenceTrace(question=list(question))
    c = bundle.counter
    stops = default_stops(bundle)
    answered = False
    for _ in range(t_max):
        before = c.snapshot()
        state = roller.step()
        after = c.snapshot()
        trace.encoder_passes += after[0] - before[0]
        trace.planner_passes += after[1] - before[1]
        if state is None:
            break
        with ad.no_grad():
            logits = _next_token_logits(bundle, state.slots[None], [[]])
        trace.probe_passes += 1
        probe = int(sample_from_logits(logits, opts.probe_temperature, rng)[0])
        rec = StepRecord(step=state.step_index, probe=probe)
        trace.records.append(rec)
        if probe == s.ans:
            # probe token kept as the first answer token; the rest is decoded from S_k
            before = c.decoder
            tail = _continue(bundle, state.slots, [probe], opts.answer_temperature,
                             opts.max_answer_tokens, stops, rng)
            trace.answer_passes += c.decoder - before
            trace.answer = tail
            rec.text = list(tail) if eager else None
            answered = True
            break
        if eager:
            before = c.decoder
            rec.text = generate(bundle, state.slots[None], opts.step_temperature,
                                opts.max_step_tokens, stops, rng)[0]
            trace.step_text_passes += c.decoder - before
    trace.termination = "answer" if answered else "step_cap"
    trace.trajectory = roller.trajectory
    trace.aggregated = roller.aggregated
    return trace


def _continue(bundle, slots, prefix, temperature, max_tokens, stops, rng) -> list[int]:
    out = list(prefix)
    with ad.no_grad():
        while len(out) < max_tokens and out[-1] not in stops:
            logits = _next_token_logits(bundle, slots[None], [out])
            out.append(int(sample_from_logits(logits, temperature, rng)[0]))
    return out


def lazy_infer(bundle: ModelBundle, question: Sequence[int], opts: InferOptions | None = None,
               rng: np.random.Generator | None = None) -> InferenceTrace:
    """Plan step by step, probing only the first token; fully decode once it is ``<ans>``."""
    return _infer(bundle, question, eager=False, opts=opts or InferOptions(), rng=rng)


def decode_all_steps(bundle: ModelBundle, question: Sequence[int], opts: InferOptions | None = None,
                     rng: np.random.Generator | None = None) -> InferenceTrace:
    """As :func:`lazy_infer` but every intermediate state is also verbalized."""
    return _infer(bundle, question, eager=True, opts=opts or InferOptions(), rng=rng)
