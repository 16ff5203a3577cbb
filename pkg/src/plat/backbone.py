"""Tiny decoder-only transformer over interleaved token ids and continuous vectors."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, Union

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.errors import CapacityError, ConfigError, ContractError, DimensionError


@dataclass
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_planner_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_planner_layers < 0 or self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1 and n_planner_layers >= 0")
        if self.vocab_size < 2 or self.max_seq_len < 1:
            raise ConfigError("vocab_size must be >= 2 and max_seq_len >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SpecialTokenTable:
    enc: int
    plan: int
    dec: int
    step: int
    ans: int
    pad: int
    eos: int

    def validate(self, vocab_size: int) -> None:
        ids = list(asdict(self).values())
        if len(set(ids)) != len(ids):
            raise ConfigError(f"special token ids are not distinct: {ids}")
        if max(ids) >= vocab_size or min(ids) < 0:
            raise ConfigError(f"special token ids must lie in [0, {vocab_size})")


Item = Union[int, np.ndarray, Tensor]


class MixedSequence:
    """Ordered token ids and ``d_model``-wide vectors sharing one position stream."""

    def __init__(self, items: Iterable[Item]):
        self.items: list[Item] = list(items)

    def __len__(self) -> int:
        return len(self.items)

    @staticmethod
    def is_token(item: Item) -> bool:
        return isinstance(item, (int, np.integer))


def sinusoidal_positions(n: int, d: int, scale: float = 0.1) -> np.ndarray:
    """Initial value for the learned position table; gives attention a relative-offset prior."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))[None, :]
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[:, : d // 2])
    return scale * out


def _block_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in (
        "ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o",
        "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]


@dataclass
class KVCache:
    """Per-layer keys/values of the positions processed so far, plus their pad mask."""

    layers: list[tuple[Tensor, Tensor]]
    key_mask: np.ndarray  # [B, L_past]

    @property
    def n_real(self) -> np.ndarray:
        return self.key_mask.sum(axis=1)


class Backbone:
    """Pre-LN GPT-style stack plus optional planner extension blocks.

    ``run(..., use_planner_layers=True)`` applies the base blocks, then the
    planner blocks, then the shared final layer norm. Decoder passes skip the
    planner blocks.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.forward_count = 0  # sequences processed, for pass accounting
        rng = np.random.default_rng(seed)
        d, std = cfg.d_model, cfg.init_std
        resid_std = std / math.sqrt(2 * (cfg.n_layers + cfg.n_planner_layers))
        p: dict[str, Tensor] = {}

        def normal(shape, s=std):
            return rng.normal(0.0, s, size=shape)

        p["tok_emb"] = ad.parameter(normal((cfg.vocab_size, d)), "tok_emb")
        p["pos_emb"] = ad.parameter(sinusoidal_positions(cfg.max_seq_len, d), "pos_emb")
        blocks = [f"blocks.{i}" for i in range(cfg.n_layers)]
        blocks += [f"planner_blocks.{i}" for i in range(cfg.n_planner_layers)]
        for b in blocks:
            h = cfg.mlp_ratio * d
            p[f"{b}.ln1.g"] = ad.parameter(np.ones(d))
            p[f"{b}.ln1.b"] = ad.parameter(np.zeros(d))
            p[f"{b}.attn.w_qkv"] = ad.parameter(normal((d, 3 * d)))
            p[f"{b}.attn.b_qkv"] = ad.parameter(np.zeros(3 * d))
            p[f"{b}.attn.w_o"] = ad.parameter(normal((d, d), resid_std))
            p[f"{b}.attn.b_o"] = ad.parameter(np.zeros(d))
            p[f"{b}.ln2.g"] = ad.parameter(np.ones(d))
            p[f"{b}.ln2.b"] = ad.parameter(np.zeros(d))
            p[f"{b}.mlp.w1"] = ad.parameter(normal((d, h)))
            p[f"{b}.mlp.b1"] = ad.parameter(np.zeros(h))
            p[f"{b}.mlp.w2"] = ad.parameter(normal((h, d), resid_std))
            p[f"{b}.mlp.b2"] = ad.parameter(np.zeros(d))
        p["ln_f.g"] = ad.parameter(np.ones(d))
        p["ln_f.b"] = ad.parameter(np.zeros(d))
        p["head.w"] = ad.parameter(normal((d, cfg.vocab_size)))
        p["head.b"] = ad.parameter(np.zeros(cfg.vocab_size))
        for k, v in p.items():
            v.name = k
        self.params = p

    # -- parameter bookkeeping ---------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def base_parameter_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("planner_blocks.")]

    def planner_layer_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("planner_blocks.")]

    def clone(self, keep_planner_layers: bool = True) -> "Backbone":
        """Deep copy with independent parameter storage."""
        new = copy.copy(self)
        new.cfg = copy.copy(self.cfg)
        new.forward_count = 0
        names = self.params if keep_planner_layers else self.base_parameter_names()
        new.params = {k: ad.parameter(self.params[k].data.copy(), k) for k in names}
        if not keep_planner_layers:
            new.cfg.n_planner_layers = 0
        return new

    # -- embedding -----------------------------------------------------------
    def embed_tokens(self, ids) -> Tensor:
        return ad.embedding(self.params["tok_emb"], ids)

    def add_positions(self, x: Tensor, positions: np.ndarray) -> Tensor:
        if positions.size and positions.max() >= self.cfg.max_seq_len:
            raise CapacityError(
                f"sequence length {int(positions.max()) + 1} exceeds max_seq_len={self.cfg.max_seq_len}")
        return ad.add(x, ad.embedding(self.params["pos_emb"], positions))

    def embed_mixed(self, seq: MixedSequence) -> Tensor:
        """``[len, d_model]``: tokens get tok+pos embedding, vectors get pos embedding only."""
        d = self.cfg.d_model
        if len(seq) > self.cfg.max_seq_len:
            raise CapacityError(f"sequence length {len(seq)} exceeds max_seq_len={self.cfg.max_seq_len}")
        rows: list[Tensor] = []
        run: list[int] = []

        def flush():
            if run:
                rows.append(self.embed_tokens(np.array(run)))
                run.clear()

        for item in seq.items:
            if MixedSequence.is_token(item):
                run.append(int(item))
                continue
            flush()
            vec = item if isinstance(item, Tensor) else Tensor(np.asarray(item, dtype=np.float64))
            if vec.shape != (d,):
                raise DimensionError(f"continuous item must have shape ({d},), got {vec.shape}")
            rows.append(ad.reshape(vec, (1, d)))
        flush()
        if not rows:
            raise ContractError("empty sequence")
        x = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
        return self.add_positions(x, np.arange(len(seq)))

    # -- transformer -----------------------------------------------------------
    def _block(self, x: Tensor, prefix: str, mask: np.ndarray,
               past: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """One pre-LN block; ``past`` holds cached keys/values ``[B, H, L_past, dh]``."""
        p = self.params
        B, L, d = x.shape
        H = self.cfg.n_heads
        dh = d // H
        h = ad.layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        qkv = ad.linear(h, p[f"{prefix}.attn.w_qkv"], p[f"{prefix}.attn.b_qkv"])
        qkv = ad.transpose(ad.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        if past is not None:
            k = ad.concat([past[0], k], axis=-2)
            v = ad.concat([past[1], v], axis=-2)
        att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.softmax(att, mask)
        y = ad.matmul(att, v)
        y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (B, L, d))
        x = ad.add(x, ad.linear(y, p[f"{prefix}.attn.w_o"], p[f"{prefix}.attn.b_o"]))
        h = ad.layernorm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = ad.gelu(ad.linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
        return ad.add(x, ad.linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])), (k, v)

    def _layer_names(self, use_planner_layers: bool) -> list[str]:
        names = [f"blocks.{i}" for i in range(self.cfg.n_layers)]
        if use_planner_layers:
            names += [f"planner_blocks.{i}" for i in range(self.cfg.n_planner_layers)]
        return names

    def run(self, x: Tensor, key_mask: np.ndarray | None = None,
            use_planner_layers: bool = False) -> Tensor:
        """Causal stack over embedded inputs ``[B, L, d]``; returns final-LN hidden states.

        ``key_mask`` ``[B, L]`` marks real (non-pad) positions.
        """
        if x.ndim == 2:
            return ad.reshape(self.run(ad.reshape(x, (1,) + x.shape), None if key_mask is None
                                       else key_mask[None], use_planner_layers), x.shape)
        B, L, _ = x.shape
        if L > self.cfg.max_seq_len:
            raise CapacityError(f"sequence length {L} exceeds max_seq_len={self.cfg.max_seq_len}")
        causal = np.tril(np.ones((L, L), dtype=bool))
        if key_mask is None:
            mask = causal[None, None]
        else:
            mask = causal[None, None] & np.asarray(key_mask, dtype=bool)[:, None, None, :]
        self.forward_count += B
        for name in self._layer_names(use_planner_layers):
            x, _ = self._block(x, name, mask)
        return ad.layernorm(x, self.params["ln_f.g"], self.params["ln_f.b"])

    def run_cached(self, x: Tensor, key_mask: np.ndarray, cache: "KVCache | None" = None,
                   use_planner_layers: bool = False) -> tuple[Tensor, "KVCache"]:
        """Like :meth:`run` for a block that continues ``cache``; returns the extended cache.

        The new positions attend to every real cached position and causally
        to each other, so chained calls equal one call on the concatenation.
        """
        B, L, _ = x.shape
        key_mask = np.asarray(key_mask, dtype=bool)
        past_mask = np.zeros((B, 0), dtype=bool) if cache is None else cache.key_mask
        Lp = past_mask.shape[1]
        if Lp + L > self.cfg.max_seq_len:
            raise CapacityError(f"sequence length {Lp + L} exceeds max_seq_len={self.cfg.max_seq_len}")
        allowed = np.concatenate([np.broadcast_to(past_mask[:, None, :], (B, L, Lp)),
                                  np.tril(np.ones((L, L), dtype=bool))[None] & key_mask[:, None, :]], axis=2)
        mask = allowed[:, None]
        self.forward_count += B
        layers = []
        for j, name in enumerate(self._layer_names(use_planner_layers)):
            x, kv = self._block(x, name, mask, None if cache is None else cache.layers[j])
            layers.append(kv)
        new = KVCache(layers, np.concatenate([past_mask, key_mask], axis=1))
        return ad.layernorm(x, self.params["ln_f.g"], self.params["ln_f.b"]), new

    def hidden_states(self, seq: MixedSequence, use_planner_layers: bool = False) -> Tensor:
        if len(seq) == 0:
            raise ContractError("hidden_states needs a non-empty sequence")
        return self.run(self.embed_mixed(seq), use_planner_layers=use_planner_layers)

    def logits(self, hidden: Tensor) -> Tensor:
        return ad.linear(hidden, self.params["head.w"], self.params["head.b"])

    # -- batched helpers -------------------------------------------------------
    def embed_batch(self, blocks: Sequence[np.ndarray | Tensor], key_mask: np.ndarray,
                    offset: np.ndarray | None = None) -> Tensor:
        """Embed ``[B, l_j]`` id blocks and ``[B, l_j, d]`` vector blocks joined along the sequence.

        Positions count only real entries so left padding does not shift them.
        ``offset`` (``[B]``) shifts each row's positions, used for training-time
        position jitter.
        """
        parts = [self.embed_tokens(b) if isinstance(b, np.ndarray) else b for b in blocks]
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        positions = np.maximum(np.cumsum(key_mask, axis=1) - 1, 0)
        if offset is not None:
            positions = positions + np.asarray(offset, dtype=np.int64)[:, None]
        return self.add_positions(x, positions)


def pad_left(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad ragged id lists into ``[B, L]`` ids plus a bool mask of real entries."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s):
            ids[i, L - len(s):] = s
            mask[i, L - len(s):] = True
    return ids, mask


def pad_right(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask
