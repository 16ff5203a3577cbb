"""Synthetic multi-step arithmetic word problems, tokenizer and splits.

Every question is a short story whose numbers appear literally in the text,
and whose solution is a chain of equations ``a<op>b=c`` where ``a`` is the
running total (or the first question number) and ``b`` the next question
number. All arithmetic is on non-negative integers; division is exact.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from plat.backbone import SpecialTokenTable
from plat.errors import CapacityError, ConfigError

SPECIALS = ["<pad>", "<eos>", "<enc>", "<plan>", "<dec>", "<step>", "<ans>"]
MATH_CHARS = list("0123456789") + ["+", "-", "*", "/", "=", "(", ")"]
PUNCT = [".", "?", ","]

# name, pronoun, item; one story per template
_STORIES = [
    ("tom", "he", "apples"), ("ann", "she", "coins"), ("sam", "he", "stamps"),
    ("mia", "she", "marbles"), ("leo", "he", "cards"), ("eva", "she", "shells"),
    ("max", "he", "books"), ("zoe", "she", "pens"), ("ben", "he", "rocks"),
    ("amy", "she", "beads"),
]
_PHRASES = {
    "+": [["buys", "{n}", "more"], ["finds", "{n}", "more"], ["gets", "{n}", "more"]],
    "-": [["gives", "away", "{n}"], ["loses", "{n}"], ["sells", "{n}"]],
    "*": [["makes", "it", "{n}", "times", "as", "many"]],
    "/": [["splits", "them", "into", "{n}", "equal", "groups", "and", "keeps", "one"]],
}
_FRAME = ["has", "how", "many", "does", "have", "now", "then"]


def _word_list() -> list[str]:
    words: set[str] = set(_FRAME)
    for name, pron, item in _STORIES:
        words.update([name, pron, item])
    for variants in _PHRASES.values():
        for v in variants:
            words.update(w for w in v if w != "{n}")
    return sorted(words)


class Vocab:
    """Bijective token <-> id map over specials, math characters, punctuation and words.

    Text form: word-like tokens are space separated, while consecutive math
    characters (digits, operators, ``=``) are written without spaces.
    """

    _pattern = re.compile(r"<[a-z]+>|[0-9+\-*/=()]|[a-z]+|[.?,]")

    def __init__(self, extra_words: Iterable[str] = ()):
        tokens = SPECIALS + MATH_CHARS + PUNCT + _word_list()
        tokens += [w for w in extra_words if w not in tokens]
        self.tokens: list[str] = tokens
        self.ids: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.ids) != len(self.tokens):
            raise ConfigError("duplicate vocabulary entries")
        self.special = SpecialTokenTable(
            enc=self.ids["<enc>"], plan=self.ids["<plan>"], dec=self.ids["<dec>"],
            step=self.ids["<step>"], ans=self.ids["<ans>"], pad=self.ids["<pad>"],
            eos=self.ids["<eos>"])
        self.special.validate(len(self.tokens))
        self._math_ids = {self.ids[c] for c in MATH_CHARS}

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        pieces = self._pattern.findall(text)
        if "".join(pieces) != text.replace(" ", ""):
            raise ConfigError(f"text contains characters outside the vocabulary: {text!r}")
        try:
            return [self.ids[p] for p in pieces]
        except KeyError as exc:
            raise ConfigError(f"unknown token {exc.args[0]!r} in {text!r}") from None

    def detokenize(self, ids: Sequence[int]) -> str:
        out: list[str] = []
        prev_math = False
        for i in ids:
            i = int(i)
            is_math = i in self._math_ids
            if out and not (is_math and prev_math):
                out.append(" ")
            out.append(self.tokens[i])
            prev_math = is_math
        return "".join(out)


@dataclass
class ReasoningSample:
    question: str
    steps: list[str]
    answer: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningSample":
        return cls(question=d["question"], steps=list(d["steps"]), answer=int(d["answer"]),
                   meta=dict(d.get("meta", {})))


@dataclass
class GeneratorConfig:
    step_range: tuple[int, int] = (1, 3)
    operand_range: tuple[int, int] = (1, 20)
    max_value: int = 99
    ops: str = "+-*/"


def _apply(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    return a // b


def _feasible(op: str, a: int, b: int, max_value: int) -> bool:
    if op == "-":
        return a - b >= 0
    if op == "/":
        return b >= 2 and a % b == 0
    if op == "*":
        return b >= 2 and a * b <= max_value
    return a + b <= max_value


def _one_sample(rng: np.random.Generator, n_steps: int, cfg: GeneratorConfig) -> ReasoningSample:
    lo, hi = cfg.operand_range
    name, pron, item = _STORIES[int(rng.integers(len(_STORIES)))]
    for _ in range(1000):
        value = int(rng.integers(lo, hi + 1))
        words = [name, "has", str(value), item, "."]
        steps, numbers = [], [value]
        ok = True
        for _ in range(n_steps):
            choices = {op: [b for b in range(lo, hi + 1) if _feasible(op, value, b, cfg.max_value)]
                       for op in cfg.ops}
            feasible_ops = [op for op in cfg.ops if choices[op]]
            if not feasible_ops:
                ok = False
                break
            op = feasible_ops[int(rng.integers(len(feasible_ops)))]
            b = choices[op][int(rng.integers(len(choices[op])))]
            phrase = _PHRASES[op][int(rng.integers(len(_PHRASES[op])))]
            result = _apply(op, value, b)
            words += ["then"] if steps else []
            words += [pron] + [str(b) if w == "{n}" else w for w in phrase] + ["."]
            steps.append(f"{value}{op}{b}={result}")
            numbers.append(b)
            value = result
        if ok:
            words += ["how", "many", item, "does", name, "have", "now", "?"]
            return ReasoningSample(
                question=" ".join(words), steps=steps, answer=value,
                meta={"difficulty": n_steps, "operand_range": [lo, hi], "numbers": numbers})
    raise ConfigError(f"could not build a {n_steps}-step sample under {cfg}")


def generate_corpus(seed: int, n: int, step_range: tuple[int, int] = (1, 3),
                    operand_range: tuple[int, int] = (1, 20), max_value: int = 99,
                    ops: str = "+-*/", t_max: int | None = None) -> list[ReasoningSample]:
    """``n`` distinct samples, step counts cycling evenly through ``step_range``.

    Sample ``j`` draws from its own generator seeded by ``(seed, j)``, so the
    corpus is a pure function of the arguments.
    """
    s_lo, s_hi = step_range
    o_lo, o_hi = operand_range
    if s_lo < 1 or s_hi < s_lo or (t_max is not None and s_hi > t_max):
        raise ConfigError(f"infeasible step_range {step_range}")
    if o_lo < 1 or o_hi < o_lo or max_value < o_hi:
        raise ConfigError(f"infeasible operand_range {operand_range} / max_value {max_value}")
    if not ops or set(ops) - set("+-*/"):
        raise ConfigError(f"ops must be a non-empty subset of '+-*/', got {ops!r}")
    cfg = GeneratorConfig((s_lo, s_hi), (o_lo, o_hi), max_value, ops)
    counts = list(range(s_lo, s_hi + 1))
    out: list[ReasoningSample] = []
    seen: set[str] = set()
    j = 0
    while len(out) < n:
        if j > 50 * n + 1000:
            raise ConfigError("generator cannot produce enough distinct questions")
        rng = np.random.default_rng([seed, j])
        j += 1
        sample = _one_sample(rng, counts[len(out) % len(counts)], cfg)
        if sample.question in seen:
            continue
        seen.add(sample.question)
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
def answer_text(answer: int | str) -> str:
    return f"<ans> {answer}"


def question_ids(sample: ReasoningSample, vocab: Vocab) -> list[int]:
    """Question tokens followed by ``<enc>`` (the planner's read-out position)."""
    return vocab.tokenize(sample.question) + [vocab.special.enc]


def render_cot(sample: ReasoningSample, vocab: Vocab, max_len: int | None = None) -> tuple[list[int], int]:
    """``question <step> s1 <step> s2 ... <ans> answer <eos>``; also returns the question length."""
    q = vocab.tokenize(sample.question)
    ids = list(q)
    for s in sample.steps:
        ids += [vocab.special.step] + vocab.tokenize(s)
    ids += vocab.tokenize(answer_text(sample.answer)) + [vocab.special.eos]
    if max_len is not None and len(ids) > max_len:
        raise CapacityError(f"cot rendering has {len(ids)} tokens > {max_len}")
    return ids, len(q)


def render_plat(sample: ReasoningSample, vocab: Vocab, max_len: int | None = None) -> list[list[int]]:
    """Per-step target segments: each step text then ``<eos>``; the last is ``<ans> answer <eos>``."""
    segs = [vocab.tokenize(s) + [vocab.special.eos] for s in sample.steps]
    segs.append(vocab.tokenize(answer_text(sample.answer)) + [vocab.special.eos])
    if max_len is not None and any(len(s) + 2 > max_len for s in segs):
        raise CapacityError("plat segment too long")
    return segs


def render_training_sequence(sample: ReasoningSample, vocab: Vocab, mode: str = "cot"):
    if mode == "cot":
        return render_cot(sample, vocab)[0]
    if mode == "plat":
        return render_plat(sample, vocab)
    raise ConfigError(f"unknown render mode {mode!r}")


# ---------------------------------------------------------------------------
# splits and files
# ---------------------------------------------------------------------------
def make_splits(corpus: Sequence[ReasoningSample], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                seed: int = 0, n_hard: int | None = None) -> dict[str, list[ReasoningSample]]:
    """Disjoint train/val/test by question text plus a harder out-of-range split.

    ``hard_ood`` samples use operands above the corpus maximum and one more
    step than the corpus maximum.
    """
    if len(fractions) != 3 or sum(fractions) > 1 + 1e-12 or min(fractions) < 0:
        raise ConfigError(f"fractions must be three non-negative values summing to <= 1: {fractions}")
    unique, seen = [], set()
    for s in corpus:
        if s.question not in seen:
            seen.add(s.question)
            unique.append(s)
    order = np.random.default_rng([seed, 1]).permutation(len(unique))
    n = len(unique)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = min(int(round(fractions[2] * n)), n - n_train - n_val)
    picked = [unique[i] for i in order]
    splits = {
        "train": picked[:n_train],
        "val": picked[n_train:n_train + n_val],
        "test": picked[n_train + n_val:n_train + n_val + n_test],
    }
    max_steps = max(s.meta.get("difficulty", len(s.steps)) for s in unique)
    max_operand = max(max(s.meta.get("numbers", [0])) for s in unique)
    hi = 2 * max_operand
    splits["hard_ood"] = generate_corpus(
        seed=seed + 7919, n=n_hard if n_hard is not None else max(n_test, 1),
        step_range=(max_steps + 1, max_steps + 1), operand_range=(max_operand + 1, hi),
        max_value=max(4 * hi, 199))
    return splits


def write_jsonl(samples: Iterable[ReasoningSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[ReasoningSample]:
    with open(path, encoding="utf-8") as f:
        return [ReasoningSample.from_dict(json.loads(line)) for line in f if line.strip()]
