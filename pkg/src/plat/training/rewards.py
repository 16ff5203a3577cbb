"""Rule-based rollout rewards.

Per step: 0.2 when an equation can be extracted, 0.2 more when it is true.
Answer: 0.2 when a number can be extracted and the segment holds no special
token besides the leading ``<ans>`` and a closing ``<eos>``; 1.0 more when that
well-formed number is right; -0.2 whenever an extracted number is wrong. The
penalty stacks with the format reward, so a valid wrong answer scores 0.0 and
a wrong number next to an illegal token scores -0.2.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from plat.equations import extract_equation

R_VALID_EQ = 0.2
R_CORRECT_EQ = 0.2
R_VALID_ANS = 0.2
R_CORRECT_ANS = 1.0
R_WRONG_ANS = -0.2

_SPECIAL = re.compile(r"<[a-z]+>")
_NUMBER = re.compile(r"-?\d+")


@dataclass
class StepReward:
    equation_present: bool
    equation_correct: bool

    @property
    def value(self) -> float:
        return (R_VALID_EQ if self.equation_present else 0.0) + (R_CORRECT_EQ if self.equation_correct else 0.0)


@dataclass
class RewardBreakdown:
    steps: list[StepReward] = field(default_factory=list)
    format_valid: bool = False
    correct: bool = False
    extracted: int | None = None
    wrong: bool = False  # a number was extracted and differs from the target

    @property
    def step_total(self) -> float:
        return sum(s.value for s in self.steps)

    @property
    def answer_value(self) -> float:
        value = 0.0
        if self.format_valid:
            value += R_VALID_ANS + (R_CORRECT_ANS if self.correct else 0.0)
        if self.wrong:
            value += R_WRONG_ANS
        return value

    @property
    def total(self) -> float:
        return self.step_total + self.answer_value


def step_reward(text: str) -> StepReward:
    eq = extract_equation(text)
    if eq is None:
        return StepReward(False, False)
    return StepReward(True, eq.correct)


def extract_answer(text: str | None) -> tuple[int | None, bool]:
    """(last integer in an answer segment, whether it is free of illegal special tokens)."""
    if text is None:
        return None, False
    body = text.strip()
    if not body.startswith("<ans>"):
        return None, False
    body = body[len("<ans>"):].strip()
    if body.endswith("<eos>"):
        body = body[:-len("<eos>")]
    nums = _NUMBER.findall(body)
    if not nums:
        return None, False
    return int(nums[-1]), _SPECIAL.search(body) is None


def parse_answer(text: str | None) -> int | None:
    """The number of a well-formed answer segment; None otherwise."""
    n, clean = extract_answer(text)
    return n if clean else None


def compute_reward(step_texts: Sequence[str], answer_text: str | None, target: int) -> RewardBreakdown:
    n, clean = extract_answer(answer_text)
    return RewardBreakdown(
        steps=[step_reward(t) for t in step_texts],
        format_valid=n is not None and clean,
        correct=n is not None and clean and n == target,
        extracted=n,
        wrong=n is not None and n != target,
    )
