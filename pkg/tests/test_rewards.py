import pytest

from plat.training.rewards import (R_CORRECT_ANS, R_VALID_ANS, R_WRONG_ANS, compute_reward,
                                   parse_answer, step_reward)


@pytest.mark.parametrize("text,value", [
    ("3+4=7", 0.4),
    ("3+4=8", 0.2),
    ("he buys more", 0.0),
    ("", 0.0),
])
def test_step_reward_levels(text, value):
    assert step_reward(text).value == value


@pytest.mark.parametrize("text,parsed", [
    ("<ans> 12 <eos>", 12), ("<ans> 12", 12), ("<ans> -3 <eos>", -3),
    ("<ans> <eos>", None), ("12", None), ("<ans> 12 <step>", None), (None, None),
    ("<ans> 12 apples <eos>", 12), ("13 <ans> 12", None),
])
def test_parse_answer(text, parsed):
    assert parse_answer(text) == parsed


def test_answer_stacking():
    assert compute_reward([], "<ans> 5 <eos>", 5).answer_value == R_VALID_ANS + R_CORRECT_ANS
    assert compute_reward([], "<ans> 6 <eos>", 5).answer_value == R_VALID_ANS + R_WRONG_ANS
    assert compute_reward([], "<ans> <step>", 5).answer_value == 0.0
    # an extracted wrong number is penalized even when the format is broken
    assert compute_reward([], "<ans> 6 <step>", 5).answer_value == R_WRONG_ANS
    assert compute_reward([], "<ans> 5 <step>", 5).answer_value == 0.0
    assert compute_reward([], None, 5).answer_value == 0.0


def test_total_sums_steps_and_answer():
    r = compute_reward(["3+4=7", "7*2=15"], "<ans> 14 <eos>", 14)
    assert r.step_total == pytest.approx(0.6)
    assert r.total == pytest.approx(1.8)
