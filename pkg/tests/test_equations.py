from fractions import Fraction

import pytest

from plat.equations import canonical_step, evaluate, extract_equation, parse_equation


@pytest.mark.parametrize("text,lhs,rhs", [
    ("3+4=7", 7, 7),
    ("16-3-4=9", 9, 9),
    ("2*1/2=1", 1, 1),
    ("(2+3)*4=20", 20, 20),
    ("7/2=3", Fraction(7, 2), 3),
])
def test_parse_and_evaluate(text, lhs, rhs):
    eq = parse_equation(text)
    assert eq is not None
    assert eq.lhs_value == lhs
    assert eq.rhs == rhs


def test_special_tokens_and_spaces_are_ignored():
    eq = parse_equation("<step> 3 + 4 = 7 <eos>")
    assert eq is not None and eq.correct


@pytest.mark.parametrize("text", ["", "3+", "=7", "3+4", "abc", "3+4=7=7", "(3+4=7"])
def test_malformed_text_does_not_parse(text):
    assert parse_equation(text) is None


def test_extract_finds_an_embedded_equation():
    eq = extract_equation("so he has 3+4=7 now")
    assert eq is not None and eq.operands == [3, 4]


def test_division_by_zero_is_not_correct():
    eq = parse_equation("3/0=1")
    assert eq is not None
    assert evaluate(eq.lhs) is None
    assert not eq.correct


def test_canonical_form_ignores_commutative_order():
    assert canonical_step("3+4=7") == canonical_step("4+3=7")
    assert canonical_step("2*3*5=30") == canonical_step("5*2*3=30")
    assert canonical_step("7-3=4") != canonical_step("3-7=4")
    assert canonical_step("no equation") is None
