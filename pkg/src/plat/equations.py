"""Exact parsing of the corpus's equation-shaped step texts.

Grammar (whitespace ignored)::

    equation := expr "=" number
    expr     := term (("+" | "-") term)*
    term     := factor (("*" | "/") factor)*
    factor   := number | "(" expr ")"

Arithmetic uses ``fractions.Fraction`` so "2*1/2=1" evaluates exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

_TOKEN = re.compile(r"\d+|[()+\-*/=]")
_SPECIAL = re.compile(r"<[a-z]+>")
_CANDIDATE = re.compile(r"[\d()+\-*/]+=-?\d+")


@dataclass(frozen=True)
class Node:
    """Expression tree node. ``op`` is None for a literal."""

    op: str | None = None
    value: int | None = None
    args: tuple["Node", ...] = ()


@dataclass(frozen=True)
class Equation:
    lhs: Node
    rhs: Fraction
    text: str

    @property
    def operands(self) -> list[int]:
        return literals(self.lhs)

    @property
    def lhs_value(self) -> Fraction | None:
        return evaluate(self.lhs)

    @property
    def correct(self) -> bool:
        v = self.lhs_value
        return v is not None and v == self.rhs


class _Parser:
    def __init__(self, tokens: list[str]):
        self.toks = tokens
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self):
        t = self.peek()
        self.i += 1
        return t

    def expr(self) -> Node:
        node = self.term()
        while self.peek() in ("+", "-"):
            node = Node(self.take(), None, (node, self.term()))
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek() in ("*", "/"):
            node = Node(self.take(), None, (node, self.factor()))
        return node

    def factor(self) -> Node:
        t = self.take()
        if t == "(":
            node = self.expr()
            if self.take() != ")":
                raise ValueError("unbalanced parenthesis")
            return node
        if t is not None and t.isdigit():
            return Node(None, int(t))
        raise ValueError(f"unexpected token {t!r}")


def _strip(text: str) -> str:
    return re.sub(r"\s+", "", _SPECIAL.sub(" ", text))


def parse_equation(text: str) -> Equation | None:
    """Parse ``text`` as a full equation; None when it is not one."""
    s = _strip(text)
    if s.count("=") != 1:
        return None
    left, right = s.split("=")
    neg = right.startswith("-")
    if not (right[1:] if neg else right).isdigit():
        return None
    toks = _TOKEN.findall(left)
    if "".join(toks) != left or not toks:
        return None
    p = _Parser(toks)
    try:
        node = p.expr()
    except ValueError:
        return None
    if p.peek() is not None:
        return None
    return Equation(node, Fraction(int(right)), s)


def extract_equation(text: str) -> Equation | None:
    """First parseable equation inside free text (special tokens ignored)."""
    full = parse_equation(text)
    if full is not None:
        return full
    for m in _CANDIDATE.finditer(_strip(text)):
        eq = parse_equation(m.group(0))
        if eq is not None:
            return eq
    return None


def evaluate(node: Node) -> Fraction | None:
    """Exact value; None on division by zero."""
    if node.op is None:
        return Fraction(node.value)
    a, b = (evaluate(x) for x in node.args)
    if a is None or b is None:
        return None
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if b == 0:
        return None
    return a / b


def literals(node: Node) -> list[int]:
    if node.op is None:
        return [node.value]
    return [v for x in node.args for v in literals(x)]


def _flatten(node: Node, op: str) -> list[Node]:
    if node.op == op:
        return [n for x in node.args for n in _flatten(x, op)]
    return [node]


def canonical(node: Node) -> str:
    """Order-free form for commutative chains: "3+4" and "4+3" map to the same string."""
    if node.op is None:
        return str(node.value)
    if node.op in "+*":
        parts = sorted(canonical(x) for x in _flatten(node, node.op))
        return "(" + node.op.join(parts) + ")"
    a, b = node.args
    return f"({canonical(a)}{node.op}{canonical(b)})"


def canonical_step(text: str) -> str | None:
    eq = extract_equation(text)
    if eq is None:
        return None
    return f"{canonical(eq.lhs)}={eq.rhs}"
