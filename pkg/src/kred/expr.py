"""Arithmetic expressions used as nonlinear (closed-form) rate laws.

Supported nodes: literals, named constants, species-count variables,
``+ - * /``, and ``sqrt``.  Species counts are referenced by the canonical
text of the species wrapped in ``#{...}``, e.g. ``#{RNAP(p1,p2)}``, so that
expressions survive a round trip through model files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping


class ExprError(ValueError):
    """Malformed expression text or evaluation failure."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Const:
    """A named constant, bound through the model's constant table."""

    name: str


@dataclass(frozen=True)
class SpeciesVar:
    """Copy-number of a species, identified by its canonical text."""

    key: str


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "RateExpr"
    right: "RateExpr"


@dataclass(frozen=True)
class Sqrt:
    arg: "RateExpr"


RateExpr = Num | Const | SpeciesVar | BinOp | Sqrt


def evaluate(e: RateExpr, species: Mapping[str, float], constants: Mapping[str, float]) -> float:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Const):
        try:
            return constants[e.name]
        except KeyError:
            raise ExprError(f"unbound constant {e.name!r}") from None
    if isinstance(e, SpeciesVar):
        try:
            return species[e.key]
        except KeyError:
            raise ExprError(f"unknown species variable #{{{e.key}}}") from None
    if isinstance(e, Sqrt):
        return math.sqrt(evaluate(e.arg, species, constants))
    a = evaluate(e.left, species, constants)
    b = evaluate(e.right, species, constants)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    return a / b


def substitute(e: RateExpr, mapping: Mapping[str, RateExpr]) -> RateExpr:
    """Replace species variables whose key appears in `mapping`."""
    if isinstance(e, SpeciesVar):
        return mapping.get(e.key, e)
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Sqrt):
        return Sqrt(substitute(e.arg, mapping))
    return e


def species_vars(e: RateExpr) -> set[str]:
    if isinstance(e, SpeciesVar):
        return {e.key}
    if isinstance(e, BinOp):
        return species_vars(e.left) | species_vars(e.right)
    if isinstance(e, Sqrt):
        return species_vars(e.arg)
    return set()


def const_names(e: RateExpr) -> set[str]:
    if isinstance(e, Const):
        return {e.name}
    if isinstance(e, BinOp):
        return const_names(e.left) | const_names(e.right)
    if isinstance(e, Sqrt):
        return const_names(e.arg)
    return set()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def to_text(e: RateExpr) -> str:
    """Render with minimal parentheses; parse(to_text(e)) is equivalent to e."""
    return _render(e, 0)


def _render(e: RateExpr, parent_prec: int) -> str:
    if isinstance(e, Num):
        return repr(e.value) if e.value >= 0 else f"({e.value!r})"
    if isinstance(e, Const):
        return e.name
    if isinstance(e, SpeciesVar):
        return "#{" + e.key + "}"
    if isinstance(e, Sqrt):
        return f"sqrt({_render(e.arg, 0)})"
    prec = _PREC[e.op]
    # Right operand of - and / needs strictly higher precedence.
    left = _render(e.left, prec)
    right = _render(e.right, prec + (1 if e.op in "-/" else 0))
    text = f"{left} {e.op} {right}"
    return f"({text})" if prec < parent_prec else text


# --- parsing -----------------------------------------------------------------

_NAME_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_NAME_CHARS = _NAME_START | set("0123456789")


def _tokenize(text: str) -> list[tuple[str, str]]:
    toks: list[tuple[str, str]] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/()":
            toks.append((c, c))
            i += 1
        elif c == "#":
            if i + 1 >= n or text[i + 1] != "{":
                raise ExprError("expected '{' after '#'")
            j = text.find("}", i)
            if j < 0:
                raise ExprError("unterminated species variable, missing '}'")
            toks.append(("species", text[i + 2 : j]))
            i = j + 1
        elif c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] in ".eE" or (text[j] in "+-" and text[j - 1] in "eE")):
                j += 1
            toks.append(("num", text[i:j]))
            i = j
        elif c in _NAME_START:
            j = i
            while j < n and text[j] in _NAME_CHARS:
                j += 1
            toks.append(("name", text[i:j]))
            i = j
        else:
            raise ExprError(f"unexpected character {c!r} in expression")
    toks.append(("end", ""))
    return toks


class _Parser:
    def __init__(self, toks: list[tuple[str, str]]):
        self.toks = toks
        self.pos = 0

    def peek(self) -> tuple[str, str]:
        return self.toks[self.pos]

    def take(self, kind: str | None = None) -> tuple[str, str]:
        tok = self.toks[self.pos]
        if kind is not None and tok[0] != kind:
            raise ExprError(f"expected {kind}, found {tok[1]!r}")
        self.pos += 1
        return tok

    def expr(self) -> RateExpr:
        node = self.term()
        while self.peek()[0] in "+-":
            op = self.take()[0]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> RateExpr:
        node = self.factor()
        while self.peek()[0] in "*/":
            op = self.take()[0]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> RateExpr:
        kind, value = self.peek()
        if kind == "-":
            self.take()
            return BinOp("-", Num(0.0), self.factor())
        if kind == "+":
            self.take()
            return self.factor()
        if kind == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if kind == "num":
            self.take()
            return Num(float(value))
        if kind == "species":
            self.take()
            return SpeciesVar(value)
        if kind == "name":
            self.take()
            if value == "sqrt":
                self.take("(")
                node = self.expr()
                self.take(")")
                return Sqrt(node)
            return Const(value)
        raise ExprError(f"unexpected token {value!r}")


def parse(text: str) -> RateExpr:
    parser = _Parser(_tokenize(text))
    node = parser.expr()
    parser.take("end")
    return node


def add(a: RateExpr, b: RateExpr) -> RateExpr:
    return BinOp("+", a, b)


def mul(*factors: RateExpr) -> RateExpr:
    out = factors[0]
    for f in factors[1:]:
        out = BinOp("*", out, f)
    return out


def div(a: RateExpr, b: RateExpr) -> RateExpr:
    return BinOp("/", a, b)
