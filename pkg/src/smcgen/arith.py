"""Checker for a tiny assignment/arithmetic language.

The language is newline-separated statements of the form ``name = expr``,
where expressions combine integer literals, previously assigned names,
``+ - * /``, unary minus, and parentheses. ``/`` is integer division.
Faults are: syntax errors, reference to an unassigned name, division by
zero, and exhaustion of the step budget. The checker is total: every input
either evaluates cleanly or faults within the budget.
"""

from __future__ import annotations


class EvalFault(Exception):
    """Any failure while checking a program (parse error, runtime error, budget)."""


class _Checker:
    def __init__(self, budget: int):
        self.budget = budget
        self.env: dict[str, int] = {}

    def spend(self, n: int = 1):
        self.budget -= n
        if self.budget < 0:
            raise EvalFault("step budget exhausted")

    def run(self, text: str):
        for raw in text.split("\n"):
            line = raw.strip()
            if not line:
                continue
            self.statement(line)

    def statement(self, line: str):
        self.spend()
        if "=" not in line:
            raise EvalFault(f"expected assignment: {line!r}")
        name, _, rhs = line.partition("=")
        name = name.strip()
        if not name.isidentifier():
            raise EvalFault(f"bad assignment target: {name!r}")
        toks = _tokenize(rhs)
        value, pos = self.expr(toks, 0)
        if pos != len(toks):
            raise EvalFault(f"trailing input in {line!r}")
        self.env[name] = value

    def expr(self, toks, pos):
        value, pos = self.term(toks, pos)
        while pos < len(toks) and toks[pos] in ("+", "-"):
            op = toks[pos]
            rhs, pos = self.term(toks, pos + 1)
            self.spend()
            value = value + rhs if op == "+" else value - rhs
        return value, pos

    def term(self, toks, pos):
        value, pos = self.atom(toks, pos)
        while pos < len(toks) and toks[pos] in ("*", "/"):
            op = toks[pos]
            rhs, pos = self.atom(toks, pos + 1)
            self.spend()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise EvalFault("division by zero")
                value = value // rhs
        return value, pos

    def atom(self, toks, pos):
        self.spend()
        if pos >= len(toks):
            raise EvalFault("unexpected end of expression")
        tok = toks[pos]
        if tok == "-":
            value, pos = self.atom(toks, pos + 1)
            return -value, pos
        if tok == "(":
            value, pos = self.expr(toks, pos + 1)
            if pos >= len(toks) or toks[pos] != ")":
                raise EvalFault("missing ')'")
            return value, pos + 1
        if tok.isdigit():
            return int(tok), pos + 1
        if tok.isidentifier():
            if tok not in self.env:
                raise EvalFault(f"undefined name {tok!r}")
            return self.env[tok], pos + 1
        raise EvalFault(f"unexpected token {tok!r}")


def _tokenize(text: str) -> list[str]:
    toks = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "+-*/()":
            toks.append(ch)
            i += 1
        elif ch.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            toks.append(text[i:j])
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(text[i:j])
            i = j
        else:
            raise EvalFault(f"illegal character {ch!r}")
    return toks


def check_program(text: str, budget: int = 100_000) -> None:
    """Raise EvalFault if ``text`` does not evaluate cleanly."""
    _Checker(budget).run(text)
