"""Byte-terminal context-free grammars with incremental prefix recognition.

Grammars are read from a line-oriented BNF dialect (see ``parse_grammar``).
Terminals are bytes 0-255; quoted strings in the source expand byte by byte.
Recognition is plain Earley over a reduced grammar (rules mentioning
non-generating nonterminals are dropped ahead of time), which makes "the
current item set is nonempty" exactly equivalent to "the consumed bytes are
a prefix of some string in the language". Recognizer states are persistent
values: ``advance`` returns a new state sharing chart structure with its
parent, so many divergent states can be held cheaply.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass

# A grammar symbol is either a nonterminal name (str) or a byte value (int).


class GrammarError(ValueError):
    """Problem in grammar source, with 1-based line/column when known."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple


class Grammar:
    """A validated byte-terminal CFG. The start symbol is the first LHS."""

    def __init__(self, rules: list[Rule], start: str):
        if not rules:
            raise GrammarError("empty rule set")
        self.rules = tuple(rules)
        self.start = start
        self.nonterminals = frozenset(r.lhs for r in rules)
        if start not in self.nonterminals:
            raise GrammarError(f"start symbol {start} has no rules")
        for r in rules:
            for sym in r.rhs:
                if isinstance(sym, str):
                    if sym not in self.nonterminals:
                        raise GrammarError(f"undefined nonterminal {sym}")
                elif not (isinstance(sym, int) and 0 <= sym <= 255):
                    raise GrammarError(f"invalid terminal {sym!r}")

    def __repr__(self):
        return f"Grammar(start={self.start!r}, rules={len(self.rules)})"


_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*")
_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r", "0": "\0"}


def _scan_quoted(line: str, lineno: int, col: int) -> tuple[bytes, int]:
    """Parse a double-quoted string starting at ``col``; return bytes and end col."""
    out = []
    i = col + 1
    while i < len(line):
        ch = line[i]
        if ch == '"':
            return "".join(out).encode("utf-8"), i + 1
        if ch == "\\":
            if i + 1 >= len(line):
                raise GrammarError("unterminated escape", lineno, i + 1)
            nxt = line[i + 1]
            if nxt in _ESCAPES:
                out.append(_ESCAPES[nxt])
                i += 2
            elif nxt == "x":
                hexpart = line[i + 2:i + 4]
                if len(hexpart) != 2 or not re.fullmatch(r"[0-9a-fA-F]{2}", hexpart):
                    raise GrammarError("bad \\x escape", lineno, i + 1)
                out.append(chr(int(hexpart, 16)))
                i += 4
            else:
                raise GrammarError(f"unknown escape \\{nxt}", lineno, i + 1)
        else:
            out.append(ch)
            i += 1
    raise GrammarError("unterminated string", lineno, col + 1)


def parse_grammar(text: str) -> Grammar:
    """Parse the line-oriented BNF dialect.

    Each line is ``Name ::= alt | alt | ...``; an alternative is a
    whitespace-separated mix of quoted byte strings and nonterminal names,
    with ``""`` for the empty expansion. ``#`` starts a comment outside
    quotes. Alternatives for the same name accumulate across lines; the
    first name defined is the start symbol.
    """
    rules: list[Rule] = []
    uses: list[tuple[str, int, int]] = []
    start = None
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline
        # locate rule head
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _NAME_RE.match(line.lstrip())
        head_off = len(line) - len(line.lstrip())
        if not m:
            raise GrammarError("expected rule name", lineno, head_off + 1)
        lhs = m.group(0)
        i = head_off + m.end()
        while i < len(line) and line[i].isspace():
            i += 1
        if line[i:i + 3] != "::=":
            raise GrammarError("expected '::='", lineno, i + 1)
        i += 3
        if start is None:
            start = lhs
        # parse alternatives
        current: list = []
        saw_item = False

        def flush(pos):
            nonlocal current, saw_item
            if not saw_item:
                raise GrammarError("empty alternative (use \"\" for epsilon)", lineno, pos)
            rules.append(Rule(lhs, tuple(current)))
            current = []
            saw_item = False

        while i < len(line):
            ch = line[i]
            if ch.isspace():
                i += 1
            elif ch == "#":
                break
            elif ch == "|":
                flush(i + 1)
                i += 1
            elif ch == '"':
                bs, i = _scan_quoted(line, lineno, i)
                current.extend(bs)
                saw_item = True
            else:
                m = _NAME_RE.match(line, i)
                if not m:
                    raise GrammarError(f"unexpected character {ch!r}", lineno, i + 1)
                current.append(m.group(0))
                uses.append((m.group(0), lineno, i + 1))
                saw_item = True
                i = m.end()
        flush(len(line))
    if not rules:
        raise GrammarError("empty rule set")
    defined = {r.lhs for r in rules}
    for name, lineno, col in uses:
        if name not in defined:
            raise GrammarError(f"undefined nonterminal {name}", lineno, col)
    return Grammar(rules, start)


def _generating_nonterminals(rules) -> frozenset:
    gen: set[str] = set()
    changed = True
    while changed:
        changed = False
        for r in rules:
            if r.lhs in gen:
                continue
            if all(isinstance(s, int) or s in gen for s in r.rhs):
                gen.add(r.lhs)
                changed = True
    return frozenset(gen)


_AUGMENTED = "$accept"

# Earley items are (rule_id, dot, origin) tuples over the reduced rule list.


class _EarleySet:
    """One frozen chart position: its items plus a completion index."""

    __slots__ = ("items", "wants")

    def __init__(self, items: tuple, wants: dict):
        self.items = items
        self.wants = wants  # nonterminal -> tuple of items expecting it here


class Recognizer:
    """Compiled recognizer for one grammar; produces persistent states."""

    def __init__(self, grammar: Grammar):
        self.grammar = grammar
        gen = _generating_nonterminals(grammar.rules)
        reduced = [r for r in grammar.rules
                   if r.lhs in gen and all(isinstance(s, int) or s in gen for s in r.rhs)]
        self.language_nonempty = grammar.start in gen
        if self.language_nonempty:
            reduced.append(Rule(_AUGMENTED, (grammar.start,)))
        self.rules = tuple(reduced)
        self._aug_id = len(self.rules) - 1
        self.predict: dict[str, tuple[int, ...]] = {}
        for rid, r in enumerate(self.rules):
            self.predict.setdefault(r.lhs, ())
            self.predict[r.lhs] += (rid,)

    def initial(self) -> "RecognizerState":
        if not self.language_nonempty:
            return RecognizerState(self, (), b"", False, False)
        first = self._close(((self._aug_id, 0, 0),), (), 0)
        return self._make_state((first,), b"")

    def _make_state(self, sets, consumed: bytes) -> "RecognizerState":
        cur = sets[-1]
        valid = len(cur.items) > 0
        complete = any(it[0] == self._aug_id and it[1] == 1 for it in cur.items)
        return RecognizerState(self, sets, consumed, valid, complete)

    def _close(self, seed, sets, pos) -> _EarleySet:
        """Predict/complete closure of ``seed`` items at chart position ``pos``.

        ``sets`` holds the earlier positions. Handles epsilon rules by
        tracking nonterminals already completed in place, so parents added
        after such a completion are still advanced.
        """
        rules = self.rules
        items: list = []
        in_set = set()
        wants: dict[str, list] = {}
        completed_here: set[str] = set()
        agenda = deque()

        def add(item):
            if item not in in_set:
                in_set.add(item)
                items.append(item)
                agenda.append(item)

        for it in seed:
            add(it)
        while agenda:
            rid, dot, origin = agenda.popleft()
            rhs = rules[rid].rhs
            if dot == len(rhs):
                nt = rules[rid].lhs
                if origin == pos:
                    completed_here.add(nt)
                    for parent in list(wants.get(nt, ())):
                        add((parent[0], parent[1] + 1, parent[2]))
                else:
                    for parent in sets[origin].wants.get(nt, ()):
                        add((parent[0], parent[1] + 1, parent[2]))
            else:
                sym = rhs[dot]
                if isinstance(sym, str):
                    cur = (rid, dot, origin)
                    wants.setdefault(sym, []).append(cur)
                    for rid2 in self.predict.get(sym, ()):
                        add((rid2, 0, pos))
                    if sym in completed_here:
                        add((rid, dot + 1, origin))
        frozen_wants = {nt: tuple(lst) for nt, lst in wants.items()}
        return _EarleySet(tuple(items), frozen_wants)


class RecognizerState:
    """Immutable Earley chart state after consuming a byte sequence.

    ``is_valid_prefix`` holds iff the consumed bytes prefix some string in
    the language; once false it stays false under any extension.
    ``is_complete_member`` holds iff the consumed bytes are themselves in
    the language.
    """

    __slots__ = ("_rec", "_sets", "consumed", "is_valid_prefix", "is_complete_member")

    def __init__(self, rec, sets, consumed, valid, complete):
        self._rec = rec
        self._sets = sets
        self.consumed = consumed
        self.is_valid_prefix = valid
        self.is_complete_member = complete

    def advance(self, byte: int) -> "RecognizerState":
        """State after consuming one more byte. Dead states absorb."""
        if not self.is_valid_prefix:
            return RecognizerState(self._rec, (), self.consumed + bytes([byte]),
                                   False, False)
        pos = len(self._sets)
        cur = self._sets[-1]
        seed = tuple((rid, dot + 1, origin) for rid, dot, origin in cur.items
                     if dot < len(self._rec.rules[rid].rhs)
                     and self._rec.rules[rid].rhs[dot] == byte)
        consumed = self.consumed + bytes([byte])
        if not seed:
            return RecognizerState(self._rec, (), consumed, False, False)
        new_set = self._rec._close(seed, self._sets, pos)
        return self._rec._make_state(self._sets + (new_set,), consumed)

    def advance_bytes(self, bs: bytes) -> "RecognizerState":
        state = self
        for b in bs:
            state = state.advance(b)
        return state

    def allowed_next_bytes(self) -> tuple[frozenset, bool]:
        """Bytes whose consumption keeps the prefix valid, and EOS validity.

        Equals exactly {b : advance(b).is_valid_prefix}; the second element
        is ``is_complete_member`` (whether the sequence may stop here).
        """
        if not self.is_valid_prefix:
            return frozenset(), False
        rules = self._rec.rules
        out = set()
        for rid, dot, _origin in self._sets[-1].items:
            rhs = rules[rid].rhs
            if dot < len(rhs) and isinstance(rhs[dot], int):
                out.add(rhs[dot])
        return frozenset(out), self.is_complete_member


def init_recognizer(grammar: Grammar) -> RecognizerState:
    """Recognizer state for the empty byte sequence."""
    return Recognizer(grammar).initial()


def recognize(grammar: Grammar, data: bytes) -> RecognizerState:
    """Recognize ``data`` in one pass (equivalent to byte-by-byte advance)."""
    return init_recognizer(grammar).advance_bytes(data)
