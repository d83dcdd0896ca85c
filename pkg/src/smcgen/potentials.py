"""Potential functions: nonnegative scores on token sequences, in log space.

A potential assigns ``log_score(tokens, is_complete)`` in [-inf, bound] to a
token sequence (tokens never include EOS; the flag marks EOS-terminated
sequences). Potentials obey monotone zero: a score of -inf on a prefix
stays -inf on every extension. Each potential is tagged efficient (cheap
enough for inside-the-proposal use) or expensive (folded into particle
weights), and declares a stride: re-scored every token, or only at semantic
unit boundaries.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable

from .arith import EvalFault, check_program
from .grammar import Grammar, Recognizer

NEG_INF = float("-inf")

EVERY_TOKEN = "token"


@dataclass(frozen=True)
class SemanticUnit:
    """Stride marker: the potential's value only changes at unit boundaries.

    ``is_boundary`` judges a token by its decoded bytes; EOS always closes
    a unit.
    """

    is_boundary: Callable[[bytes], bool]


def newline_boundary(token_bytes: bytes) -> bool:
    return b"\n" in token_bytes


class Potential:
    """Interface for log-space potential functions."""

    expensive: bool = False
    stride = EVERY_TOKEN
    log_bound: float = 0.0

    def log_score(self, tokens: tuple[int, ...], is_complete: bool) -> float:
        raise NotImplementedError


@dataclass
class FaultRecord:
    position: int
    error: str


class PotentialProduct:
    """Product of potentials; log of the product is the sum of member logs.

    A member raising during evaluation scores the product -inf and leaves a
    record in ``faults``, unless ``on_error="raise"``.
    """

    def __init__(self, members=(), on_error: str = "zero"):
        if on_error not in ("zero", "raise"):
            raise ValueError("on_error must be 'zero' or 'raise'")
        self.members = tuple(members)
        self.on_error = on_error
        self.faults: list[FaultRecord] = []

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    @property
    def log_bound(self) -> float:
        return sum(m.log_bound for m in self.members)

    def log_score(self, tokens, is_complete: bool = False) -> float:
        total = 0.0
        for m in self.members:
            try:
                v = m.log_score(tokens, is_complete)
            except Exception as exc:  # noqa: BLE001 - fault containment is the contract
                if self.on_error == "raise":
                    raise
                self.faults.append(FaultRecord(len(tokens), repr(exc)))
                return NEG_INF
            if v == NEG_INF:
                return NEG_INF
            total += v
        return total

    def conditional_log_score(self, context, token: int, eos_id: int) -> float:
        """Log of the one-step score ratio, zero-safe on dead contexts."""
        base = self.log_score(context, False)
        if base == NEG_INF:
            return NEG_INF
        if token == eos_id:
            ext = self.log_score(context, True)
        else:
            ext = self.log_score(tuple(context) + (token,), False)
        return ext - base


def product_log_score(product: PotentialProduct, tokens, is_complete: bool = False) -> float:
    return product.log_score(tokens, is_complete)


def conditional_log_score(product: PotentialProduct, context, token: int, eos_id: int) -> float:
    return product.conditional_log_score(context, token, eos_id)


class CFGPotential(Potential):
    """Boolean grammar potential over decoded bytes.

    Partial sequences score 0 when the decoded bytes are a valid prefix of
    the language and -inf otherwise; complete sequences score by full
    membership. Recognizer states are memoized by token prefix, so
    extending a sequence costs only the new token's bytes.
    """

    expensive = False

    def __init__(self, grammar: Grammar, vocab):
        self.grammar = grammar
        self.vocab = vocab
        self.recognizer = Recognizer(grammar)
        self._memo = {(): self.recognizer.initial()}
        self._lock = threading.Lock()

    def state(self, tokens):
        """Recognizer state after the decoded bytes of ``tokens``."""
        tokens = tuple(tokens)
        with self._lock:
            st = self._memo.get(tokens)
        if st is not None:
            return st
        # walk back to the longest memoized prefix, then advance forward
        n = len(tokens)
        k = n - 1
        st = None
        while k > 0:
            with self._lock:
                st = self._memo.get(tokens[:k])
            if st is not None:
                break
            k -= 1
        if st is None:
            k = 0
            st = self._memo[()]
        for i in range(k, n):
            st = st.advance_bytes(self.vocab.token_bytes[tokens[i]])
            with self._lock:
                self._memo[tokens[:i + 1]] = st
        return st

    def log_score(self, tokens, is_complete):
        st = self.state(tokens)
        if is_complete:
            return 0.0 if st.is_complete_member else NEG_INF
        return 0.0 if st.is_valid_prefix else NEG_INF

    def clear_cache(self):
        with self._lock:
            self._memo = {(): self.recognizer.initial()}


def cfg_potential(grammar: Grammar, vocab) -> CFGPotential:
    return CFGPotential(grammar, vocab)


class CheckedEvalPotential(Potential):
    """Runtime checker for the toy arithmetic language (see ``arith``).

    Expensive, with newline semantic units. A partial sequence is truncated
    to its longest prefix of complete lines before checking; a complete
    sequence is checked whole. A clean evaluation scores 0, any fault
    (including budget exhaustion) scores -inf. Fault descriptions accumulate
    in ``diagnostics``.
    """

    expensive = True
    stride = SemanticUnit(newline_boundary)

    def __init__(self, vocab, budget: int = 100_000):
        self.vocab = vocab
        self.budget = budget
        self.diagnostics: list[str] = []
        self._memo: dict[bytes, bool] = {}
        self._lock = threading.Lock()

    def _evaluated_text(self, tokens, is_complete) -> bytes:
        data = self.vocab.decode(tokens)
        if is_complete:
            return data
        cut = data.rfind(b"\n")
        return data[:cut + 1] if cut >= 0 else b""

    def log_score(self, tokens, is_complete):
        text = self._evaluated_text(tokens, is_complete)
        with self._lock:
            ok = self._memo.get(text)
        if ok is None:
            try:
                check_program(text.decode("utf-8", errors="strict"), self.budget)
                ok = True
            except (EvalFault, UnicodeDecodeError) as exc:
                with self._lock:
                    self.diagnostics.append(f"{text!r}: {exc}")
                ok = False
            with self._lock:
                self._memo[text] = ok
        return 0.0 if ok else NEG_INF


def checked_eval_potential(vocab, budget: int = 100_000) -> CheckedEvalPotential:
    return CheckedEvalPotential(vocab, budget)


class MaxDepthPotential(Potential):
    """Kills sequences whose bracket nesting ever exceeds ``max_depth``."""

    expensive = True

    def __init__(self, vocab, max_depth: int, open_byte: bytes = b"(",
                 close_byte: bytes = b")"):
        self.vocab = vocab
        self.max_depth = max_depth
        self.open = open_byte[0]
        self.close = close_byte[0]

    def log_score(self, tokens, is_complete):
        depth = 0
        for b in self.vocab.decode(tokens):
            if b == self.open:
                depth += 1
                if depth > self.max_depth:
                    return NEG_INF
            elif b == self.close:
                depth -= 1
        return 0.0


class ForbidBytesPotential(Potential):
    """Kills sequences containing any of the forbidden bytes."""

    expensive = True

    def __init__(self, vocab, forbidden: bytes):
        self.vocab = vocab
        self.forbidden = frozenset(forbidden)

    def log_score(self, tokens, is_complete):
        for b in self.vocab.decode(tokens):
            if b in self.forbidden:
                return NEG_INF
        return 0.0


REGISTRY: dict[str, Callable] = {}


def register_potential(name: str, factory: Callable) -> None:
    REGISTRY[name] = factory


def make_potential(name: str, vocab, grammar: Grammar | None = None, params=None):
    """Instantiate a registered potential by name for a run configuration."""
    params = dict(params or {})
    if name not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise KeyError(f"unknown potential {name!r}; registered: {known}")
    return REGISTRY[name](vocab=vocab, grammar=grammar, **params)


register_potential("cfg", lambda vocab, grammar, **p: CFGPotential(grammar, vocab))
register_potential(
    "checked-eval",
    lambda vocab, grammar=None, budget=100_000, **p: CheckedEvalPotential(vocab, budget),
)
register_potential(
    "max-depth",
    lambda vocab, grammar=None, depth=2, **p: MaxDepthPotential(vocab, depth),
)
register_potential(
    "forbid-bytes",
    lambda vocab, grammar=None, bytes="", **p: ForbidBytesPotential(
        vocab, bytes.encode("utf-8") if isinstance(bytes, str) else bytes
    ),
)
