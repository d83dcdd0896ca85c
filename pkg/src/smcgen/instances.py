"""Bundled synthetic instances: grammar, model, potentials, metric, oracle.

Each instance packages everything a run needs: a vocabulary, a language
model (uniform, or an n-gram trained on a corpus bundled right here), an
optional grammar potential, expensive potentials, a scoring metric for
grouped outputs, and default engine settings. Instances flagged enumerable
expose an exhaustive oracle with the exact normalizing constants and
posterior.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

from .grammar import Grammar, parse_grammar
from .inference import MethodConfig, METHODS
from .lm import LanguageModel, UniformLM, Vocabulary, train_ngram
from .oracle import InstanceOracle, enumerate_instance
from .potentials import (
    CheckedEvalPotential,
    ForbidBytesPotential,
    MaxDepthPotential,
    PotentialProduct,
    cfg_potential,
)


@dataclass
class Instance:
    name: str
    description: str
    vocab: Vocabulary
    lm: LanguageModel
    grammar: Grammar | None
    grammar_source: str | None
    corpus: str | None
    expensive_factory: Callable[[], list]
    metric: Callable[[tuple], float]
    unit: str = "token"
    max_steps: int = 64
    ess_threshold_fraction: float = 1.0 / 3.0
    proposal: str = "exact"
    enumerable: bool = False
    _efficient: PotentialProduct | None = field(default=None, repr=False)
    _oracle: InstanceOracle | None = field(default=None, repr=False)

    def efficient(self) -> PotentialProduct:
        """Grammar potential product (shared; recognizer cache stays warm)."""
        if self._efficient is None:
            members = []
            if self.grammar is not None:
                members.append(cfg_potential(self.grammar, self.vocab))
            self._efficient = PotentialProduct(members)
        return self._efficient

    def expensive(self) -> PotentialProduct:
        return PotentialProduct(self.expensive_factory())

    def equivalence(self, tokens) -> bytes:
        return self.vocab.decode(t for t in tokens if t != self.vocab.eos_id)

    def method_config(self, method: str, **overrides) -> MethodConfig:
        params = dict(
            method=method,
            efficient=self.efficient(),
            expensive=self.expensive(),
            proposal=self.proposal,
            unit=self.unit,
            max_steps=self.max_steps,
            ess_threshold_fraction=self.ess_threshold_fraction,
        )
        params.update(overrides)
        return MethodConfig(**params)

    def oracle(self) -> InstanceOracle:
        """Exhaustive enumeration up to max_steps total tokens."""
        if not self.enumerable:
            raise ValueError(f"instance {self.name} is not enumerable")
        if self._oracle is None:
            self._oracle = enumerate_instance(
                self.lm, self.efficient(), self.expensive(), self.max_steps
            )
        return self._oracle


def _ab_ba() -> Instance:
    vocab = Vocabulary.from_bytes(b"ab")
    src = 'S ::= "ab" | "ba"\n'
    return Instance(
        name="ab-ba",
        description="uniform 3-symbol model constrained to the language {ab, ba}",
        vocab=vocab,
        lm=UniformLM(vocab),
        grammar=parse_grammar(src),
        grammar_source=src,
        corpus=None,
        expensive_factory=list,
        metric=lambda tokens: 1.0 if tokens[:2] == (0, 1) else 0.0,
        max_steps=8,
        enumerable=True,
    )


def _a_star() -> Instance:
    vocab = Vocabulary.from_bytes(b"ab")
    src = 'S ::= "a" S | ""\n'
    return Instance(
        name="a-star",
        description="uniform 3-symbol model constrained to a*",
        vocab=vocab,
        lm=UniformLM(vocab),
        grammar=parse_grammar(src),
        grammar_source=src,
        corpus=None,
        expensive_factory=list,
        metric=lambda tokens: 1.0 / len(tokens),
        max_steps=20,
        enumerable=True,
    )


def _nested_parens() -> Instance:
    vocab = Vocabulary.from_bytes(b"()")
    src = 'S ::= "" | "(" S ")" S\n'

    def depth_metric(tokens):
        depth = best = 0
        for t in tokens:
            if t == 0:
                depth += 1
                best = max(best, depth)
            elif t == 1:
                depth -= 1
        return 1.0 / (1.0 + best)

    return Instance(
        name="nested-parens",
        description="balanced parentheses with an expensive nesting-depth validator",
        vocab=vocab,
        lm=UniformLM(vocab),
        grammar=parse_grammar(src),
        grammar_source=src,
        corpus=None,
        expensive_factory=lambda: [MaxDepthPotential(vocab, 2)],
        metric=depth_metric,
        max_steps=14,
        enumerable=True,
    )


_TOY_ARITH_CORPUS = "|".join(
    [
        "x=1\ny=x+1\n",
        "x=2\ny=x*2\n",
        "y=2\nx=y/2\n",
        "x=1\ny=2\nx=x+y\n",
        "x=2\nx=x*x\ny=x\n",
        "y=1\nx=y+y\n",
        "x=0\ny=x+2\n",
        "x=2\ny=x/1\n",
        "x=1\nx=x+1\ny=x*2\n",
        "y=2\ny=y*y\nx=y\n",
    ]
)


def _toy_arithmetic() -> Instance:
    lm = train_ngram(_TOY_ARITH_CORPUS, order=3, smoothing=0.1, doc_delimiter=b"|")
    vocab = lm.vocabulary
    src = (
        "S ::= Line | Line S\n"
        'Line ::= Var "=" Expr "\\n"\n'
        'Var ::= "x" | "y"\n'
        'Expr ::= Term | Expr "+" Term\n'
        'Term ::= Atom | Term "*" Atom | Term "/" Atom\n'
        'Atom ::= "0" | "1" | "2" | Var\n'
    )

    def statements_metric(tokens):
        text = vocab.decode(t for t in tokens if t != vocab.eos_id)
        lines = [ln for ln in text.split(b"\n") if ln]
        return min(1.0, len(lines) / 3.0)

    return Instance(
        name="toy-arithmetic",
        description="n-gram model writing assignment programs, checked by evaluation",
        vocab=vocab,
        lm=lm,
        grammar=parse_grammar(src),
        grammar_source=src,
        corpus=_TOY_ARITH_CORPUS,
        expensive_factory=lambda: [CheckedEvalPotential(vocab)],
        metric=statements_metric,
        unit="line",
        max_steps=40,
        enumerable=False,
    )


def _early_filter_corpus() -> str:
    # unigram proportions 55a : 55b : 60c over 30 documents -> with add-0
    # counts the model is exactly p(a)=p(b)=0.275, p(c)=0.30, p(eos)=0.15
    chars = "a" * 55 + "b" * 55 + "c" * 60
    docs = []
    pos = 0
    for size in [6] * 20 + [5] * 10:
        docs.append(chars[pos:pos + size])
        pos += size
    assert pos == len(chars)
    return "\n".join(docs)


def _early_filter() -> Instance:
    lm = train_ngram(_early_filter_corpus(), order=1, smoothing=0.0)
    vocab = lm.vocabulary
    src = 'S ::= C C C C C C\nC ::= "a" | "b" | "c"\n'

    def a_fraction(tokens):
        core = [t for t in tokens if t != vocab.eos_id]
        if not core:
            return 0.0
        return sum(1 for t in core if vocab.token_bytes[t] == b"a") / len(core)

    return Instance(
        name="early-filter",
        description="length-6 strings where an expensive check kills any 'c' "
                    "(about 92% of proposal prefixes die before completing)",
        vocab=vocab,
        lm=lm,
        grammar=parse_grammar(src),
        grammar_source=src,
        corpus=_early_filter_corpus(),
        expensive_factory=lambda: [ForbidBytesPotential(vocab, b"c")],
        metric=a_fraction,
        max_steps=8,
        ess_threshold_fraction=1.0,
        enumerable=True,
    )


def _free() -> Instance:
    vocab = Vocabulary.from_bytes(b"ab")
    return Instance(
        name="free",
        description="uniform 3-symbol model with no potentials (trivial product)",
        vocab=vocab,
        lm=UniformLM(vocab),
        grammar=None,
        grammar_source=None,
        corpus=None,
        expensive_factory=list,
        metric=lambda tokens: 1.0 / len(tokens),
        max_steps=3,
        enumerable=True,
    )


_PERF_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789+*/()=-; "


def _perf_vocab(size: int = 1000) -> Vocabulary:
    tokens = list(_PERF_ALPHABET)
    for a, b in itertools.product(_PERF_ALPHABET.strip(), repeat=2):
        if len(tokens) >= size - 1:
            break
        tokens.append(a + b)
    return Vocabulary.from_strings(tokens[:size - 1])


def _perf_grammar_source() -> str:
    variables = " | ".join(f'"{c}"' for c in "abcdefghijklmnopqrstuvwxyz")
    digits = " | ".join(f'"{d}"' for d in "0123456789")
    return (
        'S ::= Expr | S ";" Expr\n'
        'Expr ::= Term | Expr "+" Term | Expr "-" Term\n'
        'Term ::= Factor | Term "*" Factor | Term "/" Factor\n'
        'Factor ::= Var | Num | "(" Expr ")"\n'
        f"Var ::= {variables}\n"
        "Num ::= Digit | Num Digit\n"
        f"Digit ::= {digits}\n"
    )


def _perf_1k() -> Instance:
    vocab = _perf_vocab()
    src = _perf_grammar_source()
    grammar = parse_grammar(src)
    return Instance(
        name="perf-1k",
        description="1000-token vocabulary and a 50-rule grammar for step-time "
                    "benchmarks with the character proposal",
        vocab=vocab,
        lm=UniformLM(vocab),
        grammar=grammar,
        grammar_source=src,
        corpus=None,
        expensive_factory=list,
        metric=lambda tokens: 0.0,
        proposal="character",
        max_steps=30,
        enumerable=False,
    )


_FACTORIES: dict[str, Callable[[], Instance]] = {
    "ab-ba": _ab_ba,
    "a-star": _a_star,
    "nested-parens": _nested_parens,
    "toy-arithmetic": _toy_arithmetic,
    "early-filter": _early_filter,
    "free": _free,
    "perf-1k": _perf_1k,
}

_CACHE: dict[str, Instance] = {}


def instance_names() -> list[str]:
    return sorted(_FACTORIES)


def get_instance(name: str) -> Instance:
    if name not in _FACTORIES:
        raise KeyError(f"unknown instance {name!r}; bundled: {instance_names()}")
    if name not in _CACHE:
        _CACHE[name] = _FACTORIES[name]()
    return _CACHE[name]
