"""Properly weighted next-token proposals.

Two routes to the same local target sigma(x') = p_lm(x'|ctx) * Phi_eff(x'|ctx):

* ``exact_local_step`` evaluates sigma over the whole vocabulary, samples
  proportionally, and reports the local normalizer L = sum sigma exactly.
* ``character_proposal`` walks the token trie byte by byte, steering by the
  product of LM mass ratios and grammar byte validity, collects every
  end-of-token marker passed into a candidate set with Horvitz-Thompson
  local weights sigma(x)/inclusion(x), and returns a token from the set
  together with the set's total weight. The pair (token, set weight) is
  properly weighted for the unnormalized local target, so it can replace
  the exact step inside SMC without changing the intermediate targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .potentials import NEG_INF, CFGPotential, PotentialProduct
from .trie import TokenTrie, compute_mass


class DeadEndError(RuntimeError):
    """The local target assigns zero mass to every continuation."""


@dataclass
class WeightedToken:
    """A sampled next token with its log set weight (log L for the exact step).

    ``token`` is None for a zero-weight outcome (dead-end walk), in which
    case ``log_set_weight`` is -inf. ``trace`` optionally records the walk.
    """

    token: int | None
    log_set_weight: float
    trace: dict | None = None


@dataclass
class LocalTarget:
    """Context-conditional unnormalized target over the next token."""

    lm: object
    context: tuple
    efficient: PotentialProduct

    def log_scores(self) -> np.ndarray:
        """log sigma(x') for every x' in the vocabulary (EOS included)."""
        lp = self.lm.next_distribution(self.context).logprobs
        if not len(self.efficient):
            return lp
        out = np.array(lp, copy=True)
        eos = self.lm.vocabulary.eos_id
        for x in range(len(out)):
            if out[x] == NEG_INF:
                continue
            out[x] += self.efficient.conditional_log_score(self.context, x, eos)
        return out


def _sample_index(weights, total, rng) -> int:
    """Inverse-CDF draw from unnormalized nonnegative weights."""
    u = rng.random() * total
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1  # guard against accumulated rounding


def exact_local_step(target: LocalTarget, rng) -> WeightedToken:
    """Sample x' proportional to sigma and return log L deterministically.

    Raises DeadEndError when L = 0; callers turn that into a zero-weight
    particle.
    """
    logs = target.log_scores()
    m = float(np.max(logs))
    if m == NEG_INF:
        raise DeadEndError(f"no continuation of {target.context!r} has positive mass")
    w = np.exp(logs - m)
    total = float(w.sum())
    log_l = m + math.log(total)
    tok = _sample_index(w, total, rng)
    return WeightedToken(int(tok), log_l)


def _single_cfg(efficient: PotentialProduct) -> CFGPotential:
    if len(efficient) != 1 or not isinstance(efficient.members[0], CFGPotential):
        raise ValueError(
            "character proposal requires exactly one byte-level CFG potential"
        )
    return efficient.members[0]


def character_proposal(target: LocalTarget, trie: TokenTrie, rng,
                       debug: bool = False) -> WeightedToken:
    """Set-based trie-walk proposal for a single grammar potential.

    Walks the trie sampling bytes proportional to mass(child) * byte
    validity; every end-of-token node passed joins the candidate set with
    local weight sigma(token)/inclusion(token). EOS joins at the root with
    inclusion 1 (weight p(eos|ctx) when the grammar accepts the context as
    complete). Returns the chosen token and the log of the set's total
    weight; a dead-end walk with an empty set yields a zero-weight outcome.
    """
    cfg = _single_cfg(target.efficient)
    vocab = target.lm.vocabulary
    dist = target.lm.next_distribution(target.context)
    mass = compute_mass(trie, dist)
    state = cfg.state(target.context)
    trace = {"path": [], "qbar": [], "step_q": [], "iota": [], "set": []} if debug else None
    if not state.is_valid_prefix:
        return WeightedToken(None, NEG_INF, trace)
    tokens: list[int] = []
    weights: list[float] = []
    allowed, eos_ok = state.allowed_next_bytes()
    if eos_ok:
        p_eos = mass.eot_mass(0)
        if p_eos > 0.0:
            tokens.append(vocab.eos_id)
            weights.append(p_eos)
    node = 0
    iota = 1.0
    while True:
        if node != 0:
            tok = int(trie.token_at[node])
            if tok >= 0:
                w = mass.eot_mass(node) / iota
                if w > 0.0:
                    tokens.append(tok)
                    weights.append(w)
        bytes_, kids = trie.children_of(node)
        qbar = [float(mass.node_mass[k]) if b in allowed else 0.0
                for b, k in zip(bytes_, kids)]
        q_total = sum(qbar)
        if q_total <= 0.0:
            break
        pick = _sample_index(qbar, q_total, rng)
        step_q = qbar[pick] / q_total
        iota *= step_q
        byte = int(bytes_[pick])
        state = state.advance(byte)
        allowed, _eos_ok = state.allowed_next_bytes()
        node = int(kids[pick])
        if debug:
            trace["path"].append(byte)
            trace["qbar"].append([q / q_total for q in qbar])
            trace["step_q"].append(step_q)
            trace["iota"].append(iota)
    total = sum(weights)
    if not tokens or total <= 0.0:
        return WeightedToken(None, NEG_INF, trace)
    pick = _sample_index(weights, total, rng)
    if debug:
        trace["set"] = [
            {"token": t, "log_local_weight": math.log(w)}
            for t, w in zip(tokens, weights)
        ]
        trace["chosen"] = tokens[pick]
    return WeightedToken(tokens[pick], math.log(total), trace)
