"""Exhaustive-enumeration oracle for small instances.

Walks every token prefix up to a length cap, pruning prefixes the efficient
potentials already kill, and accumulates the normalizing constants of the
targets the different methods aim at, the exact posterior of the full
product of experts, and the local normalizer of every surviving prefix.
A bound on the probability mass lost to the cap is reported alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .potentials import NEG_INF, PotentialProduct


class EnumerationCapError(RuntimeError):
    """The instance is too large for exhaustive enumeration."""


@dataclass
class InstanceOracle:
    max_len: int                 # max total tokens per sequence, EOS included
    z: float                     # sum p(x) * Phi_all(x) over complete x
    z_efficient: float           # sum p(x) * Phi_eff(x)
    z_rerank: float              # sum l_eff(x) * Phi_exp(x)
    posterior: dict              # complete tokens (with EOS) -> normalized prob
    local_normalizers: dict      # prefix tokens -> L under the efficient target
    truncation_bound: float      # upper bound on full-target mass beyond the cap

    @property
    def log_z(self) -> float:
        return math.log(self.z) if self.z > 0 else NEG_INF

    @property
    def log_z_efficient(self) -> float:
        return math.log(self.z_efficient) if self.z_efficient > 0 else NEG_INF

    @property
    def log_z_rerank(self) -> float:
        return math.log(self.z_rerank) if self.z_rerank > 0 else NEG_INF

    def log_z_for_target(self, target: str) -> float:
        return {"full": self.log_z,
                "efficient": self.log_z_efficient,
                "rerank": self.log_z_rerank}[target]


def enumerate_instance(lm, efficient: PotentialProduct, expensive: PotentialProduct,
                       max_len: int, node_budget: int = 2_000_000) -> InstanceOracle:
    """Enumerate all complete sequences of total length <= max_len."""
    eos = lm.vocabulary.eos_id
    vocab_ids = range(lm.vocabulary.size)
    bound_factor = math.exp(efficient.log_bound + expensive.log_bound)

    z_full = 0.0
    z_eff = 0.0
    z_rerank = 0.0
    unnormalized: dict = {}
    local_normalizers: dict = {}
    truncation = 0.0
    visited = 0

    # stack entries: (prefix, log p(prefix), log l_eff(prefix)); recursion
    # continues through expensive-dead prefixes because the efficient-only
    # target still counts their completions
    stack = [((), 0.0, 0.0)]
    while stack:
        prefix, logp, logl = stack.pop()
        visited += 1
        if visited > node_budget:
            raise EnumerationCapError(
                f"enumeration exceeded {node_budget} prefixes at cap {max_len}"
            )
        lp = lm.next_distribution(prefix).logprobs
        # local scores under the efficient target
        sigma = np.full(len(lp), NEG_INF)
        for x in vocab_ids:
            if lp[x] == NEG_INF:
                continue
            cond = efficient.conditional_log_score(prefix, x, eos)
            if cond > NEG_INF:
                sigma[x] = lp[x] + cond
        m = float(np.max(sigma))
        l_value = math.exp(m) * float(np.exp(sigma - m).sum()) if m > NEG_INF else 0.0
        local_normalizers[prefix] = l_value

        # the complete sequence prefix + eos
        if sigma[eos] > NEG_INF:
            logp_y = logp + float(lp[eos])
            eff_complete = efficient.log_score(prefix, True)
            contrib_eff = math.exp(logp_y + eff_complete)
            z_eff += contrib_eff
            exp_complete = expensive.log_score(prefix, True)
            if exp_complete > NEG_INF:
                w_full = math.exp(logp_y + eff_complete + exp_complete)
                z_full += w_full
                if w_full > 0.0:
                    unnormalized[prefix + (eos,)] = w_full
                if l_value > 0.0:
                    logl_y = logl + float(sigma[eos]) - math.log(l_value)
                    z_rerank += math.exp(logl_y + exp_complete)

        # recurse into longer prefixes
        for x in vocab_ids:
            if x == eos or sigma[x] == NEG_INF:
                continue
            child_logp = logp + float(lp[x])
            if len(prefix) + 1 > max_len - 1:
                truncation += math.exp(child_logp) * bound_factor
                continue
            child_logl = logl + float(sigma[x]) - math.log(l_value)
            stack.append((prefix + (x,), child_logp, child_logl))

    total = sum(unnormalized.values())
    posterior = {k: v / total for k, v in unnormalized.items()} if total > 0 else {}
    return InstanceOracle(
        max_len=max_len,
        z=z_full,
        z_efficient=z_eff,
        z_rerank=z_rerank,
        posterior=posterior,
        local_normalizers=local_normalizers,
        truncation_bound=truncation,
    )
