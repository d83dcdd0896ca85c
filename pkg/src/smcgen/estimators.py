"""Inference-quality estimation and cross-method statistical comparison.

Every estimator targets the same kind of quantity: log Z minus the KL
divergence from the method's output distribution to its target, which lower
bounds log Z and is comparable across methods sharing a target because
log Z is method-independent.

* For methods with tractable output densities (ancestral and locally
  constrained sampling), the per-run estimate is log sigma(x) - log q(x).
* For importance sampling, it is the log mean particle weight (an
  extended-state-space bound).
* For SMC, it is the log of the run's evidence estimate.

Because hard constraints make the raw KL infinite when a method can emit
zero-mass sequences, methods are also evaluated through their
rejection-sampled variants: attempts repeat until the chosen output
satisfies the constraint, and the corrected estimate is the log acceptance
rate plus the mean estimate over accepted attempts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .inference import (
    AllDeadError,
    MethodConfig,
    METHODS,
    logsumexp,
    run,
    stream,
)
from .potentials import NEG_INF, PotentialProduct
from .proposal import LocalTarget

_STREAM_ESTIMATOR = 3

# Which normalizing constant each method's weights target.
METHOD_TARGET = {
    "base-lm": "full",
    "local-decoding": "full",
    "grammar-only-is": "efficient",
    "grammar-only-smc": "efficient",
    "sample-rerank": "rerank",
    "full-is": "full",
    "full-smc": "full",
}


@dataclass
class QualityEstimate:
    point: float
    std_error: float
    runs: int
    method: str
    target: str


@dataclass
class RejectionQuality:
    method: str
    target: str
    acceptance_rate: float
    corrected: float           # log(acceptance rate) + mean accepted estimate
    accepted_mean: float
    accepted_std_error: float
    attempted: int
    accepted: int
    accepted_values: list

    @property
    def log_acceptance(self) -> float:
        return math.log(self.acceptance_rate) if self.acceptance_rate > 0 else NEG_INF


def aggregate(samples, method: str, target: str) -> QualityEstimate:
    """Mean and standard error of i.i.d. per-run estimates."""
    arr = np.asarray(samples, dtype=np.float64)
    n = len(arr)
    if n == 0:
        raise ValueError("no samples")
    if np.any(np.isneginf(arr)):
        return QualityEstimate(NEG_INF, float("nan"), n, method, target)
    se = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return QualityEstimate(float(arr.mean()), se, n, method, target)


def full_log_target(lm, efficient: PotentialProduct, expensive: PotentialProduct):
    """log sigma(x) = log p(x) + log Phi(x) on complete sequences (with EOS)."""

    def log_sigma(tokens):
        core = tokens[:-1] if tokens and tokens[-1] == lm.vocabulary.eos_id else tokens
        lp = lm.sequence_logprob(tuple(core) + (lm.vocabulary.eos_id,))
        if lp == NEG_INF:
            return NEG_INF
        phi = efficient.log_score(core, True)
        if phi == NEG_INF:
            return NEG_INF
        phi += expensive.log_score(core, True)
        return lp + phi

    return log_sigma


def ancestral_sample(lm, rng, max_steps: int):
    """Draw x ~ p_lm; returns (tokens with EOS or None if truncated, log q)."""
    eos = lm.vocabulary.eos_id
    tokens: tuple = ()
    logq = 0.0
    for _ in range(max_steps):
        lp = lm.next_distribution(tokens).logprobs
        probs = np.exp(lp)
        cdf = np.cumsum(probs)
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tok = min(tok, len(lp) - 1)
        logq += float(lp[tok])
        if tok == eos:
            return tokens + (eos,), logq
        tokens = tokens + (tok,)
    return None, logq


def local_product_sample(lm, efficient: PotentialProduct, rng, max_steps: int):
    """Draw x ~ l_eff with its exact log density (per-step sigma/L ratios)."""
    eos = lm.vocabulary.eos_id
    tokens: tuple = ()
    logq = 0.0
    for _ in range(max_steps):
        logs = LocalTarget(lm, tokens, efficient).log_scores()
        m = float(np.max(logs))
        if m == NEG_INF:
            return None, NEG_INF
        w = np.exp(logs - m)
        total = float(w.sum())
        cdf = np.cumsum(w)
        tok = int(np.searchsorted(cdf, rng.random() * total, side="right"))
        tok = min(tok, len(logs) - 1)
        logq += float(logs[tok]) - (m + math.log(total))
        if tok == eos:
            return tokens + (eos,), logq
        tokens = tokens + (tok,)
    return None, logq


def single_sample_quality(sample_fn, log_target, runs: int, seed: int,
                          method: str = "proposal", target: str = "full") -> QualityEstimate:
    """Mean of log sigma(x) - log q(x) over independent draws.

    ``sample_fn(rng) -> (tokens or None, log q)``; a draw with target mass
    zero (or a failed draw) contributes -inf, which is what motivates the
    rejection-corrected variant.
    """
    vals = []
    for r in range(runs):
        rng = stream(seed, _STREAM_ESTIMATOR, r)
        tokens, logq = sample_fn(rng)
        if tokens is None:
            vals.append(NEG_INF)
            continue
        ls = log_target(tokens)
        vals.append(ls - logq if ls > NEG_INF else NEG_INF)
    return aggregate(vals, method, target)


def k_particle_is_quality(log_weights) -> float:
    """Per-run bound: log of the mean particle weight."""
    k = len(log_weights)
    return logsumexp(list(log_weights)) - math.log(k)


def smc_quality(result) -> float:
    """Per-run bound for an SMC run: log of its evidence estimate."""
    return result.log_evidence


def choose_output(result, rng):
    """Draw the run's output sequence from its normalized posterior."""
    items = sorted(result.posterior.entries.items(), key=lambda kv: kv[0])
    weights = [w for _, w in items]
    cdf = np.cumsum(weights)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    i = min(i, len(items) - 1)
    return items[i][0]


def method_attempt(config: MethodConfig, lm, seed: int):
    """One attempt of a weighted method: (chosen tokens or None, estimate)."""
    try:
        result = run(config, lm, seed)
    except AllDeadError:
        return None, NEG_INF
    rng = stream(seed, _STREAM_ESTIMATOR, 0)
    return choose_output(result, rng), result.log_evidence


def density_method_attempt(method: str, lm, efficient, expensive, log_target,
                           max_steps: int, seed: int):
    """One attempt of a density method: a single draw plus its estimate."""
    rng = stream(seed, _STREAM_ESTIMATOR, 1)
    if method == "base-lm":
        tokens, logq = ancestral_sample(lm, rng, max_steps)
    else:
        tokens, logq = local_product_sample(lm, efficient, rng, max_steps)
    if tokens is None:
        return None, NEG_INF
    ls = log_target(tokens)
    return tokens, (ls - logq if ls > NEG_INF else NEG_INF)


def rejection_quality(attempt_fn, predicate, runs: int, budget: int,
                      seed: int, method: str = "", target: str = "full") -> RejectionQuality:
    """Rerun attempts until ``runs`` outputs satisfy the predicate.

    An attempt whose chosen output is None (or fails the predicate) is
    rejected. The corrected estimate composes the log acceptance rate with
    the mean quality estimate over accepted attempts.
    """
    accepted_vals = []
    attempted = 0
    attempt_seed = seed
    while len(accepted_vals) < runs and attempted < budget:
        chosen, estimate = attempt_fn(attempt_seed)
        attempted += 1
        attempt_seed += 1
        if chosen is not None and predicate(chosen):
            accepted_vals.append(estimate)
    n_acc = len(accepted_vals)
    rate = n_acc / attempted if attempted else 0.0
    if n_acc == 0:
        return RejectionQuality(method, target, 0.0, NEG_INF, NEG_INF,
                                float("nan"), attempted, 0, [])
    agg = aggregate(accepted_vals, method, target)
    log_rate = math.log(rate)
    corrected = log_rate + agg.point if agg.point > NEG_INF else NEG_INF
    return RejectionQuality(method, target, rate, corrected, agg.point,
                            agg.std_error, attempted, n_acc, accepted_vals)


def method_quality(instance, method: str, runs: int, seed: int,
                   n_particles: int = 10, rejection: bool = True,
                   budget_factor: int = 50, **config_overrides):
    """Per-run quality estimates for one method on one bundled instance.

    Returns (per-run estimates over accepted attempts, RejectionQuality).
    With ``rejection=False`` the attempts are not filtered (every attempt
    counts, -inf included).
    """
    lm = instance.lm
    efficient = instance.efficient()
    expensive = instance.expensive()
    log_target = full_log_target(lm, efficient, expensive)
    target = METHOD_TARGET[method]

    if method in ("base-lm", "local-decoding"):
        def attempt(s):
            return density_method_attempt(method, lm, efficient, expensive,
                                          log_target, instance.max_steps, s)
    else:
        config = instance.method_config(method, n_particles=n_particles,
                                        **config_overrides)

        def attempt(s):
            return method_attempt(config, lm, s)

    def satisfies(tokens):
        return log_target(tokens) > NEG_INF

    predicate = satisfies if rejection else (lambda tokens: True)
    rq = rejection_quality(attempt, predicate, runs, budget_factor * runs,
                           seed, method=method, target=target)
    return rq.accepted_values, rq


@dataclass
class WelchReport:
    t_stat: float
    p_value: float
    band: str          # "***", "**", "ns", or "identical"
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def compare_methods(samples_a, samples_b, min_runs: int = 30) -> WelchReport:
    """Welch two-sample t test with the significance banding of the report.

    Bands: *** for p < 0.001, ** for p < 0.01, otherwise ns. Two zero-
    variance samples with equal means report "identical".
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) < min_runs or len(b) < min_runs:
        raise ValueError(f"need at least {min_runs} runs per method")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if a.mean() == b.mean():
            return WelchReport(0.0, 1.0, "identical", float(a.mean()),
                               float(b.mean()), len(a), len(b))
        return WelchReport(math.inf, 0.0, "***", float(a.mean()),
                           float(b.mean()), len(a), len(b))
    t_stat, p_value = stats.ttest_ind(a, b, equal_var=False)
    if p_value < 0.001:
        band = "***"
    elif p_value < 0.01:
        band = "**"
    else:
        band = "ns"
    return WelchReport(float(t_stat), float(p_value), band,
                       float(a.mean()), float(b.mean()), len(a), len(b))
