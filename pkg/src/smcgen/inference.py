"""Particle engine: importance sampling and SMC over weighted token sequences.

A run repeatedly extends every live incomplete particle by one token (or by
one semantic unit), folds the proposal's local normalizer and the expensive
potentials' one-step score ratios into the particle weights, and optionally
resamples when the effective sample size drops below a threshold fraction
of N. Weights live in log space throughout. The mean final particle weight
is the run's evidence estimate: resampling resets weights to W/N, which
preserves the total and makes the final average equal the product over
resampling epochs of mean incremental weights.

Seven method configurations share this loop; they differ in whether the
proposal sees the efficient potentials, whether local-normalizer weight
corrections are applied, how the expensive potentials enter (never,
incrementally, or once on complete sequences), and whether resampling is
on. Runs are reproducible: every proposal call draws from a counter-based
stream keyed by (seed, particle lineage, step, substep), so results do not
depend on worker scheduling.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .potentials import EVERY_TOKEN, NEG_INF, PotentialProduct, SemanticUnit
from .proposal import (
    DeadEndError,
    LocalTarget,
    character_proposal,
    exact_local_step,
)
from .trie import build_trie

_STREAM_PROPOSAL = 0
_STREAM_RESAMPLE = 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for a (seed, namespace...) key."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def logsumexp(values) -> float:
    m = max(values) if len(values) else NEG_INF
    if m == NEG_INF:
        return NEG_INF
    return float(m) + math.log(sum(math.exp(v - m) for v in values))


METHOD_BASE_LM = "base-lm"
METHOD_LOCAL_DECODING = "local-decoding"
METHOD_GRAMMAR_ONLY_IS = "grammar-only-is"
METHOD_GRAMMAR_ONLY_SMC = "grammar-only-smc"
METHOD_SAMPLE_RERANK = "sample-rerank"
METHOD_FULL_IS = "full-is"
METHOD_FULL_SMC = "full-smc"


@dataclass(frozen=True)
class MethodTraits:
    use_efficient: bool     # proposal samples the local product of experts
    correction: bool        # local normalizers enter the weights
    expensive: str          # "none" | "incremental" | "final"
    resample: bool


METHODS: dict[str, MethodTraits] = {
    METHOD_BASE_LM: MethodTraits(False, False, "none", False),
    METHOD_LOCAL_DECODING: MethodTraits(True, False, "none", False),
    METHOD_GRAMMAR_ONLY_IS: MethodTraits(True, True, "none", False),
    METHOD_GRAMMAR_ONLY_SMC: MethodTraits(True, True, "none", True),
    METHOD_SAMPLE_RERANK: MethodTraits(True, False, "final", False),
    METHOD_FULL_IS: MethodTraits(True, True, "incremental", False),
    METHOD_FULL_SMC: MethodTraits(True, True, "incremental", True),
}

UNIT_TOKEN = "token"
UNIT_LINE = "line"


@dataclass
class MethodConfig:
    method: str
    efficient: PotentialProduct = field(default_factory=PotentialProduct)
    expensive: PotentialProduct = field(default_factory=PotentialProduct)
    proposal: str = "exact"  # "exact" | "character"
    n_particles: int = 10
    unit: str = UNIT_TOKEN
    max_steps: int = 256
    ess_threshold_fraction: float = 1.0 / 3.0
    freeze_completed: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(
                f"unknown method {self.method!r}; valid: {sorted(METHODS)}"
            )
        if self.proposal not in ("exact", "character"):
            raise ValueError("proposal must be 'exact' or 'character'")
        if self.unit not in (UNIT_TOKEN, UNIT_LINE):
            raise ValueError("unit must be 'token' or 'line'")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0 < self.ess_threshold_fraction <= 1:
            raise ValueError("ess_threshold_fraction must be in (0, 1]")


@dataclass
class Particle:
    """One weighted sequence. ``tokens`` ends with EOS iff ``complete``."""

    tokens: tuple
    log_weight: float
    complete: bool
    lineage: int
    pending: float = 0.0          # sum of log set weights from the last extension
    pending_start: int | None = None  # token count before the last extension

    @property
    def dead(self) -> bool:
        return self.log_weight == NEG_INF

    def core_tokens(self) -> tuple:
        return self.tokens[:-1] if self.complete else self.tokens


@dataclass
class StepDiagnostics:
    step: int
    ess: float
    resampled: bool
    log_mean_weight: float
    wall_clock: float


@dataclass
class ParticleSystem:
    particles: list
    seed: int
    ess_threshold_fraction: float
    step: int = 0
    next_lineage: int = 0
    resample_count: int = 0
    diagnostics: list = field(default_factory=list)


class AllDeadError(RuntimeError):
    """Every particle reached weight zero; carries partial diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


def ess(weights) -> float:
    """Effective sample size (sum w)^2 / sum w^2 of nonnegative weights."""
    w = np.asarray(weights, dtype=np.float64)
    s2 = float((w * w).sum())
    if s2 == 0.0:
        return 0.0
    s = float(w.sum())
    return s * s / s2


def log_ess(log_weights) -> float:
    lse1 = logsumexp(log_weights)
    if lse1 == NEG_INF:
        return 0.0
    lse2 = logsumexp([2.0 * lw for lw in log_weights])
    return math.exp(2.0 * lse1 - lse2)


def _boundary_hit(token_bytes: bytes) -> bool:
    return b"\n" in token_bytes


class Engine:
    """Binds a method configuration to a model and runs particle systems."""

    def __init__(self, config: MethodConfig, lm):
        self.config = config
        self.lm = lm
        self.traits = METHODS[config.method]
        self.efficient = config.efficient if self.traits.use_efficient else PotentialProduct()
        self.expensive = config.expensive
        self.trie = build_trie(lm.vocabulary) if config.proposal == "character" else None
        self._pool = None

    def _propose(self, context, rng):
        target = LocalTarget(self.lm, context, self.efficient)
        if self.trie is not None and len(self.efficient):
            return character_proposal(target, self.trie, rng)
        return exact_local_step(target, rng)

    def _extend_one(self, particle: Particle, step: int, seed: int) -> Particle:
        """Extend by one token, or up to the next unit boundary / EOS."""
        eos = self.lm.vocabulary.eos_id
        tokens = particle.tokens
        pending = 0.0
        start = len(tokens)
        complete = False
        sub = 0
        while True:
            rng = stream(seed, _STREAM_PROPOSAL, particle.lineage, step, sub)
            try:
                wt = self._propose(tokens, rng)
            except DeadEndError:
                return replace(particle, log_weight=NEG_INF,
                               pending=0.0, pending_start=None)
            if wt.token is None:
                return replace(particle, log_weight=NEG_INF,
                               pending=0.0, pending_start=None)
            pending += wt.log_set_weight
            if wt.token == eos:
                tokens = tokens + (eos,)
                complete = True
                break
            tokens = tokens + (wt.token,)
            if self.config.unit == UNIT_TOKEN:
                break
            if len(tokens) >= self.config.max_steps:
                break
            if _boundary_hit(self.lm.vocabulary.token_bytes[wt.token]):
                break
            sub += 1
        return replace(particle, tokens=tokens, complete=complete,
                       pending=pending, pending_start=start)

    def extend_step(self, system: ParticleSystem) -> ParticleSystem:
        """Extend every live incomplete particle; others pass through."""
        step = system.step
        seed = system.seed
        todo = [i for i, p in enumerate(system.particles)
                if not p.complete and not p.dead]
        if self.config.workers > 1:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.config.workers)
            results = list(self._pool.map(
                lambda i: self._extend_one(system.particles[i], step, seed), todo))
        else:
            results = [self._extend_one(system.particles[i], step, seed) for i in todo]
        for i, p in zip(todo, results):
            system.particles[i] = p
        return system

    def reweight_step(self, system: ParticleSystem) -> ParticleSystem:
        """Fold pending proposal factors and expensive score ratios into weights."""
        incremental = self.traits.expensive == "incremental" and len(self.expensive)
        for i, p in enumerate(system.particles):
            if p.pending_start is None or p.dead:
                continue
            inc = p.pending if self.traits.correction else 0.0
            if inc != NEG_INF and incremental:
                old = p.tokens[:p.pending_start]
                base = self.expensive.log_score(old, False)
                if base == NEG_INF:
                    inc = NEG_INF
                else:
                    inc += self.expensive.log_score(p.core_tokens(), p.complete) - base
            system.particles[i] = replace(
                p, log_weight=p.log_weight + inc, pending=0.0, pending_start=None
            )
        return system

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def resample_multinomial(system: ParticleSystem, rng) -> ParticleSystem:
    """Draw N ancestors i.i.d. proportional to weights; reset weights to W/N.

    Requires positive total weight. Dead particles have selection
    probability zero; lineage ids are refreshed on the clones.
    """
    logws = [p.log_weight for p in system.particles]
    log_w_total = logsumexp(logws)
    if log_w_total == NEG_INF:
        raise AllDeadError("cannot resample: total weight is zero",
                           system.diagnostics)
    n = len(system.particles)
    probs = np.exp(np.asarray(logws) - log_w_total)
    probs = probs / probs.sum()
    cdf = np.cumsum(probs)
    draws = rng.random(n)
    ancestors = np.searchsorted(cdf, draws, side="right")
    ancestors = np.minimum(ancestors, n - 1)
    new_log_w = log_w_total - math.log(n)
    new_particles = []
    for i in range(n):
        a = system.particles[int(ancestors[i])]
        new_particles.append(replace(a, log_weight=new_log_w,
                                     lineage=system.next_lineage + i))
    system.particles = new_particles
    system.next_lineage += n
    system.resample_count += 1
    return system


def _resample_incomplete_only(system: ParticleSystem, rng) -> ParticleSystem:
    """Experimental variant: completed particles are frozen out of resampling."""
    idx = [i for i, p in enumerate(system.particles) if not p.complete]
    logws = [system.particles[i].log_weight for i in idx]
    log_w_total = logsumexp(logws)
    if log_w_total == NEG_INF or not idx:
        return system
    k = len(idx)
    probs = np.exp(np.asarray(logws) - log_w_total)
    probs = probs / probs.sum()
    cdf = np.cumsum(probs)
    ancestors = np.minimum(np.searchsorted(cdf, rng.random(k), side="right"), k - 1)
    new_log_w = log_w_total - math.log(k)
    for slot, anc in zip(idx, ancestors):
        a = system.particles[idx[int(anc)]]
        system.particles[slot] = replace(a, log_weight=new_log_w,
                                         lineage=system.next_lineage)
        system.next_lineage += 1
    system.resample_count += 1
    return system


def maybe_resample(system: ParticleSystem, rng, freeze_completed: bool = False) -> bool:
    """Resample iff ESS is strictly below threshold_fraction * N."""
    n = len(system.particles)
    current = log_ess([p.log_weight for p in system.particles])
    if current < system.ess_threshold_fraction * n:
        if freeze_completed:
            _resample_incomplete_only(system, rng)
        else:
            resample_multinomial(system, rng)
        return True
    return False


@dataclass
class PosteriorApproximation:
    """Normalized weights over complete sequences (tokens include EOS)."""

    entries: dict

    def tv_distance(self, exact: dict) -> float:
        keys = set(self.entries) | set(exact)
        return 0.5 * sum(abs(self.entries.get(k, 0.0) - exact.get(k, 0.0))
                         for k in keys)


@dataclass
class RunResult:
    posterior: PosteriorApproximation
    log_evidence: float
    particles: list
    diagnostics: list
    seed: int
    n_truncated: int
    resample_count: int


def run(config: MethodConfig, lm, seed: int) -> RunResult:
    """Execute one particle run; raises AllDeadError if no mass survives."""
    traits = METHODS[config.method]
    engine = Engine(config, lm)
    n = config.n_particles
    system = ParticleSystem(
        particles=[Particle((), 0.0, False, i) for i in range(n)],
        seed=seed,
        ess_threshold_fraction=config.ess_threshold_fraction,
        next_lineage=n,
    )
    n_truncated = 0
    try:
        while any(not p.complete and not p.dead for p in system.particles):
            system.step += 1
            t0 = time.perf_counter()
            engine.extend_step(system)
            engine.reweight_step(system)
            for i, p in enumerate(system.particles):
                if not p.complete and not p.dead and len(p.tokens) >= config.max_steps:
                    system.particles[i] = replace(p, log_weight=NEG_INF)
                    n_truncated += 1
            logws = [p.log_weight for p in system.particles]
            if logsumexp(logws) == NEG_INF:
                system.diagnostics.append(StepDiagnostics(
                    system.step, 0.0, False, NEG_INF, time.perf_counter() - t0))
                raise AllDeadError(
                    f"all particles dead at step {system.step}", system.diagnostics
                )
            ess_val = log_ess(logws)
            resampled = False
            if traits.resample:
                rng = stream(seed, _STREAM_RESAMPLE, system.step)
                resampled = maybe_resample(system, rng, config.freeze_completed)
            log_mean_w = logsumexp([p.log_weight for p in system.particles]) - math.log(n)
            system.diagnostics.append(StepDiagnostics(
                system.step, ess_val, resampled, log_mean_w,
                time.perf_counter() - t0))
    finally:
        engine.close()
    if traits.expensive == "final" and len(config.expensive):
        for i, p in enumerate(system.particles):
            if p.dead or not p.complete:
                continue
            extra = config.expensive.log_score(p.core_tokens(), True)
            system.particles[i] = replace(p, log_weight=p.log_weight + extra)
    final_logws = [p.log_weight for p in system.particles]
    log_evidence = logsumexp(final_logws) - math.log(n)
    if log_evidence == NEG_INF:
        raise AllDeadError("no surviving complete particles", system.diagnostics)
    entries: dict = {}
    for p in system.particles:
        if p.complete and not p.dead:
            entries[p.tokens] = entries.get(p.tokens, 0.0) + math.exp(
                p.log_weight - log_evidence - math.log(n))
    total = sum(entries.values())
    entries = {k: v / total for k, v in entries.items()}
    return RunResult(
        posterior=PosteriorApproximation(entries),
        log_evidence=log_evidence,
        particles=system.particles,
        diagnostics=system.diagnostics,
        seed=seed,
        n_truncated=n_truncated,
        resample_count=system.resample_count,
    )


@dataclass
class GroupScore:
    key: object
    mass: float
    score: float


def group_and_score(posterior: PosteriorApproximation, equivalence, metric):
    """Group sequences by an equivalence key and sum their normalized weights.

    ``metric`` scores one representative sequence per group (equivalent
    sequences are assumed to score equally). Results are ordered by
    descending mass, ties broken by key string.
    """
    masses: dict = {}
    reps: dict = {}
    for tokens, w in posterior.entries.items():
        k = equivalence(tokens)
        masses[k] = masses.get(k, 0.0) + w
        reps.setdefault(k, tokens)
    out = [GroupScore(k, masses[k], float(metric(reps[k]))) for k in masses]
    out.sort(key=lambda g: (-g.mass, str(g.key)))
    return out


def pearson(xs, ys) -> float:
    """Pearson correlation by the standard formula."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        raise ValueError("zero variance input")
    return float((xc * yc).sum()) / denom
