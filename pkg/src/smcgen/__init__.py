"""Sequential Monte Carlo sampling from products of experts over LMs."""

from .grammar import Grammar, GrammarError, Recognizer, init_recognizer, parse_grammar
from .inference import (
    AllDeadError,
    MethodConfig,
    Particle,
    ParticleSystem,
    PosteriorApproximation,
    RunResult,
    ess,
    group_and_score,
    maybe_resample,
    pearson,
    resample_multinomial,
    run,
)
from .lm import (
    LanguageModel,
    NgramLM,
    RemoteLM,
    TableLM,
    TokenDistribution,
    UniformLM,
    Vocabulary,
    train_ngram,
)
from .oracle import InstanceOracle, enumerate_instance
from .potentials import (
    CFGPotential,
    CheckedEvalPotential,
    Potential,
    PotentialProduct,
    cfg_potential,
    checked_eval_potential,
)
from .proposal import (
    DeadEndError,
    LocalTarget,
    WeightedToken,
    character_proposal,
    exact_local_step,
)
from .trie import MassMap, TokenTrie, build_trie, compute_mass

__version__ = "0.1.0"
