"""Autoregressive language models over byte-decoded token vocabularies.

Tokens are dense integer ids. Each non-EOS token decodes to a nonempty byte
string; a distinguished EOS id marks the end of a complete sequence and has
no byte decoding. Two concrete models are provided: a trainable byte-level
n-gram reference model and a client for a remote next-token log-probability
service. All probabilities are kept in natural-log space.
"""

from __future__ import annotations

import json
import math
import threading
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-9
RENORM_WARN_TOL = 1e-3


class HorizonError(ValueError):
    """Context longer than the model supports."""


class TrainingCoverageError(LookupError):
    """Unsmoothed n-gram queried on a context never seen in training."""


class RemoteLMError(RuntimeError):
    """Base class for remote log-probability client failures."""


class RemoteTransportError(RemoteLMError):
    """Network-level failure talking to the endpoint."""


class MalformedResponseError(RemoteLMError):
    """Endpoint returned something that is not the expected JSON payload."""


class VocabularyMismatchError(RemoteLMError):
    """Endpoint returned the wrong number of log-probabilities."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids 0..n with byte decodings, plus one EOS id.

    ``token_bytes[i]`` is the byte string of token ``i``; the EOS slot is
    empty. EOS is not part of the byte-decoded token set.
    """

    token_bytes: tuple[bytes, ...]
    eos_id: int

    def __post_init__(self):
        n = len(self.token_bytes)
        if not 0 <= self.eos_id < n:
            raise ValueError(f"eos_id {self.eos_id} outside dense id range 0..{n - 1}")
        if self.token_bytes[self.eos_id] != b"":
            raise ValueError("EOS must not carry a byte decoding")
        for i, bs in enumerate(self.token_bytes):
            if i != self.eos_id and len(bs) == 0:
                raise ValueError(f"token {i} decodes to an empty byte sequence")

    @property
    def size(self) -> int:
        """Number of ids including EOS."""
        return len(self.token_bytes)

    def non_eos_ids(self) -> list[int]:
        return [i for i in range(self.size) if i != self.eos_id]

    def decode(self, tokens) -> bytes:
        return b"".join(self.token_bytes[t] for t in tokens)

    @classmethod
    def from_bytes(cls, alphabet: bytes) -> "Vocabulary":
        """One token per distinct byte, EOS appended last."""
        seen = sorted(set(alphabet))
        return cls(tuple(bytes([b]) for b in seen) + (b"",), eos_id=len(seen))

    @classmethod
    def from_strings(cls, tokens) -> "Vocabulary":
        """Vocabulary of explicit (possibly multi-byte) tokens, EOS last."""
        enc = tuple(t.encode("utf-8") if isinstance(t, str) else bytes(t) for t in tokens)
        return cls(enc + (b"",), eos_id=len(enc))


class TokenDistribution:
    """Natural-log probabilities over the full id range A ∪ {eos}."""

    __slots__ = ("logprobs",)

    def __init__(self, logprobs, validate: bool = True):
        lp = np.asarray(logprobs, dtype=np.float64)
        if validate:
            if lp.ndim != 1:
                raise ValueError("logprobs must be a vector")
            if np.any(lp > 1e-12):
                raise ValueError("log-probabilities must be <= 0")
            total = np.exp(lp).sum()
            if abs(total - 1.0) > PROB_TOL:
                raise ValueError(f"probabilities sum to {total}, not 1 within {PROB_TOL}")
        self.logprobs = lp

    def __len__(self) -> int:
        return len(self.logprobs)

    def prob(self, token: int) -> float:
        return float(np.exp(self.logprobs[token]))


class LanguageModel:
    """Deterministic conditional distribution over the next token.

    Subclasses implement ``_conditional(context) -> np.ndarray`` of log
    probabilities over the full vocabulary. ``horizon``, when set, bounds
    the usable context length.
    """

    def __init__(self, vocabulary: Vocabulary, horizon: int | None = None):
        self.vocabulary = vocabulary
        self.horizon = horizon

    def _conditional(self, context: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def next_distribution(self, context) -> TokenDistribution:
        context = tuple(context)
        if self.vocabulary.eos_id in context:
            raise ValueError("context must not contain EOS")
        if self.horizon is not None and len(context) > self.horizon:
            raise HorizonError(
                f"context length {len(context)} exceeds model horizon {self.horizon}"
            )
        return TokenDistribution(self._conditional(context), validate=False)

    def sequence_logprob(self, tokens) -> float:
        """Log-probability of a sequence; a prefix probability if no EOS.

        At most one EOS is allowed and only in final position.
        """
        tokens = tuple(tokens)
        eos = self.vocabulary.eos_id
        if eos in tokens[:-1]:
            raise ValueError("EOS may only appear at the end of a sequence")
        total = 0.0
        for t, tok in enumerate(tokens):
            total += float(self.next_distribution(tokens[:t]).logprobs[tok])
        return total


class UniformLM(LanguageModel):
    """Every token (including EOS) equally likely in every context."""

    def __init__(self, vocabulary: Vocabulary, horizon: int | None = None):
        super().__init__(vocabulary, horizon)
        self._lp = np.full(vocabulary.size, -math.log(vocabulary.size))

    def _conditional(self, context):
        return self._lp


class TableLM(LanguageModel):
    """Context-independent distribution given as an explicit table.

    Useful for synthetic instances where exact next-token probabilities
    matter more than any training story.
    """

    def __init__(self, vocabulary: Vocabulary, probs, horizon: int | None = None):
        super().__init__(vocabulary, horizon)
        p = np.asarray(probs, dtype=np.float64)
        if len(p) != vocabulary.size:
            raise ValueError("probability table must cover the full vocabulary")
        if abs(p.sum() - 1.0) > PROB_TOL or np.any(p < 0):
            raise ValueError("probability table must be a distribution")
        with np.errstate(divide="ignore"):
            self._lp = np.log(p)

    def _conditional(self, context):
        return self._lp


SERIAL_FORMAT = "smcgen-ngram"
SERIAL_VERSION = 1


class NgramLM(LanguageModel):
    """Byte-level additive-smoothed n-gram model.

    An order-k model conditions on the previous k-1 tokens. Near the start
    of a document fewer tokens are available, so training and querying both
    use the full (shorter) available context there; an empty context
    therefore reproduces the document-start distribution. Conditionals are
    (count + smoothing) / (context_count + smoothing * vocabulary_size),
    where vocabulary_size counts EOS.
    """

    def __init__(self, vocabulary, order, smoothing, counts, context_totals,
                 doc_delimiter=b"\n"):
        super().__init__(vocabulary, horizon=None)
        self.order = order
        self.smoothing = float(smoothing)
        self.counts = counts  # context tuple -> np.ndarray over vocab ids
        self.context_totals = context_totals  # context tuple -> int
        self.doc_delimiter = doc_delimiter
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()

    def _conditional(self, context):
        key = context[max(0, len(context) - (self.order - 1)):]
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        counts = self.counts.get(key)
        if counts is None:
            if self.smoothing == 0.0:
                raise TrainingCoverageError(
                    f"context {key!r} unseen in training and smoothing is 0"
                )
            counts = np.zeros(self.vocabulary.size)
        total = self.context_totals.get(key, 0)
        denom = total + self.smoothing * self.vocabulary.size
        if denom == 0.0:
            raise TrainingCoverageError(
                f"context {key!r} unseen in training and smoothing is 0"
            )
        with np.errstate(divide="ignore"):
            lp = np.log((counts + self.smoothing) / denom)
        with self._lock:
            self._cache[key] = lp
        return lp

    def save(self, path) -> None:
        """Write the versioned JSON count table; the output is byte-stable."""
        items = []
        for ctx in sorted(self.counts):
            vec = self.counts[ctx]
            items.append([list(ctx), [int(c) for c in vec]])
        payload = {
            "format": SERIAL_FORMAT,
            "version": SERIAL_VERSION,
            "order": self.order,
            "smoothing": self.smoothing,
            "doc_delimiter": self.doc_delimiter.decode("latin-1"),
            "eos_id": self.vocabulary.eos_id,
            "tokens": [tb.decode("latin-1") for tb in self.vocabulary.token_bytes],
            "counts": items,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "NgramLM":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != SERIAL_FORMAT:
            raise ValueError(f"not a {SERIAL_FORMAT} file")
        if payload.get("version") != SERIAL_VERSION:
            raise ValueError(f"unsupported version {payload.get('version')}")
        vocab = Vocabulary(
            tuple(t.encode("latin-1") for t in payload["tokens"]),
            eos_id=payload["eos_id"],
        )
        counts = {}
        totals = {}
        for ctx, vec in payload["counts"]:
            key = tuple(ctx)
            arr = np.asarray(vec, dtype=np.float64)
            counts[key] = arr
            totals[key] = int(arr.sum())
        return cls(vocab, payload["order"], payload["smoothing"], counts, totals,
                   payload["doc_delimiter"].encode("latin-1"))


def train_ngram(corpus, order: int, smoothing: float, vocab: Vocabulary | None = None,
                doc_delimiter: bytes = b"\n") -> NgramLM:
    """Train a byte-level n-gram model on newline-delimited documents.

    Tokenization is one byte per token; each document contributes an EOS at
    its end. ``vocab`` defaults to the byte set of the corpus. With
    smoothing 0, querying a context never observed in training raises
    TrainingCoverageError at query time.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    data = corpus.encode("utf-8") if isinstance(corpus, str) else bytes(corpus)
    if not data:
        raise ValueError("corpus is empty")
    docs = [d for d in data.split(doc_delimiter) if d]
    if not docs:
        raise ValueError("corpus contains no nonempty documents")
    if vocab is None:
        vocab = Vocabulary.from_bytes(b"".join(docs))
    byte_to_id = {}
    for i, bs in enumerate(vocab.token_bytes):
        if i != vocab.eos_id:
            if len(bs) != 1:
                raise ValueError("n-gram training requires a single-byte vocabulary")
            byte_to_id[bs[0]] = i
    counts: dict[tuple[int, ...], np.ndarray] = {}
    totals: dict[tuple[int, ...], int] = {}
    for doc in docs:
        try:
            ids = [byte_to_id[b] for b in doc]
        except KeyError as exc:
            raise ValueError(f"corpus byte {exc.args[0]!r} not in vocabulary") from None
        seq = ids + [vocab.eos_id]
        for t, nxt in enumerate(seq):
            ctx = tuple(ids[max(0, t - (order - 1)):t])
            vec = counts.get(ctx)
            if vec is None:
                vec = np.zeros(vocab.size)
                counts[ctx] = vec
                totals[ctx] = 0
            vec[nxt] += 1
            totals[ctx] += 1
    return NgramLM(vocab, order, smoothing, counts, totals, doc_delimiter)


def perplexity(lm: LanguageModel, docs) -> float:
    """Per-token perplexity of ``lm`` over byte documents (EOS included)."""
    total_lp = 0.0
    n_tokens = 0
    byte_to_id = {bs[0]: i for i, bs in enumerate(lm.vocabulary.token_bytes)
                  if i != lm.vocabulary.eos_id}
    for doc in docs:
        ids = tuple(byte_to_id[b] for b in doc)
        total_lp += lm.sequence_logprob(ids + (lm.vocabulary.eos_id,))
        n_tokens += len(ids) + 1
    return math.exp(-total_lp / max(n_tokens, 1))


class RemoteLM(LanguageModel):
    """Client for an HTTP next-token log-probability service.

    Protocol: POST ``{"context": [token ids]}`` to the endpoint; the
    response is ``{"logprobs": [float; vocabulary size]}`` indexed by token
    id (EOS at ``eos_id``). Responses are validated and renormalized;
    normalization drift beyond 1e-3 in probability space is surfaced as a
    warning. Determinism of repeated queries relies on the backend being
    deterministic.
    """

    def __init__(self, endpoint: str, vocabulary: Vocabulary,
                 horizon: int | None = None, timeout: float = 10.0):
        super().__init__(vocabulary, horizon)
        self.endpoint = endpoint
        self.timeout = timeout

    def _conditional(self, context):
        body = json.dumps({"context": list(context)}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise RemoteTransportError(f"request to {self.endpoint} failed: {exc}") from exc
        try:
            payload = json.loads(raw)
            logprobs = payload["logprobs"]
            lp = np.asarray(logprobs, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponseError(f"bad payload from {self.endpoint}: {exc}") from exc
        if lp.ndim != 1 or len(lp) != self.vocabulary.size:
            raise VocabularyMismatchError(
                f"endpoint returned {lp.shape} log-probs, expected {self.vocabulary.size}"
            )
        if np.any(np.isnan(lp)):
            raise MalformedResponseError("endpoint returned NaN log-probabilities")
        total = np.exp(lp).sum()
        if abs(total - 1.0) > RENORM_WARN_TOL:
            warnings.warn(
                f"remote log-probs sum to {total:.6f}; renormalizing",
                RuntimeWarning,
                stacklevel=2,
            )
        return lp - math.log(total)


def remote_logprobs(endpoint: str, vocabulary: Vocabulary, context) -> TokenDistribution:
    """One-shot query of a remote log-probability endpoint."""
    return RemoteLM(endpoint, vocabulary).next_distribution(context)
