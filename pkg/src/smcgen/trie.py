"""Prefix-closure trie over token byte strings, with per-node probability mass.

The trie's node set is the prefix closure of the non-EOS token byte strings;
a node whose path spells a full token carries that token's id as an
end-of-token marker. EOS is attached at the root as a special marker. Given
a next-token distribution, ``compute_mass`` assigns each node the total
probability of the tokens in its subtree (plus the EOS probability at the
root), so the root mass is 1.
"""

from __future__ import annotations

import json

import numpy as np

from .lm import TokenDistribution, Vocabulary


class DuplicateTokenError(ValueError):
    """Two distinct token ids decode to the same byte string."""


class TokenTrie:
    """Immutable trie in flat-array form (nodes in insertion preorder).

    Arrays: ``parent[n]`` and ``depth[n]`` per node; children of ``n`` are
    ``child_nodes[child_start[n]:child_start[n+1]]`` labeled by
    ``child_bytes`` at the same offsets; ``token_at[n]`` is the end-of-token
    marker (token id, or -1). ``node_of_token[t]`` inverts the markers; the
    EOS slot maps to the root.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        children: list[dict[int, int]] = [{}]
        parent = [-1]
        depth = [0]
        token_at = [-1]
        node_of_token = np.zeros(vocab.size, dtype=np.int64)
        seen: dict[bytes, int] = {}
        for tok in range(vocab.size):
            if tok == vocab.eos_id:
                node_of_token[tok] = 0  # EOS marker lives at the root
                continue
            bs = vocab.token_bytes[tok]
            if bs in seen:
                raise DuplicateTokenError(
                    f"tokens {seen[bs]} and {tok} both decode to {bs!r}"
                )
            seen[bs] = tok
            node = 0
            for b in bs:
                nxt = children[node].get(b)
                if nxt is None:
                    nxt = len(children)
                    children[node][b] = nxt
                    children.append({})
                    parent.append(node)
                    depth.append(depth[node] + 1)
                    token_at.append(-1)
                node = nxt
            token_at[node] = tok
            node_of_token[tok] = node
        n = len(children)
        self.n_nodes = n
        self.parent = np.asarray(parent, dtype=np.int64)
        self.depth = np.asarray(depth, dtype=np.int64)
        self.token_at = np.asarray(token_at, dtype=np.int64)
        self.node_of_token = node_of_token
        child_start = np.zeros(n + 1, dtype=np.int64)
        child_bytes = []
        child_nodes = []
        for i, ch in enumerate(children):
            child_start[i] = len(child_nodes)
            for b in sorted(ch):
                child_bytes.append(b)
                child_nodes.append(ch[b])
        child_start[n] = len(child_nodes)
        self.child_start = child_start
        self.child_bytes = np.asarray(child_bytes, dtype=np.int64)
        self.child_nodes = np.asarray(child_nodes, dtype=np.int64)
        # nodes grouped by depth, deepest first, for bottom-up mass sweeps
        self._levels = []
        maxd = int(self.depth.max()) if n > 1 else 0
        for d in range(maxd, 0, -1):
            idx = np.nonzero(self.depth == d)[0]
            if len(idx):
                self._levels.append(idx)
        self._noneos_mask = np.arange(vocab.size) != vocab.eos_id

    def children_of(self, node: int):
        lo, hi = self.child_start[node], self.child_start[node + 1]
        return self.child_bytes[lo:hi], self.child_nodes[lo:hi]

    def node_path(self, node: int) -> bytes:
        out = []
        while node > 0:
            p = int(self.parent[node])
            lo, hi = self.child_start[p], self.child_start[p + 1]
            for b, c in zip(self.child_bytes[lo:hi], self.child_nodes[lo:hi]):
                if c == node:
                    out.append(int(b))
                    break
            node = p
        return bytes(reversed(out))


def build_trie(vocab: Vocabulary) -> TokenTrie:
    return TokenTrie(vocab)


class MassMap:
    """Per-node subtree probability mass for one next-token distribution.

    ``node_mass[n]`` sums the probabilities of all tokens whose byte string
    passes through node ``n`` (including ``n``'s own end-of-token marker);
    the root additionally carries the EOS probability, so it totals 1.
    ``eot_mass(n)`` is the marker mass alone. Masses are linear-space
    floats; the trie vocabularies used here are far from underflow (switch
    to log-space sums if that ever changes).
    """

    __slots__ = ("trie", "node_mass", "_probs")

    def __init__(self, trie: TokenTrie, node_mass: np.ndarray, probs: np.ndarray):
        self.trie = trie
        self.node_mass = node_mass
        self._probs = probs

    @property
    def root_mass(self) -> float:
        return float(self.node_mass[0])

    def eot_mass(self, node: int) -> float:
        tok = self.trie.token_at[node]
        if node == 0:
            return float(self._probs[self.trie.vocab.eos_id])
        return float(self._probs[tok]) if tok >= 0 else 0.0


def compute_mass(trie: TokenTrie, dist) -> MassMap:
    """Apply the mass recursion to a next-token distribution.

    Marker masses equal token probabilities; every internal node's mass is
    the sum over its children plus its own marker; the root adds EOS.
    """
    probs = np.exp(dist.logprobs) if isinstance(dist, TokenDistribution) else np.asarray(dist)
    if len(probs) != trie.vocab.size:
        raise ValueError("distribution does not match the trie's vocabulary")
    mass = np.zeros(trie.n_nodes)
    mask = trie._noneos_mask
    mass[trie.node_of_token[mask]] = probs[mask]  # marker nodes are unique
    mass[0] += probs[trie.vocab.eos_id]
    for idx in trie._levels:
        np.add.at(mass, trie.parent[idx], mass[idx])
    return MassMap(trie, mass, probs)


def dump_json(trie: TokenTrie, mass: MassMap | None = None) -> str:
    """Debug dump of the trie (and masses, if given) as JSON."""
    nodes = []
    for n in range(trie.n_nodes):
        rec = {
            "id": n,
            "path": trie.node_path(n).decode("utf-8", errors="backslashreplace"),
            "parent": int(trie.parent[n]),
            "token": int(trie.token_at[n]),
        }
        if mass is not None:
            rec["mass"] = float(mass.node_mass[n])
            rec["eot_mass"] = mass.eot_mass(n)
        nodes.append(rec)
    return json.dumps({"eos_id": trie.vocab.eos_id, "nodes": nodes}, indent=2)
