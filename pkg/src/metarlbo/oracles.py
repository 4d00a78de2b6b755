"""Simulated ground-truth objectives, query accounting and exhaustive search.

Three deterministic oracles are provided:

* ``ising_alternating`` -- rewards strings that alternate between two symbols.
* ``rna_binding`` -- complementarity of a length-14 RNA against a hidden
  length-50 target, a dependency-free stand-in for a folding-energy model.
* ``random_landscape`` -- seeded 3-mer landscape over variable-length
  sequences (alphabet 20, length up to 50 by default).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence as SequenceT

import numpy as np

from .seqcore import Alphabet, Sequence, pad_tokens

ORACLE_KINDS = ("ising_alternating", "rna_binding", "random_landscape")
RNA_ALPHABET = "ACGU"
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"


@dataclass(frozen=True)
class OracleSpec:
    kind: str
    alphabet: str
    length: int
    min_length: int | None = None  # None: fixed length
    seed: int = 0
    target_length: int = 50  # rna_binding only

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise ValueError(f"unknown oracle kind {self.kind!r}; expected one of {ORACLE_KINDS}")
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.min_length is not None and not 1 <= self.min_length <= self.length:
            raise ValueError("min_length must lie in [1, length]")
        if len(set(self.alphabet)) != len(self.alphabet) or len(self.alphabet) < 2:
            raise ValueError("alphabet needs at least 2 distinct symbols")
        if self.kind == "rna_binding":
            if sorted(self.alphabet) != sorted(RNA_ALPHABET):
                raise ValueError("rna_binding requires the alphabet ACGU")
            if self.variable_length:
                raise ValueError("rna_binding is a fixed-length task")
            if self.target_length < self.length:
                raise ValueError("hidden target must be at least as long as the sequence")
        if self.kind == "ising_alternating" and self.variable_length:
            raise ValueError("ising_alternating is a fixed-length task")

    @property
    def variable_length(self) -> bool:
        return self.min_length is not None and self.min_length != self.length

    def make_alphabet(self) -> Alphabet:
        return Alphabet.from_string(self.alphabet, has_eos=self.variable_length)

    def search_space_size(self) -> int:
        a = len(self.alphabet)
        if not self.variable_length:
            return a ** self.length
        return sum(a ** n for n in range(self.min_length, self.length + 1))


@dataclass
class QueryLedger:
    total_queries: int = 0
    per_round_queries: list[int] = field(default_factory=list)

    def record(self, round_index: int, n: int) -> None:
        if n < 0:
            raise ValueError("query count cannot be negative")
        while len(self.per_round_queries) <= round_index:
            self.per_round_queries.append(0)
        self.per_round_queries[round_index] += n
        self.total_queries += n


class Oracle:
    """Base class: pure scoring ``f(s)`` plus a vectorized batch form."""

    def __init__(self, spec: OracleSpec):
        self.spec = spec
        self.alphabet = spec.make_alphabet()

    def check(self, seq: SequenceT[int]) -> Sequence:
        seq = tuple(int(t) for t in seq)
        if len(seq) == 0:
            raise ValueError("cannot score an empty sequence")
        if self.spec.variable_length:
            if not self.spec.min_length <= len(seq) <= self.spec.length:
                raise ValueError(
                    f"length {len(seq)} outside [{self.spec.min_length}, {self.spec.length}]")
        elif len(seq) != self.spec.length:
            raise ValueError(f"expected length {self.spec.length}, got {len(seq)}")
        if min(seq) < 0 or max(seq) >= self.alphabet.size:
            raise ValueError(f"token out of range for alphabet {self.alphabet}")
        return seq

    def __call__(self, seq: SequenceT[int]) -> float:
        return float(self.score_many([self.check(seq)])[0])

    def score_many(self, seqs: SequenceT[SequenceT[int]]) -> np.ndarray:
        raise NotImplementedError


def ising_scores(tokens: np.ndarray) -> np.ndarray:
    """Alternating-chain score for an (n, L) token matrix; range [1, L]."""
    tokens = np.asarray(tokens)
    n, L = tokens.shape
    score = np.ones(n)
    if L > 1:
        score += tokens[:, 1] != tokens[:, 0]
    if L > 2:
        ok = (tokens[:, 2:] != tokens[:, 1:-1]) & (tokens[:, 2:] == tokens[:, :-2])
        score += ok.sum(axis=1)
    return score


def ising_score(seq: SequenceT[int]) -> float:
    return float(ising_scores(np.asarray([seq]))[0])


class IsingOracle(Oracle):
    def score_many(self, seqs):
        for s in seqs:
            self.check(s)
        return ising_scores(np.asarray(seqs, dtype=np.int64).reshape(len(seqs), -1))


def _rna_pair_weights(alphabet: str) -> np.ndarray:
    strength = {frozenset("GC"): 3.0, frozenset("AU"): 2.0, frozenset("GU"): 1.0}
    w = np.zeros((len(alphabet), len(alphabet)))
    for i, a in enumerate(alphabet):
        for j, b in enumerate(alphabet):
            w[i, j] = strength.get(frozenset((a, b)), 0.0) if a != b else 0.0
    return w


class RnaBindingOracle(Oracle):
    """Best antiparallel alignment of the sequence against a hidden target.

    Score = max over target windows of sum of base-pair strengths
    (G-C 3, A-U 2, G-U 1) between the reversed sequence and the window,
    divided by ``3 * len(s)`` so it lies in [0, 1].
    """

    def __init__(self, spec: OracleSpec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        self.target = tuple(int(t) for t in rng.integers(0, 4, size=spec.target_length))
        self.pair_weight = _rna_pair_weights(spec.alphabet)
        # affinity[a, j]: pairing strength of token a against target position j
        self._affinity = self.pair_weight[:, np.asarray(self.target)]

    def score_many(self, seqs):
        for s in seqs:
            self.check(s)
        tokens = np.asarray(seqs, dtype=np.int64).reshape(len(seqs), -1)
        L = tokens.shape[1]
        n_windows = len(self.target) - L + 1
        rev = tokens[:, ::-1]
        total = np.zeros((len(tokens), n_windows))
        for i in range(L):
            total += self._affinity[rev[:, i]][:, i:i + n_windows]
        return total.max(axis=1) / (3.0 * L)

    def reverse_complement(self, window: SequenceT[int]) -> Sequence:
        """A sequence pairing with `window` by Watson-Crick rules."""
        comp = {"A": "U", "U": "A", "G": "C", "C": "G"}
        sym = self.spec.alphabet
        return tuple(sym.index(comp[sym[t]]) for t in reversed(window))


class LandscapeOracle(Oracle):
    """Seeded random 3-mer landscape.

    Each position t contributes a weight indexed by the 3-mer ending at t
    (positions before the start read as a boundary token). The score is
    ``logistic(gain * mean contribution)``, so it always lies in (0, 1).
    """

    k = 3

    def __init__(self, spec: OracleSpec, gain: float = 4.0):
        super().__init__(spec)
        a = len(spec.alphabet) + 1  # + boundary token
        rng = np.random.default_rng(spec.seed)
        self.weights = rng.standard_normal(a ** self.k)
        self.gain = gain

    def score_many(self, seqs):
        for s in seqs:
            self.check(s)
        boundary = len(self.spec.alphabet)
        tokens, lengths = pad_tokens(seqs, fill=boundary)
        padded = np.concatenate(
            [np.full((len(seqs), self.k - 1), boundary), tokens], axis=1)
        a = boundary + 1
        width = tokens.shape[1]
        code = np.zeros((len(seqs), width), dtype=np.int64)
        for j in range(self.k):
            code = code * a + padded[:, j:j + width]
        contrib = self.weights[code]
        mask = np.arange(width)[None, :] < lengths[:, None]
        mean = (contrib * mask).sum(axis=1) / lengths
        return 1.0 / (1.0 + np.exp(-self.gain * mean))


def make_oracle(spec: OracleSpec) -> Oracle:
    cls = {"ising_alternating": IsingOracle,
           "rna_binding": RnaBindingOracle,
           "random_landscape": LandscapeOracle}[spec.kind]
    return cls(spec)


def enumerate_sequences(spec: OracleSpec):
    a = len(spec.alphabet)
    lengths = range(spec.min_length, spec.length + 1) if spec.variable_length else [spec.length]
    for n in lengths:
        yield from itertools.product(range(a), repeat=n)


def brute_force_max(spec: OracleSpec, max_enumeration: int = 2 ** 20,
                    chunk: int = 65536) -> tuple[Sequence, float]:
    """Exact maximizer by full enumeration; ties go to the lexicographically smallest."""
    size = spec.search_space_size()
    if size > max_enumeration:
        raise ValueError(f"search space {size} exceeds enumeration cap {max_enumeration}")
    oracle = make_oracle(spec)
    best_score, best = -math.inf, None
    it = enumerate_sequences(spec)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            break
        scores = oracle.score_many(block)
        top = scores.max()
        if top > best_score:
            best_score = float(top)
            best = min(s for s, v in zip(block, scores) if v == top)
        elif top == best_score:
            best = min([best] + [s for s, v in zip(block, scores) if v == top])
    return tuple(best), best_score


def query_batch(oracle: Oracle, batch: SequenceT[SequenceT[int]], ledger: QueryLedger,
                round_index: int) -> list[float]:
    """Score a batch with the true oracle and charge it to `ledger`."""
    if len(batch) == 0:
        raise ValueError("query batch is empty")
    for i, s in enumerate(batch):
        try:
            oracle.check(s)
        except ValueError as err:
            raise ValueError(f"batch item {i}: {err}") from err
    scores = oracle.score_many([tuple(s) for s in batch])
    ledger.record(round_index, len(batch))
    return [float(v) for v in scores]
