"""Alphabets, token sequences, string distances and the queried-dataset store.

Sequences are plain tuples of alphabet indices. One-hot encodings are only
built at model boundaries (see :func:`one_hot`).
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence as SequenceT

import numpy as np

Sequence = tuple  # tuple[int, ...] of alphabet indices

EOS_SYMBOL = "$"


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]
    has_eos: bool = False

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(symbols) < 2:
            raise ValueError(f"alphabet needs at least 2 symbols, got {len(symbols)}")
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"alphabet symbols must be distinct: {symbols!r}")
        if any(len(s) != 1 for s in symbols):
            raise ValueError("alphabet symbols must be single characters")
        if EOS_SYMBOL in symbols:
            raise ValueError(f"{EOS_SYMBOL!r} is reserved for the terminal token")

    @classmethod
    def from_string(cls, chars: str, has_eos: bool = False) -> "Alphabet":
        return cls(tuple(chars), has_eos)

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def n_actions(self) -> int:
        """Number of generator actions: the symbols plus EOS when present."""
        return self.size + int(self.has_eos)

    @property
    def eos(self) -> int | None:
        return self.size if self.has_eos else None

    def encode(self, text: str) -> Sequence:
        lookup = {c: i for i, c in enumerate(self.symbols)}
        try:
            return tuple(lookup[c] for c in text)
        except KeyError as err:
            raise ValueError(f"symbol {err.args[0]!r} not in alphabet") from None

    def decode(self, seq: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in seq)

    def __str__(self) -> str:
        return "".join(self.symbols)


def validate_sequence(seq: SequenceT[int], alphabet: Alphabet,
                      length: int | None = None, max_length: int | None = None) -> Sequence:
    seq = tuple(int(t) for t in seq)
    if len(seq) < 1:
        raise ValueError("sequence must contain at least one token")
    if any(t < 0 or t >= alphabet.size for t in seq):
        raise ValueError(f"token index out of range for alphabet of size {alphabet.size}: {seq}")
    if length is not None and len(seq) != length:
        raise ValueError(f"expected length {length}, got {len(seq)}")
    if max_length is not None and len(seq) > max_length:
        raise ValueError(f"sequence longer than {max_length}: {len(seq)}")
    return seq


def hamming_distance(a: SequenceT, b: SequenceT) -> int:
    if len(a) != len(b):
        raise ValueError(
            f"Hamming distance needs equal lengths, got {len(a)} and {len(b)}; "
            "use edit_distance for variable-length sequences"
        )
    return sum(x != y for x, y in zip(a, b))


def edit_distance(a: SequenceT, b: SequenceT) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(min(previous[j] + 1,
                               current[j - 1] + 1,
                               previous[j - 1] + (x != y)))
        previous = current
    return previous[-1]


def pad_tokens(seqs: SequenceT[SequenceT[int]], width: int | None = None,
               fill: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into an (n, width) int array right-padded with `fill`."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max(initial=0)) if width is None else width
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def one_hot(seqs: SequenceT[SequenceT[int]], width: int, depth: int) -> np.ndarray:
    """(n, width, depth) float one-hot grid; rows past a sequence's end stay zero."""
    tokens, _ = pad_tokens(seqs, width)
    out = np.zeros(tokens.shape + (depth,))
    rows, cols = np.nonzero(tokens >= 0)
    out[rows, cols, tokens[rows, cols]] = 1.0
    return out


def hamming_to_many(seq: SequenceT[int], tokens: np.ndarray) -> np.ndarray:
    """Hamming distances from `seq` to each row of an equal-width token matrix."""
    return np.count_nonzero(tokens != np.asarray(seq)[None, :], axis=1)


def edit_to_many(seq: SequenceT[int], tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Levenshtein distances from `seq` to every padded row of `tokens`.

    Runs the usual DP row by row, vectorized over the rows of `tokens`.
    """
    n, width = tokens.shape
    m = len(seq)
    # prev[k, j]: distance between seq[:i] and tokens[k, :j]
    prev = np.broadcast_to(np.arange(width + 1), (n, width + 1)).copy()
    for i in range(1, m + 1):
        cur = np.empty_like(prev)
        cur[:, 0] = i
        sub = prev[:, :-1] + (tokens != seq[i - 1])
        dele = prev[:, 1:] + 1
        best = np.minimum(sub, dele)
        # insertion term depends on cur[:, j-1]: sequential over columns
        for j in range(1, width + 1):
            cur[:, j] = np.minimum(best[:, j - 1], cur[:, j - 1] + 1)
        prev = cur
    return prev[np.arange(n), lengths]


def distances_to_many(seq: SequenceT[int], tokens: np.ndarray, lengths: np.ndarray,
                      metric: str = "hamming") -> np.ndarray:
    if len(tokens) == 0:
        return np.zeros(0, dtype=np.int64)
    if metric == "hamming":
        if tokens.shape[1] != len(seq) or np.any(lengths != len(seq)):
            raise ValueError("hamming metric needs all sequences at the same length")
        return hamming_to_many(seq, tokens)
    if metric == "edit":
        return edit_to_many(seq, tokens, lengths)
    raise ValueError(f"unknown distance metric {metric!r}")


@dataclass(frozen=True)
class ScoredSequence:
    sequence: Sequence
    score: float
    round_index: int


@dataclass
class Dataset:
    """Append-only store of queried sequences with exact-duplicate rejection.

    One writer, many readers: inserts take a lock, readers work on the
    immutable snapshot returned by :meth:`arrays`.
    """

    alphabet: Alphabet
    entries: list[ScoredSequence] = field(default_factory=list)
    _index: dict = field(default_factory=dict, repr=False)
    _trace: list[float] = field(default_factory=list, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        initial, self.entries = self.entries, []
        for e in initial:
            self.insert(e.sequence, e.score, e.round_index)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ScoredSequence]:
        return iter(self.entries)

    def __contains__(self, seq) -> bool:
        return tuple(seq) in self._index

    @property
    def current_round(self) -> int:
        return self.entries[-1].round_index if self.entries else 0

    def insert(self, seq: SequenceT[int], score: float, round_index: int) -> bool:
        """Append ``(seq, score)``; returns False if the tokens are already present."""
        score = float(score)
        if not math.isfinite(score):
            raise ValueError(f"score must be finite, got {score}")
        if round_index < 0:
            raise ValueError("round index must be nonnegative")
        seq = tuple(int(t) for t in seq)
        with self._lock:
            if seq in self._index:
                return False
            if self.entries and round_index < self.entries[-1].round_index:
                raise ValueError("round index cannot go backwards")
            self._index[seq] = len(self.entries)
            self.entries.append(ScoredSequence(seq, score, int(round_index)))
            prev = self._trace[-1] if self._trace else -math.inf
            self._trace.append(max(prev, score))
            self._cache = None
        return True

    def cumulative_max(self) -> list[float]:
        return list(self._trace)

    def best(self) -> ScoredSequence:
        return max(self.entries, key=lambda e: e.score)

    def sequences(self) -> list[Sequence]:
        return [e.sequence for e in self.entries]

    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded token matrix (fill -1), lengths and scores; cached between inserts."""
        cache = self._cache
        if cache is None:
            tokens, lengths = pad_tokens(self.sequences())
            cache = self._cache = (tokens, lengths, self.scores())
        return cache

    def rounds(self) -> list[int]:
        return sorted({e.round_index for e in self.entries})

    def view(self, indices: Iterable[int]) -> "Dataset":
        out = Dataset(self.alphabet)
        for i in sorted(indices):
            e = self.entries[i]
            out.insert(e.sequence, e.score, e.round_index)
        return out

    def upto_round(self, n: int) -> "Dataset":
        return self.view([i for i, e in enumerate(self.entries) if e.round_index <= n])

    def in_round(self, n: int) -> "Dataset":
        return self.view([i for i, e in enumerate(self.entries) if e.round_index == n])

    def subsample(self, p: float, rng: np.random.Generator) -> "Dataset":
        return dataset_subsample(self, p, rng)

    def save(self, path: str | Path) -> None:
        lines = [f"# alphabet={self.alphabet} eos={int(self.alphabet.has_eos)}"]
        for e in self.entries:
            lines.append(f"{e.round_index}\t{e.score!r}\t{self.alphabet.decode(e.sequence)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        text = Path(path).read_text().splitlines()
        if not text or not text[0].startswith("# alphabet="):
            raise ValueError(f"{path}: missing alphabet header")
        fields = dict(item.split("=", 1) for item in text[0][2:].split())
        alphabet = Alphabet.from_string(fields["alphabet"], bool(int(fields.get("eos", "0"))))
        data = cls(alphabet)
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            r, score, tokens = line.split("\t")
            if not data.insert(alphabet.encode(tokens), float(score), int(r)):
                raise ValueError(f"{path}:{lineno}: duplicate sequence {tokens}")
        return data


def dataset_insert(d: Dataset, s: SequenceT[int], score: float, round_index: int) -> bool:
    return d.insert(s, score, round_index)


def subsample_indices(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"subsample fraction must be in (0, 1], got {p}")
    if n < 1:
        raise ValueError("cannot subsample an empty dataset")
    if p == 1.0:
        return np.arange(n)
    # round first so 0.7 * 100 = 70.00000000000001 still gives 70
    k = max(1, math.ceil(round(p * n, 9)))
    return np.sort(rng.choice(n, size=k, replace=False))


def dataset_subsample(d: Dataset, p: float, rng: np.random.Generator) -> Dataset:
    """Uniform subset of size ``ceil(p * |d|)`` (at least one), drawn without replacement."""
    return d.view(subsample_indices(len(d), p, rng).tolist())
