"""Mutation-based reference optimizers: random mutation and a Wright-Fisher genetic algorithm.

Both propose a batch from the queried data only; they never see the oracle
beyond its input geometry, and share the campaign's round/ledger accounting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..oracles import OracleSpec
from ..seqcore import Dataset, Sequence

BASELINE_KINDS = ("random_mutation", "genetic")
FITNESS_FLOOR = 1e-6
RESAMPLE_CAP = 10


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "random_mutation"
    mutation_rate: float | None = None  # None: one expected substitution per sequence
    population: int = 100
    recombination_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}")
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if not 0.0 <= self.recombination_rate <= 1.0:
            raise ValueError("recombination_rate must lie in [0, 1]")
        if self.kind == "genetic" and self.population < 2:
            raise ValueError("genetic population must be >= 2")

    def rate(self, length: int) -> float:
        return 1.0 / length if self.mutation_rate is None else self.mutation_rate


def mutate(seq: Sequence, rate: float, n_symbols: int, rng: np.random.Generator) -> Sequence:
    """Substitute each position with probability `rate` by a different symbol."""
    s = np.asarray(seq)
    hit = rng.random(len(s)) < rate
    # shift by 1..A-1 so the new symbol is uniform over the other tokens
    shift = rng.integers(1, n_symbols, size=len(s))
    return tuple(int(t) for t in np.where(hit, (s + shift) % n_symbols, s))


def point_mutation(seq: Sequence, n_symbols: int, rng: np.random.Generator) -> Sequence:
    i = int(rng.integers(len(seq)))
    out = list(seq)
    out[i] = (out[i] + int(rng.integers(1, n_symbols))) % n_symbols
    return tuple(out)


def crossover(a: Sequence, b: Sequence, k: int) -> Sequence:
    return tuple(a[:k]) + tuple(b[k:])


def random_sequence(spec: OracleSpec, rng: np.random.Generator) -> Sequence:
    lo = spec.min_length if spec.variable_length else spec.length
    n = int(rng.integers(lo, spec.length + 1))
    return tuple(int(t) for t in rng.integers(0, len(spec.alphabet), size=n))


def wright_fisher_select(scores: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with probability proportional to max(score - min, floor)."""
    scores = np.asarray(scores, dtype=float)
    w = np.maximum(scores - scores.min(), FITNESS_FLOOR)
    return rng.choice(len(scores), size=n, replace=True, p=w / w.sum())


def _fill(make_child, dataset: Dataset, B: int, spec: OracleSpec,
          rng: np.random.Generator) -> list[Sequence]:
    """B distinct unqueried children; after RESAMPLE_CAP misses use a fresh random sequence."""
    if B > spec.search_space_size() - len(dataset):
        raise ValueError("batch larger than the unqueried part of the search space")
    batch, seen = [], set()
    while len(batch) < B:
        for _ in range(RESAMPLE_CAP):
            child = make_child()
            if child not in seen and child not in dataset:
                break
        else:
            child = random_sequence(spec, rng)
            while child in seen or child in dataset:
                child = random_sequence(spec, rng)
        seen.add(child)
        batch.append(child)
    return batch


def baseline_random(dataset: Dataset, B: int, oracle: OracleSpec, cfg: BaselineSpec,
                    rng: np.random.Generator) -> list[Sequence]:
    """Mutate uniformly chosen previously queried sequences."""
    if len(dataset) == 0:
        raise ValueError("random-mutation baseline needs a nonempty dataset")
    parents = dataset.sequences()
    A = len(oracle.alphabet)

    def child():
        parent = parents[int(rng.integers(len(parents)))]
        return mutate(parent, cfg.rate(len(parent)), A, rng)

    return _fill(child, dataset, B, oracle, rng)


def baseline_genetic(dataset: Dataset, B: int, oracle: OracleSpec, cfg: BaselineSpec,
                     rng: np.random.Generator) -> list[Sequence]:
    """Fitness-proportional resampling, single-point crossover, single-point mutation."""
    if len(dataset) == 0:
        raise ValueError("genetic baseline needs a nonempty dataset")
    seqs = dataset.sequences()
    population = [seqs[i] for i in wright_fisher_select(dataset.scores(), cfg.population, rng)]
    A = len(oracle.alphabet)
    # with mutation_rate None every child gets one point mutation
    p_mut = 1.0 if cfg.mutation_rate is None else cfg.mutation_rate

    def child():
        i, j = rng.integers(len(population), size=2)
        a, b = population[i], population[j]
        shortest = min(len(a), len(b))
        if shortest > 1 and rng.random() < cfg.recombination_rate:
            a = crossover(a, b, int(rng.integers(1, shortest)))
        if rng.random() < p_mut:
            a = point_mutation(a, A, rng)
        return a

    return _fill(child, dataset, B, oracle, rng)


def propose_baseline(cfg, dataset: Dataset, rng: np.random.Generator) -> list[Sequence]:
    """Batch for one round of a campaign whose method is a mutation baseline."""
    spec = cfg.baseline or BaselineSpec(kind=cfg.method)
    if spec.kind != cfg.method:
        raise ValueError(f"baseline kind {spec.kind!r} does not match method {cfg.method!r}")
    fn = baseline_random if spec.kind == "random_mutation" else baseline_genetic
    return fn(dataset, cfg.batch_size, cfg.oracle, spec, rng)
