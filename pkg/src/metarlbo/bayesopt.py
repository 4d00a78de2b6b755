"""Acquisition, greedy batch selection and the multi-round campaign loop.

A campaign of ``rounds`` rounds spends round 0 on a batch drawn from a
freshly initialized (untrained) generator, then in every later round:

1. meta-train the generator on proxy tasks fitted to the data so far,
2. fine-tune one copy per task and pool their samples,
3. rank the pool by acquisition value under the ensemble of task proxies,
4. query the top ``batch_size`` candidates and add them to the data.

All randomness is derived from ``master_seed`` by (component, round) keys,
so results do not depend on execution order.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence as SequenceT

import numpy as np

from .metarl import (GenPhaseConfig, MetaConfig, TaskDistribution, TaskSamplerConfig,
                     finetune_and_generate, meta_train, scratch_and_generate)
from .nn import checksum
from .oracles import OracleSpec, QueryLedger, make_oracle, query_batch
from .policy import GenEnv, init_policy, sample_sequences
from .seqcore import Dataset, ScoredSequence, Sequence
from .surrogate import ProxyEnsemble, RegressorSpec, build_ensemble

log = logging.getLogger(__name__)

ACQUISITION_KINDS = ("ucb", "posterior_mean")
METHODS = ("metarlbo", "policy_ensemble", "random_mutation", "genetic")
CSV_COLUMNS = ("round", "queries", "batch_max", "batch_mean", "cum_max", "pool_size", "wall_time")

# stream keys for seed derivation
_INIT, _META, _POOL, _GEN, _SURR, _BASE = range(6)


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Counter-based child generator for (component, round, ...) keys."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = "ucb"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ACQUISITION_KINDS:
            raise ValueError(f"unknown acquisition kind {self.kind!r}; expected one of {ACQUISITION_KINDS}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.kind == "posterior_mean" else self.beta


def acquire_many(spec: AcquisitionSpec, e, seqs: SequenceT[Sequence]) -> np.ndarray:
    mu, sigma = e.predict_many(list(seqs))
    if spec.kind == "posterior_mean":
        return mu
    return mu + spec.beta * sigma


def acquire(spec: AcquisitionSpec, e, s: Sequence) -> float:
    return float(acquire_many(spec, e, [tuple(s)])[0])


def select_batch(pool: SequenceT[Sequence], e, spec: AcquisitionSpec, B: int,
                 values: np.ndarray | None = None) -> list[Sequence]:
    """Top-B candidates by acquisition value; ties go to the lexicographically smaller sequence."""
    if len(pool) == 0:
        raise ValueError("cannot select from an empty pool")
    if B < 1:
        raise ValueError("batch size must be >= 1")
    pool = [tuple(s) for s in pool]
    if values is None:
        values = acquire_many(spec, e, pool)
    order = sorted(range(len(pool)), key=lambda i: (-values[i], pool[i]))
    if len(pool) < B:
        log.warning("underfull pool: %d candidates for a batch of %d", len(pool), B)
    return [pool[i] for i in order[:B]]


@dataclass(frozen=True)
class CampaignConfig:
    oracle: OracleSpec
    rounds: int = 16
    batch_size: int = 500
    initial_batch: int | None = None  # None: batch_size
    method: str = "metarlbo"
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    meta: MetaConfig = field(default_factory=MetaConfig)
    gen: GenPhaseConfig = field(default_factory=GenPhaseConfig)
    tasks: TaskSamplerConfig = field(default_factory=TaskSamplerConfig)
    master_seed: int = 0
    warm_start: bool = True
    surrogate: str = "proxies"  # or "fresh": train a new ensemble on all data
    surrogate_members: int = 8
    policy_hidden: tuple[int, ...] = (128, 128)
    scratch_steps: int = 20  # policy_ensemble ablation: REINFORCE steps per fresh policy
    sigma_floor: float = 1e-3
    baseline: object = None  # BaselineSpec for the mutation baselines; None: defaults

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.initial_batch is not None and self.initial_batch < 1:
            raise ValueError("initial_batch must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.surrogate not in ("proxies", "fresh"):
            raise ValueError(f"unknown surrogate source {self.surrogate!r}")
        object.__setattr__(self, "policy_hidden", tuple(self.policy_hidden))

    @property
    def n_initial(self) -> int:
        return self.initial_batch or self.batch_size

    def with_seed(self, seed: int) -> "CampaignConfig":
        return dataclasses.replace(self, master_seed=seed)


@dataclass
class RoundRecord:
    round_index: int
    selected: list[ScoredSequence]
    batch_max: float
    batch_mean: float
    cumulative_max: float
    pool_size: int
    wall_time: float
    queries: int = 0

    def csv_row(self) -> list[str]:
        return [str(self.round_index), str(self.queries), repr(self.batch_max),
                repr(self.batch_mean), repr(self.cumulative_max), str(self.pool_size),
                f"{self.wall_time:.3f}"]


def records_to_csv(records: SequenceT[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=list))


class Campaign:
    """State of one optimization run: dataset, ledger, generator and round records."""

    def __init__(self, cfg: CampaignConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.oracle = make_oracle(cfg.oracle)
        self.alphabet = self.oracle.alphabet
        self.dataset = Dataset(self.alphabet)
        self.ledger = QueryLedger()
        self.records: list[RoundRecord] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        horizon = cfg.oracle.length
        self.tasks_cfg = dataclasses.replace(cfg.tasks, horizon=horizon)
        self.env_template = GenEnv(self.alphabet, horizon, lambda s: np.zeros(len(s)),
                                   variable_length=cfg.oracle.variable_length,
                                   gamma=cfg.tasks.gamma)
        self.policy_spec = self.env_template.policy_spec(cfg.policy_hidden)
        self.theta0 = init_policy(self.policy_spec, derive_rng(cfg.master_seed, _INIT, 0))
        self.checksums: dict[str, str] = {}
        self.last_ensemble: ProxyEnsemble | None = None

    # -- round 0 ---------------------------------------------------------
    def initial_batch(self) -> list[Sequence]:
        """Unique sequences from a freshly initialized generator."""
        rng = derive_rng(self.cfg.master_seed, _INIT, 1)
        random_policy = init_policy(self.policy_spec, derive_rng(self.cfg.master_seed, _INIT, 2))
        want = self.cfg.n_initial
        space = self.cfg.oracle.search_space_size()
        if want > space:
            raise ValueError(f"initial batch {want} exceeds the search space size {space}")
        seen, out = set(), []
        for _ in range(1000):
            for s in sample_sequences(random_policy, self.env_template, want, rng):
                if s not in seen:
                    seen.add(s)
                    out.append(s)
                    if len(out) == want:
                        return out
        raise RuntimeError("could not draw enough distinct initial sequences")

    # -- model-driven rounds ---------------------------------------------
    def propose_metarlbo(self, r: int) -> tuple[list[Sequence], ProxyEnsemble | None]:
        cfg = self.cfg
        pool_size = max(cfg.gen.Q, cfg.meta.V)
        tasks = TaskDistribution(self.dataset, self.tasks_cfg, pool_size,
                                 derive_rng(cfg.master_seed, _POOL, r))
        if cfg.method == "metarlbo":
            start = self.theta0 if cfg.warm_start else \
                init_policy(self.policy_spec, derive_rng(cfg.master_seed, _INIT, 10 + r))
            self.theta0 = meta_train(start, tasks, cfg.meta, None,
                                     derive_rng(cfg.master_seed, _META, r))
            cands, ens = finetune_and_generate(self.theta0, _Head(tasks, cfg.gen.Q), cfg.gen, None,
                                               derive_rng(cfg.master_seed, _GEN, r), cfg.meta.rl,
                                               cfg.sigma_floor, cfg.batch_size)
        else:
            cands, ens = scratch_and_generate(self.policy_spec, _Head(tasks, cfg.gen.Q), cfg.gen,
                                              cfg.scratch_steps, cfg.meta.rl,
                                              derive_rng(cfg.master_seed, _GEN, r), cfg.sigma_floor,
                                              cfg.batch_size)
        if cfg.surrogate == "fresh" or ens is None:
            spec = RegressorSpec(cfg.tasks.proxy_arch, cfg.oracle.length, self.alphabet.size)
            ens = build_ensemble(spec, self.dataset, max(2, cfg.surrogate_members), 1.0,
                                 cfg.tasks.proxy_train, derive_rng(cfg.master_seed, _SURR, r),
                                 cfg.sigma_floor)
        return cands, ens

    def step(self, r: int) -> RoundRecord:
        t0 = time.perf_counter()
        cfg = self.cfg
        if r == 0:
            batch, pool_size = self.initial_batch(), 0
        elif cfg.method in ("metarlbo", "policy_ensemble"):
            pool, ens = self.propose_metarlbo(r)
            self.last_ensemble = ens
            batch = select_batch(pool, ens, cfg.acquisition, cfg.batch_size)
            pool_size = len(pool)
        else:
            from .bench.baselines import propose_baseline
            batch = propose_baseline(cfg, self.dataset, derive_rng(cfg.master_seed, _BASE, r))
            pool_size = len(batch)
        if any(s in self.dataset for s in batch):
            raise RuntimeError(f"round {r}: selected batch repeats queried sequences")
        scores = query_batch(self.oracle, batch, self.ledger, r)
        selected = []
        for s, y in zip(batch, scores):
            if self.dataset.insert(s, y, r):
                selected.append(ScoredSequence(s, y, r))
        rec = RoundRecord(r, selected, float(max(scores)), float(np.mean(scores)),
                          self.dataset.cumulative_max()[-1], pool_size,
                          time.perf_counter() - t0, self.ledger.total_queries)
        self.records.append(rec)
        self._checkpoint(r)
        return rec

    def run(self) -> list[RoundRecord]:
        for r in range(len(self.records), self.cfg.rounds):
            try:
                rec = self.step(r)
            except Exception as err:
                self.flush()
                raise RuntimeError(f"campaign failed in round {r}: {err}") from err
            log.info("round %d: batch max %.4g, cumulative max %.4g, pool %d (%.1fs)",
                     r, rec.batch_max, rec.cumulative_max, rec.pool_size, rec.wall_time)
        self.flush()
        return self.records

    # -- outputs ---------------------------------------------------------
    def _checkpoint(self, r: int) -> None:
        if self.out_dir is None or self.cfg.method != "metarlbo":
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"theta0_round{r:02d}.params"
        self.theta0.save(path, {"round": r, "master_seed": self.cfg.master_seed})
        self.checksums[path.name] = checksum(self.theta0.theta)

    def flush(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "rounds.csv").write_text(records_to_csv(self.records))
        self.dataset.save(self.out_dir / "dataset.tsv")
        manifest = {"config": config_to_dict(self.cfg),
                    "master_seed": self.cfg.master_seed,
                    "rounds_completed": len(self.records),
                    "total_queries": self.ledger.total_queries,
                    "per_round_queries": self.ledger.per_round_queries,
                    "checkpoints": self.checksums}
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


class _Head(TaskDistribution):
    """View of the first ``k`` tasks of a pool (generation uses Q of them)."""

    def __init__(self, base: TaskDistribution, k: int):
        self.cfg = base.cfg
        self.dataset = base.dataset
        self.proxies = base.proxies[:k]
        self.reference = base.reference
        self.envs = base.envs[:k]


def run_campaign(cfg: CampaignConfig, out_dir: str | Path | None = None) -> list[RoundRecord]:
    return Campaign(cfg, out_dir).run()
