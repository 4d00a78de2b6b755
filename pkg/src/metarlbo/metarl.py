"""Proxy-MDP task distribution, first-order MAML, and candidate generation.

A task is the sequence-construction MDP whose terminal reward is a proxy
regressor fitted to a subsample of the queried data, minus a density
penalty that discourages revisiting already-queried sequences:

    r(s) = proxy(s) - lam * sum_{x in D, d(s, x) < eps} w(d(s, x))

with ``w(d) = 1 - d / eps`` ("linear") or ``w = 1`` ("uniform").

Training a proxy per sampled task is the dominant cost, so a round trains a
finite pool of proxies once (:class:`TaskDistribution`) and meta-training
and generation draw tasks from that pool.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence as SequenceT

import numpy as np

from .policy import (GenEnv, PolicyParams, PolicySpec, RLConfig, adapt, init_policy,
                     reinforce_loss, sample_sequences, sample_trajectories)
from .seqcore import Dataset, Sequence, distances_to_many, subsample_indices
from .surrogate import ProxyEnsemble, ProxyModel, RegressorSpec, TrainConfig, train_stack

@dataclass(frozen=True)
class TaskSamplerConfig:
    p: float = 1.0
    proxy_arch: str = "conv1d"
    proxy_train: TrainConfig = field(default_factory=TrainConfig)
    lam: float = 0.1
    epsilon: float = 2.0
    distance: str = "hamming"
    weighting: str = "linear"
    horizon: int | None = None  # None: longest sequence in the dataset
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.distance not in ("hamming", "edit"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.weighting not in ("linear", "uniform"):
            raise ValueError(f"unknown density weighting {self.weighting!r}")


@dataclass(frozen=True)
class MetaConfig:
    V: int = 4
    K: int = 2
    eta: float = 0.05
    meta_iters: int = 50
    rl: RLConfig = field(default_factory=RLConfig)
    outer_trajectories: int | None = None  # None: rl.trajectories_per_update

    def __post_init__(self):
        if self.V < 1:
            raise ValueError("V must be >= 1")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.meta_iters < 0:
            raise ValueError("meta_iters must be >= 0")


@dataclass(frozen=True)
class GenPhaseConfig:
    Q: int = 32
    per_policy: int = 64
    finetune_steps: int = 2

    def __post_init__(self):
        if self.Q < 1 or self.per_policy < 1:
            raise ValueError("Q and per_policy must be >= 1")
        if self.finetune_steps < 0:
            raise ValueError("finetune_steps must be >= 0")


# ---------------------------------------------------------------------------
# diversity penalty

def density(seqs: SequenceT[Sequence], reference: tuple[np.ndarray, np.ndarray],
            epsilon: float, metric: str = "hamming", weighting: str = "linear") -> np.ndarray:
    """Weighted count of reference sequences closer than `epsilon` to each of `seqs`."""
    tokens, lengths = reference
    out = np.zeros(len(seqs))
    if len(tokens) == 0 or len(seqs) == 0:
        return out
    if metric == "hamming" and len({len(s) for s in seqs}) == 1 and tokens.shape[1] == len(seqs[0]):
        q = np.asarray(seqs)
        same = lengths == q.shape[1]
        for start in range(0, len(q), 64):
            block = q[start:start + 64]
            d = (block[:, None, :] != tokens[None, :, :]).sum(axis=2)
            d = np.where(same[None, :], d, np.iinfo(np.int64).max)
            out[start:start + 64] = _weigh(d, epsilon, weighting).sum(axis=1)
        return out
    for i, s in enumerate(seqs):
        if metric == "hamming":
            same = lengths == len(s)
            if tokens.shape[1] < len(s) or not same.any():
                continue
            d = (tokens[same][:, :len(s)] != np.asarray(s)).sum(axis=1)
        else:
            d = distances_to_many(s, tokens, lengths, "edit")
        out[i] = _weigh(d, epsilon, weighting).sum()
    return out


def _weigh(d: np.ndarray, epsilon: float, weighting: str) -> np.ndarray:
    inside = d < epsilon
    if weighting == "uniform":
        return inside.astype(float)
    return np.where(inside, 1.0 - np.minimum(d, epsilon) / epsilon, 0.0)


@dataclass
class TaskReward:
    """Terminal reward of one task: proxy prediction minus the density penalty."""

    proxy: ProxyModel
    reference: tuple[np.ndarray, np.ndarray]
    lam: float
    epsilon: float
    distance: str = "hamming"
    weighting: str = "linear"

    def __call__(self, seqs: SequenceT[Sequence]) -> np.ndarray:
        seqs = list(seqs)
        value = self.proxy.predict_many(seqs)
        if self.lam > 0:
            value = value - self.lam * density(seqs, self.reference, self.epsilon,
                                               self.distance, self.weighting)
        return value


def _make_env(dataset: Dataset, cfg: TaskSamplerConfig, proxy: ProxyModel,
              reference) -> GenEnv:
    alphabet = dataset.alphabet
    horizon = cfg.horizon or int(max(len(s) for s in dataset.sequences()))
    reward = TaskReward(proxy, reference, cfg.lam, cfg.epsilon, cfg.distance, cfg.weighting)
    return GenEnv(alphabet, horizon, reward, variable_length=alphabet.has_eos, gamma=cfg.gamma)


def _proxy_spec(dataset: Dataset, cfg: TaskSamplerConfig) -> RegressorSpec:
    horizon = cfg.horizon or int(max(len(s) for s in dataset.sequences()))
    return RegressorSpec(cfg.proxy_arch, horizon, dataset.alphabet.size)


class TaskDistribution:
    """A finite draw of proxy tasks from the current dataset.

    ``size`` proxies are trained together, each on its own ``p``-subsample
    with its own initialization seed.
    """

    def __init__(self, dataset: Dataset, cfg: TaskSamplerConfig, size: int,
                 rng: np.random.Generator):
        if len(dataset) < 1:
            raise ValueError("cannot build tasks from an empty dataset")
        if size < 1:
            raise ValueError("task pool size must be >= 1")
        self.cfg = cfg
        self.dataset = dataset
        seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=size)]
        subsets = [subsample_indices(len(dataset), cfg.p, np.random.default_rng([s, 1]))
                   for s in seeds]
        spec = _proxy_spec(dataset, cfg)
        x = spec.encode(dataset.sequences())
        self.proxies = train_stack(spec, x, dataset.scores(), subsets, seeds, cfg.proxy_train)
        for m in self.proxies:
            m.p = cfg.p
        tokens, lengths, _ = dataset.arrays()
        self.reference = (tokens, lengths)
        self.envs = [_make_env(dataset, cfg, m, self.reference) for m in self.proxies]

    def __len__(self) -> int:
        return len(self.envs)

    def sample(self, k: int, rng: np.random.Generator) -> list[GenEnv]:
        """k distinct tasks (all of them, in order, when k equals the pool size)."""
        if k == len(self.envs):
            return list(self.envs)
        if k > len(self.envs):
            idx = rng.choice(len(self.envs), size=k, replace=True)
        else:
            idx = rng.choice(len(self.envs), size=k, replace=False)
        return [self.envs[i] for i in idx]

    def ensemble(self, sigma_floor: float = 1e-3, k: int | None = None) -> ProxyEnsemble:
        return ProxyEnsemble(self.proxies[:k] if k else list(self.proxies), sigma_floor)


def sample_task(dataset: Dataset, cfg: TaskSamplerConfig, rng: np.random.Generator) -> GenEnv:
    """Fit one proxy on a fresh ``p``-subsample and wrap it as a task."""
    return TaskDistribution(dataset, cfg, 1, rng).envs[0]


# ---------------------------------------------------------------------------
# meta-training

def _task_gradient(theta0: PolicyParams, env: GenEnv, meta: MetaConfig,
                   rng: np.random.Generator) -> np.ndarray:
    adapted = adapt(theta0, env, meta.rl, meta.K, rng)
    n = meta.outer_trajectories or meta.rl.trajectories_per_update
    trajs = sample_trajectories(adapted, env, n, rng)
    _, grad = reinforce_loss(adapted, trajs, meta.rl.entropy_coeff, env.eos, meta.rl.baseline)
    return grad


def meta_step(theta0: PolicyParams, envs: SequenceT[GenEnv], meta: MetaConfig,
              task_seeds: SequenceT[int]) -> PolicyParams:
    """One first-order meta-update: average post-adaptation gradients over tasks."""
    grads = [_task_gradient(theta0, env, meta, np.random.default_rng(seed))
             for env, seed in zip(envs, task_seeds)]
    g = np.mean(grads, axis=0)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite meta-gradient")
    return theta0.replace(theta0.theta - meta.eta * g)


def meta_train(theta0: PolicyParams, tasks: Dataset | TaskDistribution, meta: MetaConfig,
               task_cfg: TaskSamplerConfig | None, rng: np.random.Generator,
               pool_size: int | None = None) -> PolicyParams:
    """First-order MAML over proxy tasks; returns new meta-parameters.

    `tasks` is either a prebuilt :class:`TaskDistribution` or a dataset, in
    which case a pool of ``pool_size`` (default ``V``) tasks is trained first.
    """
    if isinstance(tasks, Dataset):
        if task_cfg is None:
            raise ValueError("task_cfg is required when meta-training from a dataset")
        tasks = TaskDistribution(tasks, task_cfg, pool_size or meta.V, rng)
    for it in range(meta.meta_iters):
        envs = tasks.sample(meta.V, rng)
        seeds = rng.integers(0, 2 ** 63 - 1, size=meta.V)
        try:
            theta0 = meta_step(theta0, envs, meta, seeds)
        except FloatingPointError as err:
            raise FloatingPointError(f"meta-iteration {it}: {err}") from err
    return theta0


# ---------------------------------------------------------------------------
# generation

def dedup_pool(candidates: SequenceT[Sequence], dataset: Dataset) -> list[Sequence]:
    """Drop repeats and already-queried sequences, keeping first occurrences."""
    seen, out = set(), []
    for s in candidates:
        if s in seen or s in dataset:
            continue
        seen.add(s)
        out.append(s)
    return out


def _generate(policies_and_envs, per_policy: int, dataset: Dataset, seeds,
              min_pool: int = 0, max_draws: int = 20) -> list[Sequence]:
    """Pool samples from every policy; redraw while fewer than `min_pool` are new."""
    raw: list[Sequence] = []
    for draw in range(max_draws):
        for (params, env), seed in zip(policies_and_envs, seeds):
            raw += sample_sequences(params, env, per_policy, np.random.default_rng([seed, 2, draw]))
        pool = dedup_pool(raw, dataset)
        if len(pool) >= min_pool:
            break
    if not pool:
        raise RuntimeError(f"candidate pool is empty after removing {len(raw)} duplicates; "
                           "increase per_policy")
    return pool


def finetune_and_generate(theta0: PolicyParams, tasks: Dataset | TaskDistribution,
                          gen: GenPhaseConfig, task_cfg: TaskSamplerConfig | None,
                          rng: np.random.Generator, rl: RLConfig | None = None,
                          sigma_floor: float = 1e-3,
                          min_pool: int = 0) -> tuple[list[Sequence], ProxyEnsemble | None]:
    """Fine-tune Q copies of ``theta0`` on Q tasks and pool their samples.

    Returns the deduplicated candidate pool and the ensemble of the Q task
    proxies (``None`` when ``Q == 1``, which cannot form an ensemble).
    The fine-tuned policies are resampled while the pool holds fewer than
    `min_pool` new sequences (at most 20 draws).
    """
    if isinstance(tasks, Dataset):
        if task_cfg is None:
            raise ValueError("task_cfg is required when generating from a dataset")
        tasks = TaskDistribution(tasks, task_cfg, gen.Q, rng)
    rl = rl or RLConfig()
    envs = tasks.sample(gen.Q, rng)
    seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=gen.Q)]
    policies = [(adapt(theta0, env, rl, gen.finetune_steps, np.random.default_rng([s, 1])), env)
                for env, s in zip(envs, seeds)]
    pool = _generate(policies, gen.per_policy, tasks.dataset, seeds, min_pool)
    proxies = [env.reward_fn.proxy for env in envs]
    ensemble = ProxyEnsemble(proxies, sigma_floor) if len(proxies) >= 2 else None
    return pool, ensemble


def scratch_and_generate(spec: PolicySpec, tasks: TaskDistribution, gen: GenPhaseConfig,
                         steps: int, rl: RLConfig, rng: np.random.Generator,
                         sigma_floor: float = 1e-3,
                         min_pool: int = 0) -> tuple[list[Sequence], ProxyEnsemble | None]:
    """Ablation: Q freshly initialized policies, each trained on its own task."""
    envs = tasks.sample(gen.Q, rng)
    seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=gen.Q)]
    policies = []
    for env, s in zip(envs, seeds):
        r = np.random.default_rng([s, 1])
        policies.append((adapt(init_policy(spec, r), env, rl, steps, r), env))
    pool = _generate(policies, gen.per_policy, tasks.dataset, seeds, min_pool)
    proxies = [env.reward_fn.proxy for env in envs]
    ensemble = ProxyEnsemble(proxies, sigma_floor) if len(proxies) >= 2 else None
    return pool, ensemble
