"""Autoregressive sequence generator trained with REINFORCE.

The generator builds a sequence one token at a time. The state is the
prefix built so far, encoded as a one-hot ``(L_max, A_eff)`` grid (empty
rows for unfilled positions) plus a sinusoidal positional encoding, then
flattened and fed to a two-layer ReLU network that outputs next-token
logits. Variable-length tasks add an EOS action, which is masked at the
first step so every sequence has at least one token.

Rewards are sparse: zero until termination, then ``reward_fn(sequence)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence as SequenceT

import numpy as np

from .nn import ParamLayout, dense_layout, he_init, load_params, mlp_backward, mlp_forward, save_params
from .seqcore import Alphabet, Sequence

RewardFn = Callable[[list], np.ndarray]


@dataclass(frozen=True)
class PolicySpec:
    horizon: int
    n_actions: int
    hidden: tuple[int, ...] = (128, 128)

    @property
    def input_dim(self) -> int:
        return self.horizon * self.n_actions

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(tuple(dense_layout([self.input_dim, *self.hidden, self.n_actions])))

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable parameter vector of the generator network."""

    spec: PolicySpec
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.spec.layout.size,):
            raise ValueError(f"expected {self.spec.layout.size} parameters, got {theta.shape}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def replace(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.spec, theta)

    def tensors(self) -> dict[str, np.ndarray]:
        return self.spec.layout.unpack(self.theta)

    def save(self, path, header: dict | None = None) -> None:
        save_params(path, self.spec.layout, self.theta,
                    {"policy": {"horizon": self.spec.horizon, "n_actions": self.spec.n_actions,
                                "hidden": list(self.spec.hidden)}, **(header or {})})

    @classmethod
    def load(cls, path) -> "PolicyParams":
        layout, theta, header = load_params(path)
        h = header["policy"]
        spec = PolicySpec(h["horizon"], h["n_actions"], tuple(h["hidden"]))
        if spec.layout != layout:
            raise ValueError(f"{path}: tensor layout does not match policy header")
        return cls(spec, theta)


def init_policy(spec: PolicySpec, rng: np.random.Generator, output_gain: float = 0.1) -> PolicyParams:
    """He-initialized hidden layers; a small output layer keeps the initial policy near uniform."""
    out = f"W{spec.n_layers - 1}"
    return PolicyParams(spec, he_init(spec.layout, rng, {out: output_gain}))


@dataclass
class GenEnv:
    """Sequence-construction MDP: deterministic append, sparse terminal reward."""

    alphabet: Alphabet
    horizon: int
    reward_fn: RewardFn
    variable_length: bool = False
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.variable_length and not self.alphabet.has_eos:
            raise ValueError("variable-length environments need an alphabet with EOS")

    @property
    def n_actions(self) -> int:
        return self.alphabet.n_actions if self.variable_length else self.alphabet.size

    @property
    def eos(self) -> int | None:
        return self.alphabet.size if self.variable_length else None

    def policy_spec(self, hidden: tuple[int, ...] = (128, 128)) -> PolicySpec:
        return PolicySpec(self.horizon, self.n_actions, hidden)

    @staticmethod
    def step(prefix: Sequence, action: int) -> Sequence:
        return tuple(prefix) + (int(action),)


@dataclass
class Trajectory:
    actions: tuple[int, ...]
    terminal_reward: float
    returns: np.ndarray
    sequence: Sequence = ()
    gamma: float = 1.0

    @property
    def states(self) -> list[Sequence]:
        """Prefixes seen before each action."""
        return [self.actions[:t] for t in range(len(self.actions))]

    @property
    def length(self) -> int:
        return len(self.actions)


def discounted_returns(terminal_reward: float, n_steps: int, gamma: float) -> np.ndarray:
    """``G_t = gamma**(T-1-t) * R`` for a reward paid only at the last step."""
    return terminal_reward * gamma ** np.arange(n_steps - 1, -1, -1, dtype=float)


@dataclass(frozen=True)
class RLConfig:
    alpha: float = 0.05
    entropy_coeff: float = 0.01
    trajectories_per_update: int = 16
    gamma: float = 1.0
    baseline: str = "none"  # or "mean": subtract the batch-mean terminal reward
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("inner step size alpha must be >= 0")
        if self.entropy_coeff < 0:
            raise ValueError("entropy coefficient must be >= 0")
        if self.trajectories_per_update < 1:
            raise ValueError("trajectories_per_update must be >= 1")
        if self.baseline not in ("none", "mean"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


# ---------------------------------------------------------------------------
# encoding

_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_table(length: int, depth: int) -> np.ndarray:
    key = (length, depth)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i2 = (np.arange(depth) // 2 * 2)[None, :]
        angle = pos / np.power(10000.0, i2 / depth)
        table = np.where(np.arange(depth)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))
        table.setflags(write=False)
        _PE_CACHE[key] = table
    return _PE_CACHE[key]


def encode_prefixes(tokens: np.ndarray, horizon: int, n_actions: int) -> np.ndarray:
    """Batch form of :func:`positional_encode`; ``tokens`` is (n, horizon) with -1 for unfilled."""
    n = tokens.shape[0]
    grid = np.broadcast_to(positional_table(horizon, n_actions), (n, horizon, n_actions)).copy()
    rows, cols = np.nonzero(tokens >= 0)
    grid[rows, cols, tokens[rows, cols]] += 1.0
    return grid.reshape(n, horizon * n_actions)


def positional_encode(prefix: SequenceT[int], horizon: int, n_actions: int) -> np.ndarray:
    if len(prefix) > horizon:
        raise ValueError(f"prefix length {len(prefix)} exceeds horizon {horizon}")
    tokens = np.full((1, horizon), -1, dtype=np.int64)
    tokens[0, :len(prefix)] = prefix
    return encode_prefixes(tokens, horizon, n_actions)[0]


# ---------------------------------------------------------------------------
# network

def policy_logits(params: PolicyParams, inputs: np.ndarray):
    out, acts = mlp_forward(params.tensors(), inputs, params.spec.n_layers)
    return out, acts


def _log_softmax(logits: np.ndarray, allowed: np.ndarray | None) -> np.ndarray:
    if allowed is not None:
        logits = np.where(allowed, logits, -np.inf)
    shift = logits.max(axis=-1, keepdims=True)
    z = logits - shift
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_mask(steps: np.ndarray, n_actions: int, eos: int | None) -> np.ndarray | None:
    """Allowed-action mask; EOS is forbidden at step 0."""
    if eos is None:
        return None
    mask = np.ones((len(steps), n_actions), dtype=bool)
    mask[steps == 0, eos] = False
    return mask


def action_distribution(params: PolicyParams, prefixes: SequenceT[SequenceT[int]],
                        eos: int | None = None) -> np.ndarray:
    spec = params.spec
    tokens = np.full((len(prefixes), spec.horizon), -1, dtype=np.int64)
    for i, pfx in enumerate(prefixes):
        tokens[i, :len(pfx)] = pfx
    logits, _ = policy_logits(params, encode_prefixes(tokens, spec.horizon, spec.n_actions))
    steps = np.array([len(p) for p in prefixes])
    return np.exp(_log_softmax(logits, action_mask(steps, spec.n_actions, eos)))


# ---------------------------------------------------------------------------
# rollouts

def rollout_tokens(params: PolicyParams, env: GenEnv, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample n action sequences; returns (actions (n, H) padded with -1, step counts)."""
    spec = params.spec
    if spec.n_actions != env.n_actions or spec.horizon != env.horizon:
        raise ValueError("policy geometry does not match the environment")
    H, A = env.horizon, env.n_actions
    eos = env.eos
    actions = np.full((n, H), -1, dtype=np.int64)
    body = np.full((n, H), -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    tensors = params.tensors()
    for t in range(H):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        logits, _ = mlp_forward(tensors, encode_prefixes(body[idx], H, A), spec.n_layers)
        logp = _log_softmax(logits, action_mask(np.full(idx.size, t), A, eos))
        probs = np.exp(logp)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(idx.size)[:, None] * cdf[:, -1:]
        a = np.minimum((cdf <= u).sum(axis=1), A - 1)
        # never land on a zero-probability action through round-off
        while True:
            bad = probs[np.arange(idx.size), a] == 0
            if not bad.any():
                break
            a[bad] -= 1
        actions[idx, t] = a
        lengths[idx] += 1
        if eos is not None:
            stop = a == eos
            body[idx[~stop], t] = a[~stop]
            alive[idx[stop]] = False
        else:
            body[idx, t] = a
    return actions, lengths


def sample_trajectories(params: PolicyParams, env: GenEnv, n: int,
                        rng: np.random.Generator) -> list[Trajectory]:
    if n < 1:
        raise ValueError("need at least one trajectory")
    actions, lengths = rollout_tokens(params, env, n, rng)
    eos = env.eos
    seqs = []
    for row, T in zip(actions, lengths):
        acts = row[:T]
        if eos is not None and T and acts[-1] == eos:
            acts = acts[:-1]
        seqs.append(tuple(int(a) for a in acts))
    try:
        rewards = np.asarray(env.reward_fn(seqs), dtype=float)
    except Exception as err:
        raise RuntimeError(f"reward function failed on a batch of {n} trajectories "
                           f"(first sequence {seqs[0]})") from err
    if rewards.shape != (n,):
        raise RuntimeError(f"reward function returned shape {rewards.shape}, expected ({n},)")
    return [Trajectory(tuple(int(a) for a in actions[i, :lengths[i]]), float(rewards[i]),
                       discounted_returns(float(rewards[i]), int(lengths[i]), env.gamma),
                       seqs[i], env.gamma)
            for i in range(n)]


# ---------------------------------------------------------------------------
# loss

def reinforce_loss(params: PolicyParams, trajectories: SequenceT[Trajectory],
                   entropy_coeff: float = 0.0, eos: int | None = None,
                   baseline: str = "none") -> tuple[float, np.ndarray]:
    """REINFORCE surrogate loss with entropy bonus, and its exact gradient.

    ``loss = -(1/N) sum_traj (1/T) sum_t [G_t log pi(a_t|s_t) + c_H H(pi(.|s_t))]``.
    Descending this loss raises expected return and policy entropy.
    """
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    spec = params.spec
    H, A = spec.horizon, spec.n_actions
    N = len(trajectories)
    offset = 0.0
    if baseline == "mean":
        offset = float(np.mean([tr.terminal_reward for tr in trajectories]))
    total = sum(tr.length for tr in trajectories)
    tokens = np.full((total, H), -1, dtype=np.int64)
    taken = np.empty(total, dtype=np.int64)
    steps = np.empty(total, dtype=np.int64)
    G = np.empty(total)
    weight = np.empty(total)
    r = 0
    for tr in trajectories:
        T = tr.length
        acts = np.asarray(tr.actions, dtype=np.int64)
        body = acts if eos is None else np.where(acts == eos, -1, acts)
        for t in range(T):
            tokens[r + t, :t] = body[:t]
        taken[r:r + T] = acts
        steps[r:r + T] = np.arange(T)
        G[r:r + T] = tr.returns if baseline == "none" else \
            discounted_returns(tr.terminal_reward - offset, T, tr.gamma)
        weight[r:r + T] = 1.0 / (N * T)
        r += T

    inputs = encode_prefixes(tokens, H, A)
    tensors = params.tensors()
    logits, acts = mlp_forward(tensors, inputs, spec.n_layers)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("policy produced non-finite logits")
    mask = action_mask(steps, A, eos)
    logp = _log_softmax(logits, mask)
    p = np.exp(logp)
    plogp = np.where(p > 0, p * np.where(p > 0, logp, 0.0), 0.0)
    entropy = -plogp.sum(axis=1)
    rows = np.arange(total)
    chosen = logp[rows, taken]
    loss = -float(np.sum(weight * (G * chosen + entropy_coeff * entropy)))

    onehot = np.zeros_like(p)
    onehot[rows, taken] = 1.0
    d_logp = G[:, None] * (onehot - p)
    d_ent = -(plogp + p * entropy[:, None])
    g_logits = -weight[:, None] * (d_logp + entropy_coeff * d_ent)
    grads = mlp_backward(tensors, acts, g_logits, spec.n_layers)
    return loss, spec.layout.pack(grads)


def inner_update(params: PolicyParams, env: GenEnv, cfg: RLConfig,
                 rng: np.random.Generator) -> PolicyParams:
    """One REINFORCE gradient step on freshly sampled trajectories."""
    trajs = sample_trajectories(params, env, cfg.trajectories_per_update, rng)
    _, grad = reinforce_loss(params, trajs, cfg.entropy_coeff, env.eos, cfg.baseline)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite policy gradient")
    return params.replace(params.theta - cfg.alpha * grad)


def adapt(params: PolicyParams, env: GenEnv, cfg: RLConfig, steps: int,
          rng: np.random.Generator) -> PolicyParams:
    for _ in range(steps):
        params = inner_update(params, env, cfg, rng)
    return params


def sample_sequences(params: PolicyParams, env: GenEnv, n: int,
                     rng: np.random.Generator) -> list[Sequence]:
    """Draw n sequences without evaluating any reward."""
    actions, lengths = rollout_tokens(params, env, n, rng)
    eos = env.eos
    out = []
    for row, T in zip(actions, lengths):
        acts = row[:T]
        if eos is not None and acts[-1] == eos:
            acts = acts[:-1]
        out.append(tuple(int(a) for a in acts))
    return out
