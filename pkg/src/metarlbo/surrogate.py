"""Proxy-oracle regressors, deep ensembles, and uncertainty diagnostics.

Two fixed architectures operate on one-hot ``(L_max, A)`` grids:

``mlp``
    flattened input -> 32 -> 8 -> 4 -> 1, ReLU hidden units.
``conv1d``
    32 filters of width 5 ('same' zero padding), ReLU, global max-pool
    over positions, dense -> 1.

Ensembles are trained as a stack: member ``m`` owns row ``m`` of a
``(M, P)`` parameter array and its own RNG stream, so a stack of one is
exactly :func:`train_regressor`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence as SequenceT

import numpy as np
from scipy.stats import norm

from .nn import (Adam, ParamLayout, dense_layout, he_init, load_params, mlp_backward,
                 mlp_forward, save_params)
from .seqcore import Dataset, ScoredSequence, one_hot, subsample_indices

ARCHS = ("mlp", "conv1d")


@dataclass(frozen=True)
class RegressorSpec:
    arch: str
    length: int  # L_max
    depth: int  # alphabet size
    mlp_hidden: tuple[int, ...] = (32, 8, 4)
    filters: int = 32
    kernel: int = 5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown regressor arch {self.arch!r}; expected one of {ARCHS}")
        if self.length < 1 or self.depth < 2:
            raise ValueError("regressor needs length >= 1 and depth >= 2")
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))

    @property
    def layout(self) -> ParamLayout:
        if self.arch == "mlp":
            sizes = [self.length * self.depth, *self.mlp_hidden, 1]
            return ParamLayout(tuple(dense_layout(sizes)))
        return ParamLayout((("conv_W", (self.kernel * self.depth, self.filters)),
                            ("conv_b", (self.filters,)),
                            ("out_W", (self.filters, 1)),
                            ("out_b", (1,))))

    @property
    def n_params(self) -> int:
        return self.layout.size

    def encode(self, seqs: SequenceT[SequenceT[int]]) -> np.ndarray:
        return one_hot(seqs, self.length, self.depth)

    def to_dict(self) -> dict:
        return {"arch": self.arch, "length": self.length, "depth": self.depth,
                "mlp_hidden": list(self.mlp_hidden), "filters": self.filters, "kernel": self.kernel}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    minibatch: int = 50
    seed: int = 0
    standardize: bool = True
    dtype: str = "float32"  # working precision of the optimizer loop only

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")


# ---------------------------------------------------------------------------
# forward / backward on stacked parameters

def _mlp_forward(spec, theta, feats):
    out, acts = mlp_forward(spec.layout.unpack(theta), feats, len(spec.mlp_hidden) + 1)
    return out[..., 0], acts


def _mlp_backward(spec, theta, acts, dy):
    grads = mlp_backward(spec.layout.unpack(theta), acts, dy[..., None], len(spec.mlp_hidden) + 1)
    return spec.layout.pack(grads, theta.shape[:-1])


def _patches(spec, x):
    """(..., n, L, A) -> (..., n, L, kernel * A) with 'same' zero padding."""
    k = spec.kernel
    left = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(left, k - 1 - left), (0, 0)]
    xp = np.pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)  # (..., n, L, A, k)
    win = np.swapaxes(win, -1, -2)
    return win.reshape(x.shape[:-1] + (k * spec.depth,))


def _conv_forward(spec, theta, cols):
    p = spec.layout.unpack(theta)
    n, L = cols.shape[-3], cols.shape[-2]
    flat = cols.reshape(cols.shape[:-3] + (n * L, cols.shape[-1]))
    h = flat @ p["conv_W"]
    h = h.reshape(h.shape[:-2] + (n, L, spec.filters)) + p["conv_b"][..., None, None, :]
    a = np.maximum(h, 0.0)
    pooled = a.max(axis=-2)
    y = pooled @ p["out_W"] + p["out_b"][..., None, :]
    return y[..., 0], (cols, h, a, pooled)


def _conv_backward(spec, theta, cache, dy):
    p = spec.layout.unpack(theta)
    cols, h, a, pooled = cache
    g_out = dy[..., None]
    grads = {"out_W": np.swapaxes(pooled, -1, -2) @ g_out,
             "out_b": g_out.sum(axis=-2)}
    g_pool = g_out @ np.swapaxes(p["out_W"], -1, -2)  # (..., n, F)
    # max-pool subgradient: split evenly over tied maxima, zero where ReLU is off
    hit = (a == pooled[..., None, :]) & (h > 0)
    count = np.maximum(hit.sum(axis=-2), 1)
    g_h = hit * (g_pool / count)[..., None, :]
    n, L = h.shape[-3], h.shape[-2]
    lead = h.shape[:-3]
    cols = np.broadcast_to(cols, lead + cols.shape[-3:])
    flat_cols = cols.reshape(lead + (n * L, cols.shape[-1]))
    flat_g = g_h.reshape(lead + (n * L, spec.filters))
    grads["conv_W"] = np.swapaxes(flat_cols, -1, -2) @ flat_g
    grads["conv_b"] = flat_g.sum(axis=-2)
    return spec.layout.pack(grads, theta.shape[:-1])


def featurize(spec: RegressorSpec, x: np.ndarray) -> np.ndarray:
    """Model-ready features for one-hot grids: flat vectors (mlp) or im2col patches (conv)."""
    if spec.arch == "mlp":
        return x.reshape(x.shape[:-2] + (-1,))
    return _patches(spec, x)


def forward_features(spec: RegressorSpec, theta: np.ndarray, feats: np.ndarray):
    if spec.arch == "mlp":
        return _mlp_forward(spec, theta, feats)
    return _conv_forward(spec, theta, feats)


def forward(spec: RegressorSpec, theta: np.ndarray, x: np.ndarray):
    """Raw (standardized-unit) outputs for parameters ``(..., P)`` on grids ``(..., n, L, A)``."""
    return forward_features(spec, theta, featurize(spec, x))


def backward(spec: RegressorSpec, theta: np.ndarray, cache, dy: np.ndarray) -> np.ndarray:
    if spec.arch == "mlp":
        return _mlp_backward(spec, theta, cache, dy)
    return _conv_backward(spec, theta, cache, dy)


def _loss_and_grad(spec, theta, feats, y):
    out, cache = forward_features(spec, theta, feats)
    resid = out - y
    n = resid.shape[-1]
    loss = (resid ** 2).mean(axis=-1)
    return loss, backward(spec, theta, cache, 2.0 * resid / n)


def mse_loss_and_grad(spec: RegressorSpec, theta: np.ndarray, x: np.ndarray,
                      y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared error per stacked member and its exact gradient."""
    return _loss_and_grad(spec, theta, featurize(spec, x), y)


def init_regressor(spec: RegressorSpec, rng: np.random.Generator) -> np.ndarray:
    gains = {"out_W": 1.0} if spec.arch == "conv1d" else {f"W{len(spec.mlp_hidden)}": 1.0}
    return he_init(spec.layout, rng, gains)


# ---------------------------------------------------------------------------
# models

@dataclass
class ProxyModel:
    spec: RegressorSpec
    params: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    training_subset_seed: int = 0
    p: float = 1.0
    train_mse: float = math.nan

    def predict_many(self, seqs: SequenceT[SequenceT[int]]) -> np.ndarray:
        return self.predict_grid(self.spec.encode(seqs))

    def predict_grid(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self.spec, self.params, x)
        return out * self.y_scale + self.y_mean

    def __call__(self, seq) -> float:
        return float(self.predict_many([seq])[0])

    def save(self, path) -> None:
        save_params(path, self.spec.layout, self.params,
                    {"regressor": self.spec.to_dict(), "y_mean": self.y_mean,
                     "y_scale": self.y_scale, "p": self.p,
                     "training_subset_seed": self.training_subset_seed,
                     "train_mse": self.train_mse})

    @classmethod
    def load(cls, path) -> "ProxyModel":
        layout, theta, header = load_params(path)
        r = header["regressor"]
        spec = RegressorSpec(r["arch"], r["length"], r["depth"], tuple(r["mlp_hidden"]),
                             r["filters"], r["kernel"])
        if spec.layout != layout:
            raise ValueError(f"{path}: tensor layout does not match regressor header")
        return cls(spec, theta, header["y_mean"], header["y_scale"],
                   header["training_subset_seed"], header["p"], header["train_mse"])


class Predictor(Protocol):
    def predict_many(self, seqs) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ProxyEnsemble:
    """Deep ensemble: mean and population std of member outputs (std floored)."""

    members: list[ProxyModel]
    sigma_floor: float = 1e-3
    _stack: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        specs = {m.spec for m in self.members}
        if len(specs) != 1:
            raise ValueError("ensemble members must share one regressor spec")

    @property
    def spec(self) -> RegressorSpec:
        return self.members[0].spec

    def member_predictions(self, seqs: SequenceT[SequenceT[int]], chunk: int = 1024) -> np.ndarray:
        """(M, n) predictions in oracle units."""
        if self._stack is None:
            self._stack = np.stack([m.params for m in self.members])
        scale = np.array([m.y_scale for m in self.members])[:, None]
        shift = np.array([m.y_mean for m in self.members])[:, None]
        outs = []
        for start in range(0, len(seqs), chunk):
            x = self.spec.encode(seqs[start:start + chunk])
            out, _ = forward(self.spec, self._stack, x[None])
            outs.append(out)
        raw = np.concatenate(outs, axis=1) if outs else np.zeros((len(self.members), 0))
        return raw * scale + shift

    def predict_many(self, seqs) -> tuple[np.ndarray, np.ndarray]:
        preds = self.member_predictions(list(seqs))
        mu = preds.mean(axis=0)
        sigma = np.maximum(preds.std(axis=0), self.sigma_floor)
        return mu, sigma


def predict(e: ProxyEnsemble, s) -> tuple[float, float]:
    mu, sigma = e.predict_many([tuple(s)])
    return float(mu[0]), float(sigma[0])


# ---------------------------------------------------------------------------
# training

def train_stack(spec: RegressorSpec, x: np.ndarray, y: np.ndarray,
                member_indices: SequenceT[np.ndarray], seeds: SequenceT[int],
                cfg: TrainConfig) -> list[ProxyModel]:
    """Train one regressor per (index set, seed) pair in lock-step.

    All index sets must have the same size. Member ``m`` sees only
    ``x[member_indices[m]]``, shuffled each epoch by its own generator.
    """
    sizes = {len(idx) for idx in member_indices}
    if len(sizes) != 1:
        raise ValueError("stacked members need equally sized training sets")
    n = sizes.pop()
    if n < 1:
        raise ValueError("cannot train on an empty dataset")
    M = len(seeds)
    idx = np.stack([np.asarray(i, dtype=np.int64) for i in member_indices])
    rngs = [np.random.default_rng(s) for s in seeds]
    theta = np.stack([init_regressor(spec, r) for r in rngs])

    ys = y[idx]
    if cfg.standardize:
        mean = ys.mean(axis=1)
        scale = ys.std(axis=1)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean, scale = np.zeros(M), np.ones(M)
    z = (ys - mean[:, None]) / scale[:, None]

    dtype = np.dtype(cfg.dtype)
    feats = featurize(spec, x).astype(dtype)
    theta, z = theta.astype(dtype), z.astype(dtype)
    opt = Adam(theta.shape, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, dtype=dtype)
    rows = np.arange(M)[:, None]
    loss = np.zeros(M)
    for epoch in range(cfg.epochs):
        perm = np.stack([r.permutation(n) for r in rngs])
        for b, start in enumerate(range(0, n, cfg.minibatch)):
            sel = perm[:, start:start + cfg.minibatch]
            loss, grad = _loss_and_grad(spec, theta, feats[idx[rows, sel]], z[rows, sel])
            if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, minibatch {b}")
            theta = opt.step(theta, grad)
    final = np.array([np.mean((forward_features(spec, theta[m], feats[idx[m]])[0] - z[m]) ** 2)
                      for m in range(M)])
    theta = theta.astype(np.float64)
    return [ProxyModel(spec, theta[m].copy(), float(mean[m]), float(scale[m]),
                       int(seeds[m]), 1.0, float(final[m] * scale[m] ** 2))
            for m in range(M)]


def _dataset_xy(spec: RegressorSpec, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return spec.encode(data.sequences()), data.scores()


def train_regressor(spec: RegressorSpec, data: Dataset, cfg: TrainConfig) -> ProxyModel:
    """Fit one proxy by Adam on MSE; deterministic in ``cfg.seed``."""
    if len(data) < 1:
        raise ValueError("cannot train on an empty dataset")
    x, y = _dataset_xy(spec, data)
    return train_stack(spec, x, y, [np.arange(len(data))], [cfg.seed], cfg)[0]


def build_ensemble(spec: RegressorSpec, data: Dataset, count: int, p: float,
                   cfg: TrainConfig, rng: np.random.Generator,
                   sigma_floor: float = 1e-3, seeds: SequenceT[int] | None = None) -> ProxyEnsemble:
    """Train `count` members, each on its own ``p``-subsample with its own init seed."""
    if count < 2:
        raise ValueError("an ensemble needs count >= 2")
    if seeds is None:
        seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=count)]
    if len(seeds) != count:
        raise ValueError("need one seed per member")
    subsets = [subsample_indices(len(data), p, np.random.default_rng([s, 1])) for s in seeds]
    x, y = _dataset_xy(spec, data)
    members = train_stack(spec, x, y, subsets, seeds, cfg)
    members = [replace(m, p=p) for m in members]
    return ProxyEnsemble(members, sigma_floor)


# ---------------------------------------------------------------------------
# uncertainty diagnostics

def _targets(test: SequenceT[ScoredSequence]):
    return [t.sequence for t in test], np.array([t.score for t in test])


def calibration_curve(e: Predictor, test: SequenceT[ScoredSequence],
                      levels: SequenceT[float] = tuple(np.round(np.arange(1, 10) / 10, 1)),
                      min_points: int = 10) -> list[tuple[float, float]]:
    """(expected, observed) coverage of central Gaussian intervals ``mu +- z * sigma``."""
    if len(test) == 0:
        raise ValueError("calibration needs a nonempty test set")
    if len(test) < min_points:
        raise ValueError(f"calibration needs at least {min_points} test points, got {len(test)}")
    levels = [float(c) for c in levels]
    if any(not 0.0 < c < 1.0 for c in levels):
        raise ValueError("confidence levels must lie in (0, 1)")
    seqs, y = _targets(test)
    mu, sigma = e.predict_many(seqs)
    err = np.abs(y - mu) / sigma
    return [(c, float(np.mean(err <= norm.ppf(0.5 + c / 2)))) for c in levels]


def ensemble_nll(e: Predictor, test: SequenceT[ScoredSequence]) -> np.ndarray:
    """Per-point Gaussian negative log-likelihood under (mu, sigma)."""
    if len(test) == 0:
        raise ValueError("NLL needs a nonempty test set")
    seqs, y = _targets(test)
    mu, sigma = e.predict_many(seqs)
    return 0.5 * np.log(2 * np.pi * sigma ** 2) + (y - mu) ** 2 / (2 * sigma ** 2)


def nll_summary(nll: np.ndarray) -> dict[str, float]:
    q1, med, q3 = np.percentile(nll, [25, 50, 75])
    return {"min": float(nll.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(nll.max()), "mean": float(nll.mean())}


@dataclass
class GaussianPredictor:
    """Wraps callables ``mean_fn(seqs)`` and ``std_fn(seqs)`` as a predictor."""

    mean_fn: object
    std_fn: object
    sigma_floor: float = 1e-3

    def predict_many(self, seqs):
        mu = np.asarray(self.mean_fn(seqs), dtype=float)
        sigma = np.maximum(np.asarray(self.std_fn(seqs), dtype=float), self.sigma_floor)
        return mu, sigma
