"""Flat parameter vectors, Adam, and the parameter checkpoint format.

Every model in the package keeps its weights in one float64 vector (or a
stack of them, shape ``(members, P)``) described by a :class:`ParamLayout`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = "METARLBO-PARAMS 1"


@dataclass(frozen=True)
class ParamLayout:
    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return sum(math.prod(shape) for _, shape in self.entries)

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.entries:
            n = math.prod(shape)
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Views into `theta`; leading (stack) axes are preserved."""
        lead = theta.shape[:-1]
        if theta.shape[-1] != self.size:
            raise ValueError(f"parameter vector has {theta.shape[-1]} entries, layout needs {self.size}")
        return {name: theta[..., sl].reshape(lead + shape) for name, (sl, shape) in self.slices().items()}

    def pack(self, tensors: dict[str, np.ndarray], lead: tuple[int, ...] = ()) -> np.ndarray:
        theta = np.empty(lead + (self.size,))
        for name, (sl, shape) in self.slices().items():
            theta[..., sl] = np.asarray(tensors[name]).reshape(lead + (-1,))
        return theta


def dense_layout(sizes: list[int], prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
    entries = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        entries += [(f"{prefix}W{i}", (a, b)), (f"{prefix}b{i}", (b,))]
    return entries


def he_init(layout: ParamLayout, rng: np.random.Generator, gains: dict[str, float] | None = None) -> np.ndarray:
    """He-normal weights (fan-in from the first axis), zero biases."""
    gains = gains or {}
    tensors = {}
    for name, shape in layout.entries:
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            std = gains.get(name, math.sqrt(2.0)) / math.sqrt(shape[0])
            tensors[name] = rng.standard_normal(shape) * std
    return layout.pack(tensors)


def mlp_forward(p: dict[str, np.ndarray], x: np.ndarray, n_layers: int):
    """Dense ReLU network on the last axis; the final layer is linear.

    Weights may carry leading stack axes; ``x`` broadcasts against them.
    """
    h = x
    acts = [h]
    for i in range(n_layers):
        h = h @ p[f"W{i}"] + p[f"b{i}"][..., None, :]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(p: dict[str, np.ndarray], acts: list[np.ndarray], g: np.ndarray,
                 n_layers: int) -> dict[str, np.ndarray]:
    grads = {}
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (acts[i + 1] > 0)
        a = np.broadcast_to(acts[i], g.shape[:-1] + acts[i].shape[-1:])
        grads[f"W{i}"] = np.swapaxes(a, -1, -2) @ g
        grads[f"b{i}"] = g.sum(axis=-2)
        if i > 0:
            g = g @ np.swapaxes(p[f"W{i}"], -1, -2)
    return grads


class Adam:
    """Adam over a (possibly stacked) flat parameter array."""

    def __init__(self, shape, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, dtype=np.float64):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return (theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(theta.dtype)


def save_params(path: str | Path, layout: ParamLayout, theta: np.ndarray,
                header: dict[str, Any] | None = None) -> None:
    """Write named tensors as little-endian float64 after a two-line text header."""
    theta = np.asarray(theta, dtype=np.float64)
    meta = {"header": header or {},
            "lead": list(theta.shape[:-1]),
            "tensors": [{"name": n, "shape": list(s)} for n, s in layout.entries]}
    with open(path, "wb") as fh:
        fh.write((MAGIC + "\n" + json.dumps(meta, sort_keys=True) + "\n").encode())
        for name, t in layout.unpack(theta).items():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[ParamLayout, np.ndarray, dict[str, Any]]:
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    second = raw.index(b"\n", first + 1)
    if raw[:first].decode() != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    meta = json.loads(raw[first + 1:second])
    layout = ParamLayout(tuple((t["name"], tuple(t["shape"])) for t in meta["tensors"]))
    lead = tuple(meta["lead"])
    body = np.frombuffer(raw[second + 1:], dtype="<f8")
    tensors, offset = {}, 0
    for name, shape in layout.entries:
        n = math.prod(lead) * math.prod(shape)
        tensors[name] = body[offset:offset + n].reshape(lead + shape)
        offset += n
    if offset != body.size:
        raise ValueError(f"{path}: expected {offset} values, found {body.size}")
    return layout, layout.pack(tensors, lead).astype(np.float64), meta["header"]


def checksum(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()
