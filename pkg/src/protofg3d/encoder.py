"""Desk-scale embedding map with hand-written backward pass and SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateEmbedding

MIN_NORM = 1e-12


@dataclass
class LinearEncoder:
    """``y = u / |u|`` with ``u = W x + b``, optionally after a tanh layer.

    With a hidden layer: ``u = W tanh(W_h x + b_h) + b``.
    """

    weight: np.ndarray
    bias: np.ndarray
    hidden_weight: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    @classmethod
    def init(cls, input_dim: int, output_dim: int, seed: int, hidden_dim: int = 0) -> "LinearEncoder":
        rng = np.random.default_rng(seed)
        hw = hb = None
        fan_in = input_dim
        if hidden_dim:
            bound = 1.0 / math.sqrt(input_dim)
            hw = rng.uniform(-bound, bound, size=(hidden_dim, input_dim))
            hb = rng.uniform(-bound, bound, size=hidden_dim)
            fan_in = hidden_dim
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(output_dim, fan_in))
        b = rng.uniform(-bound, bound, size=output_dim)
        return cls(w, b, hw, hb)

    @property
    def input_dim(self) -> int:
        return (self.hidden_weight if self.hidden_weight is not None else self.weight).shape[1]

    @property
    def hidden_dim(self) -> int:
        return 0 if self.hidden_weight is None else self.hidden_weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict:
        out = {}
        if self.hidden_weight is not None:
            out["hidden_weight"] = self.hidden_weight
            out["hidden_bias"] = self.hidden_bias
        out["weight"] = self.weight
        out["bias"] = self.bias
        return out

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(**{k: v.copy() for k, v in self.params().items()})


def _forward(enc: LinearEncoder, raw):
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise ContractError(f"expected N x {enc.input_dim} input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("encoder input contains non-finite values")
    a = None
    z = x
    if enc.hidden_weight is not None:
        a = np.tanh(x @ enc.hidden_weight.T + enc.hidden_bias)
        z = a
    u = z @ enc.weight.T + enc.bias
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norm <= MIN_NORM):
        bad = int(np.flatnonzero(norm[:, 0] <= MIN_NORM)[0])
        raise DegenerateEmbedding(f"pre-normalization norm of row {bad} is {norm[bad, 0]:.3e}")
    return u / norm, (x, a, norm)


def encode(enc: LinearEncoder, raw_views) -> np.ndarray:
    return _forward(enc, raw_views)[0]


def encode_backward(enc: LinearEncoder, raw_views, grad_embeddings):
    """Return ``(param_grads, input_grads)`` for upstream ``dL/dy``."""
    y, (x, a, norm) = _forward(enc, raw_views)
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != y.shape:
        raise ContractError(f"gradient shape {g.shape} != embedding shape {y.shape}")
    gu = (g - y * np.sum(y * g, axis=1, keepdims=True)) / norm
    z = x if a is None else a
    grads = {"weight": gu.T @ z, "bias": gu.sum(axis=0)}
    gz = gu @ enc.weight
    if a is None:
        return grads, gz
    ga = gz * (1.0 - a * a)
    grads["hidden_weight"] = ga.T @ x
    grads["hidden_bias"] = ga.sum(axis=0)
    return {k: grads[k] for k in enc.params()}, ga @ enc.hidden_weight


@dataclass
class OptimizerState:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.001
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError(f"lr must be nonnegative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def sgd_step(enc, grads: dict, state: OptimizerState):
    """``v <- m v + g + wd theta``; ``theta <- theta - lr v`` (in place).

    ``enc`` is anything with a ``params()`` dict of arrays.
    """
    for name, theta in enc.params().items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = state.momentum * v + g + state.weight_decay * theta
        state.velocity[name] = v
        theta -= state.lr * v
    return enc, state


def lr_at(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Linear warm-up to ``lr0`` then cosine decay to 0 (step is 0-based)."""
    if step < warmup_steps:
        return lr0 * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))
