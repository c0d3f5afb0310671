"""Prototype-distance cross-entropy, view-prototype contrastive loss, and
their analytic gradients with respect to the view embeddings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ContractError

NORM_TOL = 1e-5


class VacuousLossWarning(UserWarning):
    """The contrastive loss had no negatives and was set to zero."""


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float = 0.2
    negative_policy: str = "all_other_classes"  # or "sampled"
    negative_samples: int = 16
    negative_seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if not self.alpha >= 0:
            raise ContractError(f"alpha must be nonnegative, got {self.alpha}")
        if self.negative_policy not in ("all_other_classes", "sampled"):
            raise ContractError(f"unknown negative_policy {self.negative_policy!r}")


@dataclass
class LossReport:
    l_ce: float
    l_pc: float
    l_total: float
    grad_embeddings: np.ndarray
    argmin_prototype_per_class: np.ndarray
    vacuous_pc: bool = False


def _check_unit(x, what):
    norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ContractError(f"{what} must be unit-norm (max deviation {np.max(np.abs(norms - 1)):.2e})")


def prototype_distance(h, class_prototypes) -> tuple[float, int]:
    """``min_k (1 - h.q_k)`` and its argmin (lowest k on ties)."""
    h = np.asarray(h, dtype=np.float64)
    Q = np.asarray(class_prototypes, dtype=np.float64)
    _check_unit(h, "embedding")
    _check_unit(Q, "prototypes")
    d = 1.0 - Q @ h
    k = int(np.argmin(d))
    return float(d[k]), k


def class_distances(h, pool) -> tuple[np.ndarray, np.ndarray]:
    """Distances to every class and the per-class argmin prototype."""
    d = 1.0 - np.einsum("ckd,d->ck", pool.prototypes, np.asarray(h, dtype=np.float64))
    k = np.argmin(d, axis=1)
    return d[np.arange(len(d)), k], k


def cross_entropy_loss(h, pool, true_class: int) -> float:
    C = pool.class_count
    if not 0 <= true_class < C:
        raise ContractError(f"class index {true_class} outside [0, {C})")
    _check_unit(h, "embedding")
    d, _ = class_distances(h, pool)
    return float(d[true_class] + logsumexp(-d))


def contrastive_loss(h, positive, negatives, tau: float) -> float:
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    h = np.asarray(h, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, h.shape[0])
    if len(negatives) == 0:
        warnings.warn("contrastive loss with an empty negative set is vacuous", VacuousLossWarning)
        return 0.0
    pos = float(h @ positive) / tau
    logits = np.concatenate([[pos], negatives @ h / tau])
    return float(logsumexp(logits) - pos)


def _negative_mask(labels, C, K, cfg: LossConfig):
    N = len(labels)
    mask = np.ones((N, C, K), dtype=bool)
    mask[np.arange(N), labels] = False
    if cfg.negative_policy == "sampled":
        rng = np.random.default_rng(cfg.negative_seed)
        sampled = np.zeros_like(mask)
        for n in range(N):
            flat = np.flatnonzero(mask[n])
            if len(flat) > cfg.negative_samples:
                flat = np.sort(rng.choice(flat, cfg.negative_samples, replace=False))
            sampled[n].flat[flat] = True
        mask = sampled
    return mask


def _stack_batch(batch):
    views = [np.asarray(b.views, dtype=np.float64) for b in batch]
    labels = np.concatenate([np.full(len(v), b.label) for v, b in zip(views, batch)])
    return np.concatenate(views), labels.astype(np.int64)


def total_loss_batch(batch, pool, cfg: LossConfig, labels=None, positives=None) -> LossReport:
    """Mean ``L_ce + alpha * L_pc`` over all views, with gradients.

    ``batch`` is an N x D array of unit embeddings with ``labels`` (length N),
    or a sequence of objects with ``views``/``label`` attributes when
    ``labels`` is None. ``positives`` optionally gives the positive prototype
    index within the true class for every view (e.g. from the transport
    assignment); by default the distance argmin is used. The gradient of the
    min over prototypes flows through the argmin branch only.
    """
    if labels is None:
        H, labels = _stack_batch(batch)
    else:
        H = np.asarray(batch, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    _check_unit(H, "embeddings")
    P = pool.prototypes
    C, K, _ = P.shape
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractError(f"labels outside [0, {C})")
    N = len(H)
    rows = np.arange(N)

    sims = np.einsum("nd,ckd->nck", H, P)
    kmin = np.argmax(sims, axis=2)  # argmin of 1 - sim, first on ties
    dmin = 1.0 - np.take_along_axis(sims, kmin[:, :, None], axis=2)[:, :, 0]

    ce = dmin[rows, labels] + logsumexp(-dmin, axis=1)
    p = softmax(-dmin, axis=1)
    p[rows, labels] -= 1.0
    chosen = P[np.arange(C)[None, :], kmin]  # N x C x D
    grad = np.einsum("nc,ncd->nd", p, chosen)

    pos_k = kmin[rows, labels] if positives is None else np.asarray(positives, dtype=np.int64)
    mask = _negative_mask(labels, C, K, cfg)
    vacuous = not mask.any()
    if vacuous:
        warnings.warn("contrastive loss with an empty negative set is vacuous", VacuousLossWarning)
        pc = np.zeros(N)
    else:
        pos_logit = sims[rows, labels, pos_k] / cfg.tau
        neg_logits = np.where(mask, sims / cfg.tau, -np.inf).reshape(N, C * K)
        logits = np.concatenate([pos_logit[:, None], neg_logits], axis=1)
        lse = logsumexp(logits, axis=1)
        pc = lse - pos_logit
        pi = np.exp(logits - lse[:, None])
        q_pos = P[labels, pos_k]
        grad_pc = pi[:, :1] * q_pos + pi[:, 1:] @ P.reshape(C * K, -1) - q_pos
        grad = grad + cfg.alpha * grad_pc / cfg.tau

    l_ce = float(np.mean(ce))
    l_pc = float(np.mean(pc))
    return LossReport(
        l_ce=l_ce,
        l_pc=l_pc,
        l_total=l_ce + cfg.alpha * l_pc,
        grad_embeddings=grad / N,
        argmin_prototype_per_class=kmin,
        vacuous_pc=vacuous,
    )


def normalize_backward(raw, grad_unit):
    """Pull a gradient w.r.t. ``u/|u|`` back to ``u``."""
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    y = raw / norm
    return (grad_unit - y * np.sum(y * grad_unit, axis=-1, keepdims=True)) / norm


class GradCheck(NamedTuple):
    max_relative_error: float
    excluded_views: tuple


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``.

    Falls back to the absolute error when both gradients are below ``floor``.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    diff = float(np.max(np.abs(analytic - numeric)))
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return diff if scale < floor else diff / scale


def grad_check(raw, labels, pool, cfg: LossConfig, step: float = 1e-5, positives=None) -> GradCheck:
    """Central differences of ``l_total`` w.r.t. raw (unnormalized) embeddings.

    Views within ``4 * step / |u|`` of an argmin tie in any class are
    excluded, since a perturbation may switch the active branch there.
    """
    if not step > 0:
        raise ContractError(f"step must be positive, got {step}")
    raw = np.asarray(raw, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    def loss(u):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", VacuousLossWarning)
            return total_loss_batch(u / np.linalg.norm(u, axis=1, keepdims=True), pool, cfg, labels, positives)

    report = loss(raw)
    analytic = normalize_backward(raw, report.grad_embeddings)

    H = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    d = np.sort(1.0 - np.einsum("nd,ckd->nck", H, pool.prototypes), axis=2)
    gaps = (d[:, :, 1] - d[:, :, 0]).min(axis=1) if pool.per_class_prototypes > 1 else np.full(len(raw), np.inf)
    excluded = tuple(int(i) for i in np.flatnonzero(gaps <= 4 * step / np.linalg.norm(raw, axis=1)))

    numeric = np.zeros_like(raw)
    for n in range(raw.shape[0]):
        if n in excluded:
            continue
        for i in range(raw.shape[1]):
            up = raw.copy()
            up[n, i] += step
            down = raw.copy()
            down[n, i] -= step
            numeric[n, i] = (loss(up).l_total - loss(down).l_total) / (2 * step)
    keep = np.setdiff1d(np.arange(len(raw)), excluded)
    return GradCheck(relative_error(analytic[keep], numeric[keep]), excluded)
