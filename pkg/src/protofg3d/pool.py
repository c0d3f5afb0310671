"""Shared prototype pool: initialization, online EMA updates, persistence."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, EmptyClass, FormatMismatch, IoFailure

POOL_MAGIC = b"PPOOL"
POOL_VERSION = 1
MIN_MASS = 1e-8


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X / np.linalg.norm(X, axis=-1, keepdims=True)


@dataclass
class PrototypePool:
    """C x K x D unit-norm prototypes plus per-class update counters.

    ``exemplar_ids[c, k]`` is the identifier of the training sample a
    prototype was snapped to, or -1.
    """

    prototypes: np.ndarray
    exemplar_ids: np.ndarray = None
    steps: np.ndarray = None

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 3:
            raise ContractError(f"prototypes must be C x K x D, got {self.prototypes.shape}")
        C, K, _ = self.prototypes.shape
        if self.exemplar_ids is None:
            self.exemplar_ids = np.full((C, K), -1, dtype=np.int64)
        if self.steps is None:
            self.steps = np.zeros(C, dtype=np.int64)

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def per_class_prototypes(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]

    def copy(self) -> "PrototypePool":
        return PrototypePool(
            self.prototypes.copy(), self.exemplar_ids.copy(), self.steps.copy()
        )

    def max_norm_error(self) -> float:
        return float(np.max(np.abs(np.linalg.norm(self.prototypes, axis=-1) - 1.0)))


@dataclass(frozen=True)
class EmaConfig:
    eta0: float = 0.999
    switch_step: int = 0
    renormalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.eta0 < 1.0:
            raise ContractError(f"eta0 must lie in (0, 1), got {self.eta0}")
        if self.switch_step < 0:
            raise ContractError(f"switch_step must be >= 0, got {self.switch_step}")


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # hardened prototype index per view
    masses: np.ndarray  # total soft mass per prototype
    sets: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# spherical k-means


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    best_sim = X @ X[centers[0]]
    for _ in range(1, K):
        dist = np.clip(1.0 - best_sim, 0.0, None)
        weights = dist**2
        total = weights.sum()
        if total <= 0:
            # every point coincides with a chosen center
            remaining = [i for i in range(n) if i not in centers]
            idx = remaining[0] if remaining else centers[-1]
        else:
            idx = int(rng.choice(n, p=weights / total))
        centers.append(idx)
        best_sim = np.maximum(best_sim, X @ X[idx])
    return X[centers].copy()


def spherical_kmeans(X, K: int, rng: np.random.Generator, max_iter: int = 100):
    """Cosine k-means on unit rows of ``X``.

    Returns ``(centroids, labels, objective_history)`` where the objective is
    the sum of cosine distances to the assigned centroid, recorded after each
    assignment step. Empty clusters keep their previous centroid.
    """
    X = normalize_rows(X)
    centroids = _kmeanspp(X, K, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        sims = X @ centroids.T
        new_labels = np.argmax(sims, axis=1)
        history.append(float(np.sum(1.0 - sims[np.arange(len(X)), new_labels])))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(K):
            members = X[labels == k]
            if len(members):
                s = members.sum(axis=0)
                norm = np.linalg.norm(s)
                if norm > 0:
                    centroids[k] = s / norm
    return centroids, labels, history


def init_prototypes(per_class_embeddings, K: int, seed: int, jitter: float = 1e-3) -> PrototypePool:
    """Per-class spherical k-means with k-means++ seeding.

    ``per_class_embeddings`` is a sequence of ``(class, matrix)`` pairs
    covering classes ``0..C-1``. A class with fewer than K embeddings is
    cyclically replicated to K rows and jittered before clustering.
    """
    items = sorted(per_class_embeddings, key=lambda item: item[0])
    C = len(items)
    if [c for c, _ in items] != list(range(C)):
        raise ContractError("per_class_embeddings must cover classes 0..C-1 exactly once")
    D = None
    protos = []
    for c, emb in items:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or len(emb) == 0:
            raise EmptyClass(c)
        D = emb.shape[1]
        rng = np.random.default_rng([seed, c])
        X = normalize_rows(emb)
        if len(X) < K:
            X = X[np.arange(K) % len(X)]
            X = normalize_rows(X + rng.uniform(-jitter, jitter, size=X.shape))
        centroids, _, _ = spherical_kmeans(X, K, rng)
        protos.append(normalize_rows(centroids))
    return PrototypePool(np.stack(protos).reshape(C, K, D))


# ---------------------------------------------------------------------------
# online updates


def assign_clusters(Z, soft: bool = False) -> ClusterAssignment:
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.argmax(Z, axis=0)
    K = Z.shape[0]
    if soft:
        masses = Z.sum(axis=1)
    else:
        masses = np.bincount(labels, minlength=K).astype(np.float64)
    sets = [np.flatnonzero(labels == k) for k in range(K)]
    return ClusterAssignment(labels, masses, sets)


def class_mean_features(batch_embeddings, assignment, soft: bool = False):
    """Per-prototype mean of the view embeddings assigned to it.

    ``assignment`` is the K x V transport matrix. Hard mode averages the
    views whose argmax prototype is k; soft mode uses the column masses as
    weights. Returns ``(means, present)``; rows of absent prototypes are NaN.
    """
    H = np.asarray(batch_embeddings, dtype=np.float64)
    Z = np.asarray(assignment, dtype=np.float64)
    if Z.shape[1] != H.shape[0]:
        raise ContractError(f"assignment has {Z.shape[1]} views, batch has {H.shape[0]}")
    K = Z.shape[0]
    if soft:
        weights = Z
    else:
        weights = np.zeros_like(Z)
        weights[np.argmax(Z, axis=0), np.arange(Z.shape[1])] = 1.0
    mass = weights.sum(axis=1)
    present = mass > MIN_MASS
    means = np.full((K, H.shape[1]), np.nan)
    means[present] = (weights[present] @ H) / mass[present, None]
    return means, present


def momentum_at(t: int, cfg: EmaConfig) -> float:
    """Momentum for the t-th update (1-based) of a class."""
    if t <= cfg.switch_step:
        return cfg.eta0
    return min(0.999, 1.0 - 1.0 / (t + 1))


def ema_update(pool: PrototypePool, cls: int, means, cfg: EmaConfig, eta: float | None = None) -> PrototypePool:
    """``q <- eta_t q + (1 - eta_t) mean`` for every present row of class ``cls``.

    Rows of ``means`` that are NaN (no assigned mass) are left untouched.
    ``eta`` overrides the schedule. Mutates and returns ``pool``.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.shape != pool.prototypes.shape[1:]:
        raise ContractError(f"means shape {means.shape} != {pool.prototypes.shape[1:]}")
    t = int(pool.steps[cls]) + 1
    eta_t = momentum_at(t, cfg) if eta is None else float(eta)
    present = np.all(np.isfinite(means), axis=1)
    q = pool.prototypes[cls]
    q[present] = eta_t * q[present] + (1.0 - eta_t) * means[present]
    if cfg.renormalize:
        q[present] = normalize_rows(q[present])
    pool.steps[cls] = t
    return pool


def snap_to_nearest_sample(pool: PrototypePool, cls: int, class_embeddings, sample_ids=None) -> PrototypePool:
    """Replace each prototype of ``cls`` by its most similar class embedding.

    Ties go to the lowest sample index. ``sample_ids`` (default: row index)
    are recorded in ``pool.exemplar_ids``. Mutates and returns ``pool``.
    """
    E = np.asarray(class_embeddings, dtype=np.float64)
    if E.ndim != 2 or len(E) == 0:
        raise EmptyClass(cls)
    if sample_ids is None:
        sample_ids = np.arange(len(E))
    sims = pool.prototypes[cls] @ E.T
    nearest = np.argmax(sims, axis=1)
    pool.prototypes[cls] = E[nearest]
    pool.exemplar_ids[cls] = np.asarray(sample_ids, dtype=np.int64)[nearest]
    return pool


# ---------------------------------------------------------------------------
# persistence


def pool_to_bytes(pool: PrototypePool) -> bytes:
    C, K, D = pool.prototypes.shape
    return b"".join(
        [
            POOL_MAGIC + str(POOL_VERSION).encode("ascii"),
            struct.pack("<III", C, K, D),
            pool.prototypes.astype("<f4").tobytes(),
            pool.exemplar_ids.astype("<i8").tobytes(),
        ]
    )


def pool_from_buffer(buf: bytes, offset: int = 0):
    """Parse a pool block; returns ``(pool, next_offset)``."""
    head = buf[offset : offset + 6]
    if len(head) < 6 or head[:5] != POOL_MAGIC:
        raise FormatMismatch(f"bad pool magic {head!r}, expected {POOL_MAGIC + b'1'!r}")
    found = head[5:6].decode("ascii", errors="replace")
    if found != str(POOL_VERSION):
        raise FormatMismatch(f"unsupported pool version: expected {POOL_VERSION}, found {found}")
    offset += 6
    if len(buf) < offset + 12:
        raise FormatMismatch("truncated pool header")
    C, K, D = struct.unpack_from("<III", buf, offset)
    offset += 12
    n = C * K * D
    need = 4 * n + 8 * C * K
    if len(buf) < offset + need:
        raise FormatMismatch(
            f"truncated pool payload: need {need} bytes for C={C} K={K} D={D}, "
            f"have {len(buf) - offset}"
        )
    protos = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float64)
    offset += 4 * n
    ids = np.frombuffer(buf, dtype="<i8", count=C * K, offset=offset).astype(np.int64)
    offset += 8 * C * K
    return PrototypePool(protos.reshape(C, K, D), ids.reshape(C, K)), offset


def save_pool(pool: PrototypePool, path) -> None:
    try:
        Path(path).write_bytes(pool_to_bytes(pool))
    except OSError as e:
        raise IoFailure(f"cannot write pool file {path}: {e}") from e


def load_pool(path) -> PrototypePool:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read pool file {path}: {e}") from e
    try:
        pool, end = pool_from_buffer(buf)
    except FormatMismatch as e:
        raise FormatMismatch(f"{path}: {e}") from None
    if end != len(buf):
        raise FormatMismatch(f"{path}: {len(buf) - end} trailing bytes after pool payload")
    return pool
