"""Training, nearest-prototype inference, evaluation and reports."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from . import transport
from .config import TrainConfig, config_from_text, dump_config
from .criterion import LossConfig, total_loss_batch
from .data import Dataset
from .encoder import LinearEncoder, OptimizerState, encode, encode_backward, lr_at, sgd_step
from .errors import ContractError, DataError, EmptyClass, FormatMismatch, IoFailure, NonConvergence, NonFiniteLoss
from .pool import (
    EmaConfig,
    PrototypePool,
    class_mean_features,
    ema_update,
    init_prototypes,
    pool_from_buffer,
    pool_to_bytes,
    snap_to_nearest_sample,
)

log = logging.getLogger(__name__)

MODEL_MAGIC = b"PFGM1"


@dataclass
class Model:
    encoder: LinearEncoder
    pool: PrototypePool
    config: TrainConfig


@dataclass
class EpochRecord:
    epoch: int
    l_ce: float
    l_pc: float
    l_total: float
    aia: float
    aca: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} l_ce={self.l_ce:.6f} l_pc={self.l_pc:.6f} "
            f"l_total={self.l_total:.6f} aia={self.aia:.6f} aca={self.aca:.6f}"
        )


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    solver_failures: int = 0

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)


@dataclass
class EvalReport:
    aia: float
    aca: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    absent_classes: list
    view_aia: float = float("nan")
    per_view_predictions: list | None = None

    def to_dict(self) -> dict:
        return {
            "aia": self.aia,
            "aca": self.aca,
            "view_aia": None if math.isnan(self.view_aia) else self.view_aia,
            "per_class_accuracy": [None if math.isnan(a) else float(a) for a in self.per_class_accuracy],
            "confusion": self.confusion.tolist(),
            "absent_classes": list(self.absent_classes),
        }

    def table(self) -> str:
        lines = [f"{'class':>5} {'n':>6} {'correct':>8} {'acc':>8}"]
        for c, row in enumerate(self.confusion):
            acc = self.per_class_accuracy[c]
            acc_s = "   -" if math.isnan(acc) else f"{acc:8.4f}"
            lines.append(f"{c:>5} {row.sum():>6} {row[c]:>8} {acc_s:>8}")
        lines.append(f"AIA {self.aia:.4f}  ACA {self.aca:.4f}")
        if self.absent_classes:
            lines.append(f"classes absent from test split: {self.absent_classes}")
        return "\n".join(lines)


def report_from_confusion(confusion, view_aia=float("nan")) -> EvalReport:
    """AIA = trace / total; ACA = mean per-class accuracy over classes present."""
    confusion = np.asarray(confusion, dtype=np.int64)
    rows = confusion.sum(axis=1)
    diag = np.diag(confusion)
    total = int(rows.sum())
    if total == 0:
        raise ContractError("empty confusion matrix")
    present = rows > 0
    per_class = np.full(len(rows), np.nan)
    per_class[present] = diag[present] / rows[present]
    return EvalReport(
        aia=int(diag.sum()) / total,
        aca=float(np.mean(per_class[present])),
        per_class_accuracy=per_class,
        confusion=confusion,
        absent_classes=[int(c) for c in np.flatnonzero(~present)],
        view_aia=view_aia,
    )


# ---------------------------------------------------------------------------
# training


def _solver_config(cfg: TrainConfig) -> transport.SolverConfig:
    return transport.SolverConfig(
        kappa=cfg.kappa,
        max_iters=cfg.max_iters,
        marginal_tolerance=cfg.marginal_tolerance,
        solver_kind=cfg.solver_kind,
    )


def _assign(S, solver_cfg, tally: TrainLog):
    try:
        Z, _ = transport.solve(S, solver_cfg)
    except NonConvergence as e:
        # the best iterate is still a usable soft assignment
        tally.solver_failures += 1
        log.debug("transport solve did not converge: %s", e)
        Z = e.z
    return Z


def _encode_views(enc, views: np.ndarray) -> np.ndarray:
    N, V, _ = views.shape
    return encode(enc, views.reshape(N * V, -1)).reshape(N, V, -1)


def _check_trainable(train: Dataset):
    if len(train) == 0:
        raise DataError("training split is empty")
    missing = np.flatnonzero(train.class_counts() == 0)
    if len(missing):
        raise EmptyClass(int(missing[0]))


def train(train_ds: Dataset, cfg: TrainConfig, test_ds: Dataset | None = None):
    """Fit encoder and prototype pool; returns ``(Model, TrainLog)``.

    Each step encodes a minibatch, solves one transport problem per class
    present in it, EMA-updates that class's prototypes from the assigned
    means, then takes an SGD step on the prototype losses.
    """
    _check_trainable(train_ds)
    N, V, D_in = train_ds.views.shape
    C = train_ds.num_classes
    rng = np.random.default_rng(cfg.seed)
    enc = LinearEncoder.init(D_in, cfg.embed_dim, seed=cfg.seed, hidden_dim=cfg.hidden_dim)

    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    switch = warmup_steps if cfg.switch_step < 0 else cfg.switch_step

    H0 = _encode_views(enc, train_ds.views)
    pool = init_prototypes(
        [(c, H0[train_ds.labels == c].reshape(-1, cfg.embed_dim)) for c in range(C)], cfg.K, cfg.seed
    )
    ema_cfg = EmaConfig(cfg.eta0, switch, cfg.renormalize)
    solver_cfg = _solver_config(cfg)
    opt = OptimizerState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    tally = TrainLog()

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        sums = np.zeros(3)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = train_ds.views[idx].reshape(-1, D_in)
            y = np.repeat(train_ds.labels[idx], V)
            h = encode(enc, x)

            positives = np.zeros(len(h), dtype=np.int64)
            for c in np.unique(y):
                rows = np.flatnonzero(y == c)
                Z = _assign(pool.prototypes[c] @ h[rows].T, solver_cfg, tally)
                positives[rows] = np.argmax(Z, axis=0)
                means, _ = class_mean_features(h[rows], Z, soft=cfg.soft_assign)
                ema_update(pool, int(c), means, ema_cfg)

            loss_cfg = LossConfig(
                cfg.tau, cfg.alpha, cfg.negative_policy, cfg.negative_samples, negative_seed=cfg.seed * 1_000_003 + step
            )
            rep = total_loss_batch(
                h, pool, loss_cfg, labels=y, positives=positives if cfg.positive == "assigned" else None
            )
            if not np.isfinite(rep.l_total) or not np.all(np.isfinite(rep.grad_embeddings)):
                raise NonFiniteLoss(epoch, b, rep.l_total)
            sums += (rep.l_ce, rep.l_pc, rep.l_total)

            grads, _ = encode_backward(enc, x, rep.grad_embeddings)
            opt.lr = lr_at(step, total_steps, warmup_steps, cfg.lr0)
            sgd_step(enc, grads, opt)
            step += 1

        model = Model(enc, pool, cfg)
        if epoch == cfg.epochs and cfg.snap_final_epoch:
            snap_model(model, train_ds)
        aia = aca = float("nan")
        if test_ds is not None and len(test_ds):
            rep_eval = evaluate(model, test_ds)
            aia, aca = rep_eval.aia, rep_eval.aca
        mean = sums / steps_per_epoch
        record = EpochRecord(epoch, *mean, aia, aca)
        tally.records.append(record)
        log.info(record.line())

    return Model(enc, pool, cfg), tally


def snap_model(model: Model, train_ds: Dataset) -> Model:
    """Snap every prototype to its nearest training view embedding.

    Exemplar ids are ``shape_id * V + view_index``.
    """
    H = _encode_views(model.encoder, train_ds.views)
    V = train_ds.view_count
    for c in range(model.pool.class_count):
        sel = np.flatnonzero(train_ds.labels == c)
        ids = (train_ds.shape_ids[sel][:, None] * V + np.arange(V)[None, :]).reshape(-1)
        snap_to_nearest_sample(model.pool, c, H[sel].reshape(-1, H.shape[2]), ids)
    return model


# ---------------------------------------------------------------------------
# inference


def _check_views(model: Model, views):
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2 or views.shape[1] != model.encoder.input_dim:
        raise ContractError(
            f"views must be V x {model.encoder.input_dim} for this model, got {views.shape}"
        )
    return views


def predict_shape(model: Model, views, aggregation: str | None = None):
    """Nearest-prototype class of one shape.

    Returns ``(class, per_view)`` with ``per_view`` a list of
    ``(class, k, distance)`` for each view's nearest prototype.
    """
    aggregation = aggregation or model.config.aggregation
    h = encode(model.encoder, _check_views(model, views))
    P = model.pool.prototypes
    C, K, _ = P.shape
    dist = 1.0 - np.einsum("vd,ckd->vck", h, P)
    flat = dist.reshape(len(h), C * K)
    best = np.argmin(flat, axis=1)
    per_view = [(int(i // K), int(i % K), float(flat[v, i])) for v, i in enumerate(best)]
    if aggregation == "min_distance":
        cls = int(np.argmin(flat.min(axis=0)) // K)
    elif aggregation == "mean_embedding":
        m = h.mean(axis=0)
        m /= np.linalg.norm(m)
        cls = int(np.argmin(1.0 - P.reshape(C * K, -1) @ m) // K)
    else:
        raise ContractError(f"unknown aggregation {aggregation!r}")
    return cls, per_view


def evaluate(model: Model, test_ds: Dataset, aggregation: str | None = None, keep_views: bool = False) -> EvalReport:
    if len(test_ds) == 0:
        raise ContractError("test split is empty")
    C = model.pool.class_count
    if test_ds.num_classes > C:
        raise ContractError(f"dataset has {test_ds.num_classes} classes, model has {C}")
    confusion = np.zeros((C, C), dtype=np.int64)
    view_hits = view_total = 0
    per_view_all = []
    for i in range(len(test_ds)):
        cls, per_view = predict_shape(model, test_ds.views[i], aggregation)
        y = int(test_ds.labels[i])
        confusion[y, cls] += 1
        view_hits += sum(pv[0] == y for pv in per_view)
        view_total += len(per_view)
        if keep_views:
            per_view_all.append(per_view)
    report = report_from_confusion(confusion, view_aia=view_hits / view_total)
    if keep_views:
        report.per_view_predictions = per_view_all
    return report


# ---------------------------------------------------------------------------
# parametric softmax baseline


@dataclass
class _SoftmaxHead:
    weight: np.ndarray
    bias: np.ndarray

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


def baseline_train_eval(train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig):
    """Same encoder, optimizer and schedule with a linear C-way softmax head.

    Shapes are classified by the argmax of their view-averaged logits.
    Returns ``(EvalReport, TrainLog)``.
    """
    _check_trainable(train_ds)
    N, V, D_in = train_ds.views.shape
    C = train_ds.num_classes
    rng = np.random.default_rng(cfg.seed)
    enc = LinearEncoder.init(D_in, cfg.embed_dim, seed=cfg.seed, hidden_dim=cfg.hidden_dim)
    head_rng = np.random.default_rng([cfg.seed, 1])
    bound = 1.0 / math.sqrt(cfg.embed_dim)
    head = _SoftmaxHead(
        head_rng.uniform(-bound, bound, size=(C, cfg.embed_dim)), head_rng.uniform(-bound, bound, size=C)
    )
    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    opt_enc = OptimizerState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    opt_head = OptimizerState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    tally = TrainLog()

    def predict(ds):
        h = _encode_views(enc, ds.views)
        logits = h @ head.weight.T + head.bias
        return np.argmax(logits.mean(axis=1), axis=1), np.argmax(logits, axis=2)

    def score(ds):
        shape_pred, view_pred = predict(ds)
        confusion = np.zeros((C, C), dtype=np.int64)
        np.add.at(confusion, (ds.labels, shape_pred), 1)
        return report_from_confusion(confusion, view_aia=float(np.mean(view_pred == ds.labels[:, None])))

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = train_ds.views[idx].reshape(-1, D_in)
            y = np.repeat(train_ds.labels[idx], V)
            h = encode(enc, x)
            logits = h @ head.weight.T + head.bias
            n = len(y)
            loss = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(n), y]))
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            total += loss
            g = softmax(logits, axis=1)
            g[np.arange(n), y] -= 1.0
            g /= n
            head_grads = {"weight": g.T @ h, "bias": g.sum(axis=0)}
            enc_grads, _ = encode_backward(enc, x, g @ head.weight)
            lr = lr_at(step, total_steps, warmup_steps, cfg.lr0)
            opt_enc.lr = opt_head.lr = lr
            sgd_step(enc, enc_grads, opt_enc)
            sgd_step(head, head_grads, opt_head)
            step += 1
        aia = aca = float("nan")
        if test_ds is not None and len(test_ds):
            r = score(test_ds)
            aia, aca = r.aia, r.aca
        mean = total / steps_per_epoch
        tally.records.append(EpochRecord(epoch, mean, 0.0, mean, aia, aca))
    return score(test_ds), tally


# ---------------------------------------------------------------------------
# interpretability


def inspect(model: Model, ds: Dataset, m: int = 3, top_views: int = 5) -> list[dict]:
    """Per shape: top-m prototypes for the mean embedding and the views most
    similar to the predicted class's prototypes."""
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    P = model.pool.prototypes
    C, K, D = P.shape
    flatP = P.reshape(C * K, D)
    out = []
    for i in range(len(ds)):
        h = encode(model.encoder, _check_views(model, ds.views[i]))
        mean = h.mean(axis=0)
        mean /= np.linalg.norm(mean)
        sims = np.clip(flatP @ mean, -1.0, 1.0)
        order = np.argsort(-sims, kind="stable")[:m]
        cls, _ = predict_shape(model, ds.views[i])
        view_sims = np.clip(h @ P[cls].T, -1.0, 1.0)
        best_k = np.argmax(view_sims, axis=1)
        best = view_sims[np.arange(len(h)), best_k]
        vorder = np.argsort(-best, kind="stable")[:top_views]
        out.append(
            {
                "shape_id": int(ds.shape_ids[i]),
                "label": int(ds.labels[i]),
                "predicted": cls,
                "top_prototypes": [
                    {
                        "class": int(j // K),
                        "k": int(j % K),
                        "similarity": float(sims[j]),
                        "exemplar_id": int(model.pool.exemplar_ids[j // K, j % K]),
                    }
                    for j in order
                ],
                "top_views": [
                    {"view": int(v), "k": int(best_k[v]), "similarity": float(best[v])} for v in vorder
                ],
            }
        )
    return out


# ---------------------------------------------------------------------------
# model file


def model_to_bytes(model: Model) -> bytes:
    enc = model.encoder
    parts = [
        MODEL_MAGIC,
        pool_to_bytes(model.pool),
        struct.pack("<III", enc.input_dim, enc.hidden_dim, enc.output_dim),
    ]
    parts += [p.astype("<f4").tobytes() for p in enc.params().values()]
    text = dump_config(model.config).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def model_from_bytes(buf: bytes, source="<bytes>") -> Model:
    if buf[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatMismatch(f"{source}: bad model magic {buf[:5]!r}, expected {MODEL_MAGIC!r}")
    try:
        pool, off = pool_from_buffer(buf, len(MODEL_MAGIC))
    except FormatMismatch as e:
        raise FormatMismatch(f"{source}: {e}") from None
    if len(buf) < off + 12:
        raise FormatMismatch(f"{source}: truncated encoder header")
    d_in, hidden, d_out = struct.unpack_from("<III", buf, off)
    off += 12
    shapes = {}
    if hidden:
        shapes["hidden_weight"] = (hidden, d_in)
        shapes["hidden_bias"] = (hidden,)
    shapes["weight"] = (d_out, hidden or d_in)
    shapes["bias"] = (d_out,)
    params = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        if len(buf) < off + 4 * n:
            raise FormatMismatch(f"{source}: truncated encoder parameters")
        params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
    if len(buf) < off + 4:
        raise FormatMismatch(f"{source}: missing config block")
    (length,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) != off + length:
        raise FormatMismatch(f"{source}: config block length {length} does not match file size")
    text = buf[off : off + length].decode("utf-8")
    cfg = config_from_text(text, source=f"{source}[config]")
    if d_out != pool.dim:
        raise FormatMismatch(f"{source}: encoder output dim {d_out} != pool dim {pool.dim}")
    return Model(LinearEncoder(**params), pool, cfg)


def save_model(model: Model, path) -> None:
    try:
        Path(path).write_bytes(model_to_bytes(model))
    except OSError as e:
        raise IoFailure(f"cannot write model {path}: {e}") from e


def load_model(path) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read model {path}: {e}") from e
    return model_from_bytes(buf, source=str(path))
