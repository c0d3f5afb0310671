"""Multi-view datasets: synthetic generation and file formats.

Binary layout ("PFGE" v1, little-endian)::

    magic  b"PFGE"
    u16    version (1)
    u8     payload kind (0 raw, 1 embedded)
    u32    shape_count, V, D, C
    then per shape: u32 shape_id, u32 label, V*D f32 (view-major)
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    CountMismatch,
    FormatMismatch,
    InfeasibleSeparation,
    IoFailure,
    ParseError,
    RaggedViews,
)

MAGIC = b"PFGE"
VERSION = 1
KINDS = {"raw": 0, "embedded": 1}
_HEADER = struct.Struct("<4sHBIIII")
TEST_EVERY = 5  # every 5th shape of a class (in subcluster order) is held out


@dataclass
class ViewBatch:
    shape_id: int
    label: int
    views: np.ndarray

    @property
    def view_count(self) -> int:
        return len(self.views)


@dataclass
class Dataset:
    shape_ids: np.ndarray
    labels: np.ndarray
    views: np.ndarray  # N x V x D
    num_classes: int
    payload_kind: str = "raw"

    def __post_init__(self):
        self.shape_ids = np.asarray(self.shape_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 3:
            raise ContractError(f"views must be N x V x D, got {self.views.shape}")
        if not (len(self.shape_ids) == len(self.labels) == len(self.views)):
            raise ContractError("shape_ids, labels and views disagree in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        if self.payload_kind not in KINDS:
            raise ContractError(f"unknown payload kind {self.payload_kind!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> ViewBatch:
        return ViewBatch(int(self.shape_ids[i]), int(self.labels[i]), self.views[i])

    @property
    def view_count(self) -> int:
        return self.views.shape[1]

    @property
    def dim(self) -> int:
        return self.views.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.shape_ids[idx], self.labels[idx], self.views[idx], self.num_classes, self.payload_kind)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def stratified_split(ds: Dataset) -> tuple[Dataset, Dataset]:
    """80/20 split: within each class, every fifth shape (in file order) is test."""
    test = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        test[idx[TEST_EVERY - 1 :: TEST_EVERY]] = True
    return ds.subset(np.flatnonzero(~test)), ds.subset(np.flatnonzero(test))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 4
    views_per_shape: int = 12
    dim: int = 32
    subclusters_per_class: int = 3
    per_class_shape_counts: tuple = (200, 200, 200, 200)
    intra_cluster_noise: float = 0.02
    seed: int = 0
    min_separation: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "per_class_shape_counts", tuple(int(n) for n in self.per_class_shape_counts))
        if len(self.per_class_shape_counts) != self.class_count:
            raise ContractError(
                f"{len(self.per_class_shape_counts)} shape counts given for {self.class_count} classes"
            )
        if min(self.class_count, self.views_per_shape, self.dim, self.subclusters_per_class) < 1:
            raise ContractError("class, view, dim and subcluster counts must be >= 1")
        if min(self.per_class_shape_counts) < 1:
            raise ContractError("every class needs at least one shape")
        if self.intra_cluster_noise < 0:
            raise ContractError("intra_cluster_noise must be >= 0")


@dataclass
class SyntheticData:
    full: Dataset
    train: Dataset
    test: Dataset
    anchors: np.ndarray  # C x S x D
    subclusters: np.ndarray = field(default=None)  # per shape of ``full``


def _draw_anchors(spec: SynthSpec, rng, max_tries: int = 10_000) -> np.ndarray:
    need = spec.class_count * spec.subclusters_per_class
    max_cos = 1.0 - spec.min_separation
    accepted = []
    tries = 0
    while len(accepted) < need:
        tries += 1
        if tries > max_tries:
            raise InfeasibleSeparation(
                f"could not place {need} anchors with cosine separation >= {spec.min_separation} "
                f"in dimension {spec.dim} after {max_tries} tries"
            )
        a = rng.normal(size=spec.dim)
        a /= np.linalg.norm(a)
        if all(a @ b <= max_cos for b in accepted):
            accepted.append(a)
    return np.array(accepted).reshape(spec.class_count, spec.subclusters_per_class, spec.dim)


def generate_synthetic(spec: SynthSpec, anchors=None) -> SyntheticData:
    """Views are ``anchor + N(0, sigma^2)`` per coordinate, stored at f32 precision.

    Shapes are laid out class-major and sorted by subcluster inside each class,
    so ``stratified_split`` stratifies by subcluster as well.
    """
    rng = np.random.default_rng(spec.seed)
    if anchors is None:
        anchors = _draw_anchors(spec, rng)
    anchors = np.asarray(anchors, dtype=np.float64)
    expected = (spec.class_count, spec.subclusters_per_class, spec.dim)
    if anchors.shape != expected:
        raise ContractError(f"anchors must have shape {expected}, got {anchors.shape}")
    anchors = anchors.astype(np.float32).astype(np.float64)

    views, labels, subs = [], [], []
    for c, n in enumerate(spec.per_class_shape_counts):
        sub = np.sort(rng.integers(spec.subclusters_per_class, size=n), kind="stable")
        noise = rng.normal(scale=spec.intra_cluster_noise, size=(n, spec.views_per_shape, spec.dim))
        views.append(anchors[c, sub][:, None, :] + noise)
        labels.append(np.full(n, c))
        subs.append(sub)
    views = np.concatenate(views).astype(np.float32).astype(np.float64)
    labels = np.concatenate(labels)
    full = Dataset(np.arange(len(labels)), labels, views, spec.class_count, "raw")
    train, test = stratified_split(full)
    return SyntheticData(full, train, test, anchors, np.concatenate(subs))


# ---------------------------------------------------------------------------
# binary format


def dataset_to_bytes(ds: Dataset) -> bytes:
    N, V, D = ds.views.shape
    parts = [_HEADER.pack(MAGIC, VERSION, KINDS[ds.payload_kind], N, V, D, ds.num_classes)]
    rec = struct.Struct("<II")
    payload = ds.views.astype("<f4")
    for i in range(N):
        parts.append(rec.pack(int(ds.shape_ids[i]), int(ds.labels[i])))
        parts.append(payload[i].tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes, source="<bytes>") -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatMismatch(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, kind, N, V, D, C = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatMismatch(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatMismatch(f"{source}: unsupported version: expected {VERSION}, found {version}")
    kinds = {v: k for k, v in KINDS.items()}
    if kind not in kinds:
        raise FormatMismatch(f"{source}: unknown payload kind {kind}")
    record = 8 + 4 * V * D
    body = len(buf) - _HEADER.size
    if record == 0 or body != N * record:
        found = body / record if record else float("nan")
        raise CountMismatch(
            f"{source}: header claims {N} shapes of {record} bytes, payload holds {found:g}"
        )
    dt = np.dtype([("id", "<u4"), ("label", "<u4"), ("x", "<f4", (V, D))])
    arr = np.frombuffer(buf, dtype=dt, count=N, offset=_HEADER.size)
    labels = arr["label"].astype(np.int64)
    if N and labels.max() >= C:
        raise FormatMismatch(f"{source}: label {labels.max()} outside declared class count {C}")
    return Dataset(arr["id"].astype(np.int64), labels, arr["x"].astype(np.float64), C, kinds[kind])


def write_dataset(ds: Dataset, path) -> None:
    try:
        Path(path).write_bytes(dataset_to_bytes(ds))
    except OSError as e:
        raise IoFailure(f"cannot write dataset {path}: {e}") from e


def read_dataset(path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read dataset {path}: {e}") from e
    return dataset_from_bytes(buf, source=str(path))


# ---------------------------------------------------------------------------
# CSV


def write_csv(ds: Dataset, path) -> None:
    D = ds.dim
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(["shape_id", "view_id", "label"] + [f"f{j}" for j in range(D)]) + "\n")
            vals = ds.views.astype(np.float32)
            for i in range(len(ds)):
                for v in range(ds.view_count):
                    row = [str(int(ds.shape_ids[i])), str(v), str(int(ds.labels[i]))]
                    row += [f"{x:.9g}" for x in vals[i, v]]
                    fh.write(",".join(row) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def import_csv(path) -> Dataset:
    """Read ``shape_id,view_id,label,f0..f{D-1}`` rows into an embedded dataset.

    The class count is ``max(label) + 1``; classes with no shapes trigger a
    warning.
    """
    shapes: dict[int, dict] = {}
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1, path=path)
        header = [h.strip() for h in header]
        D = len(header) - 3
        if header[:3] != ["shape_id", "view_id", "label"] or D < 1 or header[3:] != [f"f{j}" for j in range(D)]:
            raise ParseError("header must be shape_id,view_id,label,f0..f{D-1}", line=1, path=path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != D + 3:
                raise ParseError(f"expected {D + 3} fields, found {len(row)}", line=lineno, path=path)
            try:
                sid, vid, label = int(row[0]), int(row[1]), int(row[2])
                feats = np.array([float(x) for x in row[3:]])
            except ValueError as e:
                raise ParseError(str(e), line=lineno, path=path) from None
            if label < 0:
                raise ParseError(f"negative label {label}", line=lineno, path=path)
            entry = shapes.setdefault(sid, {"label": label, "views": {}})
            if entry["label"] != label:
                raise ParseError(f"shape {sid} has conflicting labels", line=lineno, path=path)
            if vid in entry["views"]:
                raise ParseError(f"duplicate view {vid} for shape {sid}", line=lineno, path=path)
            entry["views"][vid] = feats
    if not shapes:
        raise ParseError("no data rows", line=2, path=path)
    V = max(len(entry["views"]) for entry in shapes.values())
    for sid, entry in shapes.items():
        if len(entry["views"]) != V:
            raise RaggedViews(sid, V, len(entry["views"]))
    ids = np.array(list(shapes))
    labels = np.array([shapes[s]["label"] for s in ids])
    views = np.array([[shapes[s]["views"][v] for v in sorted(shapes[s]["views"])] for s in ids])
    C = int(labels.max()) + 1
    empty = sorted(set(range(C)) - set(labels.tolist()))
    if empty:
        warnings.warn(f"{path}: classes {empty} have no shapes", UserWarning)
    return Dataset(ids, labels, views, C, "embedded")
