"""Training configuration and its ``key=value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ContractError, IoFailure, ParseError, UnknownKey

SOLVERS = ("sinkhorn", "apdagd")
AGGREGATIONS = ("min_distance", "mean_embedding")
POSITIVES = ("assigned", "argmin")
NEGATIVES = ("all_other_classes", "sampled")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 20
    kappa: float = 0.05
    tau: float = 0.1
    alpha: float = 0.2
    eta0: float = 0.999
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.001
    warmup_epochs: int = 5
    seed: int = 0
    solver_kind: str = "sinkhorn"
    aggregation: str = "min_distance"
    snap_final_epoch: bool = False
    embed_dim: int = 32
    hidden_dim: int = 0
    switch_step: int = -1  # -1: steps in the warm-up epochs
    renormalize: bool = True
    soft_assign: bool = False
    positive: str = "assigned"
    negative_policy: str = "all_other_classes"
    negative_samples: int = 16
    max_iters: int = 1000
    marginal_tolerance: float = 1e-6

    def __post_init__(self):
        for name in ("K", "epochs", "batch_size", "embed_dim", "max_iters", "negative_samples"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("kappa", "tau", "marginal_tolerance"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "lr0", "weight_decay", "warmup_epochs", "hidden_dim", "seed"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0 < self.eta0 < 1:
            raise ContractError(f"eta0 must lie in (0, 1), got {self.eta0}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.switch_step < -1:
            raise ContractError(f"switch_step must be >= -1, got {self.switch_step}")
        for name, allowed in (
            ("solver_kind", SOLVERS),
            ("aggregation", AGGREGATIONS),
            ("positive", POSITIVES),
            ("negative_policy", NEGATIVES),
        ):
            if getattr(self, name) not in allowed:
                raise ContractError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"invalid boolean {text!r}")


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of TrainConfig field ``key``."""
    kind = _FIELDS[key].type
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_overrides(pairs, source="<overrides>") -> dict:
    """Parse ``key=value`` strings; ``pairs`` yields ``(line_number, text)``."""
    values = {}
    for lineno, raw in pairs:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=lineno, path=source)
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise UnknownKey(key, line=lineno, path=source)
        try:
            values[key] = parse_value(key, text)
        except ValueError as e:
            raise ParseError(f"bad value for {key}: {e}", line=lineno, path=source) from None
    return values


def config_from_text(text: str, base: TrainConfig | None = None, source="<config>") -> TrainConfig:
    values = parse_overrides(enumerate(text.splitlines(), start=1), source=source)
    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except ContractError as e:
        raise ParseError(str(e), path=source) from None


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read config {path}: {e}") from e
    return config_from_text(text, source=str(path))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"
