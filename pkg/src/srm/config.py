"""Configuration dataclasses for SRM models and training runs."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration values.

    The message always starts with the offending field name.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class HeadMode(str, enum.Enum):
    MIXED = "mixed"
    COMBINED = "combined"
    ROW_ONLY = "row_only"
    COLUMN_ONLY = "column_only"


# byte-level tokenizer: 256 byte ids, then begin-of-sequence and pad
BOS_ID = 256
PAD_ID = 257
BYTE_VOCAB = 258


@dataclass(frozen=True)
class SrmConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_ctx: int = 64
    vocab_size: int = BYTE_VOCAB
    head_mode: HeadMode = HeadMode.MIXED
    head_parallel: bool = False
    use_projections: bool = True
    decay_enabled: bool = True
    diag_const_enabled: bool = False
    kernel_size: int = 1
    ff_expansion: int = 4

    def __post_init__(self):
        if not isinstance(self.head_mode, HeadMode):
            try:
                object.__setattr__(self, "head_mode", HeadMode(self.head_mode))
            except ValueError:
                raise ConfigError("head_mode", f"unknown head mode {self.head_mode!r}") from None
        for name in ("d_model", "n_layers", "n_ctx", "vocab_size", "kernel_size", "ff_expansion"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if not isinstance(self.n_heads, int) or self.n_heads < 0:
            raise ConfigError("n_heads", f"must be a non-negative integer, got {self.n_heads!r}")
        if self.n_heads > 0 and self.d_model % self.n_heads:
            raise ConfigError("n_heads", f"d_model={self.d_model} is not divisible by {self.n_heads}")
        if self.head_mode is HeadMode.MIXED and (self.n_heads < 2 or self.n_heads % 2):
            raise ConfigError("n_heads", "mixed heads need an even head count >= 2")
        if self.kernel_size > 1 and self.head_mode is not HeadMode.COLUMN_ONLY:
            raise ConfigError("kernel_size", "kernelized mixing uses column-repeat filters; set head_mode=column_only")
        if self.kernel_size > self.head_dim:
            raise ConfigError("kernel_size", f"cannot exceed head_dim={self.head_dim}")

    @property
    def effective_heads(self) -> int:
        return max(self.n_heads, 1)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.effective_heads

    @property
    def cache_scalars_per_layer(self) -> int:
        """Recurrent state scalars held per sample by one mixing layer."""
        if self.head_mode is HeadMode.COMBINED:
            return 2 * self.d_model
        return self.kernel_size * self.d_model

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["head_mode"] = self.head_mode.value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SrmConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = None
    seed: int = 0
    copy_len: int = 8
    payload_ids: tuple[int, ...] = tuple(range(ord("a"), ord("a") + 16))
    delimiter_id: int = ord("|")
    eval_every: int = 100
    eval_batches: int = 4
    checkpoint_every: int = 0
    record_wall_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "payload_ids", tuple(int(i) for i in self.payload_ids))
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps", "must be >= 0")
        if self.copy_len < 1:
            raise ConfigError("copy_len", "must be >= 1")
        if not self.payload_ids:
            raise ConfigError("payload_ids", "must be non-empty")
        if self.delimiter_id in self.payload_ids:
            raise ConfigError("delimiter_id", "must not be a payload id")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["payload_ids"] = list(self.payload_ids)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class RunConfig:
    """What a config file holds: the model plus optional training fields."""

    model: SrmConfig = field(default_factory=SrmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}


def _from_dict(cls, data: dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigError(cls.__name__, "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(key, f"unknown field for {cls.__name__}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key) if key != "head_mode" else None
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(key, f"expected an integer, got {value!r}")
        if isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON config file with optional ``model`` and ``train`` sections."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be an object")
    for key in data:
        if key not in ("model", "train"):
            raise ConfigError(key, "unknown section (expected 'model' or 'train')")
    return RunConfig(
        model=SrmConfig.from_dict(data.get("model", {})),
        train=TrainConfig.from_dict(data.get("train", {})),
    )


def save_config(run: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
