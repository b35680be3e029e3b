"""LNTK1 dataset files and key=value experiment configs.

LNTK1 layout (all integers u64 little-endian, all reals f64 little-endian)::

    b"LNTK1\\n"                       6 bytes
    flags                             1 byte, bit 0: 0 squared error, 1 cross-entropy
    N, K, T                           24 bytes
    (m_i, n_i) for i = 1..T           16 T bytes
    per sample:
        f0                            K reals
        label                         one u64 class index (0-based) or K reals
        features                      K * sum(m_i n_i) reals in (j, block, row) order
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import BlockShape, LinearizedDataset, LossKind
from .optim import InitScheme, TrainConfig

__all__ = [
    "MAGIC",
    "FormatErrorCode",
    "DatasetFormatError",
    "dataset_nbytes",
    "encode_dataset",
    "decode_dataset",
    "write_dataset",
    "read_dataset",
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "dump_config",
]

MAGIC = b"LNTK1\n"
_FLAG_CE = 0x01
_HEAD = struct.Struct("<B3Q")
_F64 = np.dtype("<f8")
_U64 = np.dtype("<u8")


class FormatErrorCode(str, enum.Enum):
    BAD_MAGIC = "bad_magic"
    BAD_FLAGS = "bad_flags"
    BAD_HEADER = "bad_header"
    TRUNCATED = "truncated"
    TRAILING_BYTES = "trailing_bytes"
    NON_FINITE = "non_finite"
    BAD_LABEL = "bad_label"


class DatasetFormatError(ValueError):
    def __init__(self, code: FormatErrorCode, message: str):
        super().__init__(f"[{code.value}] {message}")
        self.code = code


def _sample_width(shape: BlockShape, K: int, ce: bool) -> int:
    """Bytes per sample record."""
    label = 8 if ce else 8 * K
    return 8 * K + label + 8 * K * sum(a * b for a, b in shape.blocks)


def dataset_nbytes(shape: BlockShape, N: int, K: int, loss) -> int:
    ce = LossKind(loss) is LossKind.CROSS_ENTROPY
    return len(MAGIC) + _HEAD.size + 16 * shape.n_blocks + N * _sample_width(shape, K, ce)


def encode_dataset(data: LinearizedDataset) -> bytes:
    ce = data.loss is LossKind.CROSS_ENTROPY
    N, K = data.n_samples, data.output_dim
    head = MAGIC + _HEAD.pack(_FLAG_CE if ce else 0, N, K, data.shape.n_blocks)
    head += np.asarray(data.shape.blocks, dtype=_U64).tobytes()
    cols = [data.base_output.astype(_F64).view(np.uint8).reshape(N, -1)]
    if ce:
        cols.append(data.labels.astype(_U64).reshape(N, 1).view(np.uint8))
    else:
        cols.append(data.labels.astype(_F64).view(np.uint8).reshape(N, -1))
    # (j, block, row-major) order within each sample
    feats = np.concatenate([f.reshape(N, K, -1) for f in data.features], axis=2).astype(_F64)
    cols.append(np.ascontiguousarray(feats).view(np.uint8).reshape(N, -1))
    return head + np.concatenate(cols, axis=1).tobytes()


def decode_dataset(buf: bytes) -> LinearizedDataset:
    buf = bytes(buf)
    if buf[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError(FormatErrorCode.BAD_MAGIC, f"expected magic {MAGIC!r}, got {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(buf) < pos + _HEAD.size:
        raise DatasetFormatError(FormatErrorCode.TRUNCATED, "file ends inside the header")
    flags, N, K, T = _HEAD.unpack_from(buf, pos)
    pos += _HEAD.size
    if flags & ~_FLAG_CE:
        raise DatasetFormatError(FormatErrorCode.BAD_FLAGS, f"unknown flag bits {flags:#04x}")
    if N < 1 or K < 1 or T < 1:
        raise DatasetFormatError(FormatErrorCode.BAD_HEADER, f"N, K, T must be >= 1, got {N}, {K}, {T}")
    if len(buf) < pos + 16 * T:
        raise DatasetFormatError(FormatErrorCode.TRUNCATED, "file ends inside the block table")
    blocks = np.frombuffer(buf, dtype=_U64, count=2 * T, offset=pos).reshape(T, 2)
    pos += 16 * T
    if np.any(blocks < 1):
        raise DatasetFormatError(FormatErrorCode.BAD_HEADER, "block sizes must be >= 1")
    shape = BlockShape(tuple((int(a), int(b)) for a, b in blocks))
    ce = bool(flags & _FLAG_CE)
    if ce and K < 2:
        raise DatasetFormatError(FormatErrorCode.BAD_HEADER, "cross-entropy needs K >= 2")
    width = _sample_width(shape, K, ce)
    expected = pos + N * width
    if len(buf) < expected:
        raise DatasetFormatError(FormatErrorCode.TRUNCATED, f"payload has {len(buf) - pos} bytes, expected {N * width}")
    if len(buf) > expected:
        raise DatasetFormatError(FormatErrorCode.TRAILING_BYTES, f"{len(buf) - expected} bytes after the payload")
    rec = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(N, width)
    f0 = rec[:, : 8 * K].copy().view(_F64).astype(float)
    at = 8 * K
    if ce:
        labels = rec[:, at : at + 8].copy().view(_U64).ravel()
        at += 8
        if np.any(labels >= K):
            raise DatasetFormatError(FormatErrorCode.BAD_LABEL, f"class index outside [0, {K})")
        labels = labels.astype(np.int64)
    else:
        labels = rec[:, at : at + 8 * K].copy().view(_F64).astype(float)
        at += 8 * K
    flat = rec[:, at:].copy().view(_F64).astype(float).reshape(N, K, -1)
    reals = [f0, flat] if ce else [f0, labels, flat]
    if not all(np.all(np.isfinite(a)) for a in reals):
        raise DatasetFormatError(FormatErrorCode.NON_FINITE, "non-finite value in payload")
    feats, start = [], 0
    for a, b in shape.blocks:
        feats.append(flat[:, :, start : start + a * b].reshape(N, K, a, b))
        start += a * b
    return LinearizedDataset(shape, tuple(feats), f0, labels, LossKind.CROSS_ENTROPY if ce else LossKind.SQUARED_ERROR)


def write_dataset(path, data: LinearizedDataset) -> None:
    """Write atomically: the bytes go to a temporary sibling that is then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_dataset(data))
    os.replace(tmp, path)


def read_dataset(path) -> LinearizedDataset:
    return decode_dataset(Path(path).read_bytes())


# --------------------------------------------------------------------------
# key=value experiment configs


class ConfigError(ValueError):
    pass


def _opt_int(s: str):
    return None if s.lower() in ("", "none", "full") else int(s)


@dataclass
class ExperimentConfig:
    """Experiment settings.  Training defaults follow the usual LoRA fine-tuning
    setup: batch 32, weight decay 0.01, learning rate 1e-3."""

    task: str = "synthetic"
    seed: int = 0
    rank: int = 2
    lam: float = 0.01
    step_size: float = 1e-3
    epochs: int = 1000
    batch_size: int | None = 32
    init: str = "lora"
    sigma_init: float = 1e-2
    noise_std: float = 0.0
    perturb_eps: float = 0.0
    tol_grad: float = 1e-6
    tol_hess: float = 1e-6
    rank_tol: float = 1e-6
    runs: int = 20
    eta: float = 0.1
    slack_eps: float = 0.1
    n_pop: int = 10_000
    out_dir: str = "out"

    def __post_init__(self):
        if self.init not in {s.value for s in InitScheme}:
            raise ConfigError(f"init must be one of {[s.value for s in InitScheme]}, got {self.init!r}")
        if self.rank < 1 or self.epochs < 0 or self.runs < 1 or self.n_pop < 1:
            raise ConfigError("rank, runs and n_pop must be >= 1 and epochs >= 0")
        if self.lam < 0 or self.step_size <= 0:
            raise ConfigError("lambda must be >= 0 and step_size > 0")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(
            rank=self.rank,
            lam=self.lam,
            step_size=self.step_size,
            epochs=self.epochs,
            batch_size=self.batch_size,
            init=self.init,
            sigma_init=self.sigma_init,
            noise_std=self.noise_std,
            seed=self.seed,
            perturb_eps=self.perturb_eps,
            tol_grad=self.tol_grad,
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def to_dict(self) -> dict:
        return {_FILE_KEY.get(f.name, f.name): getattr(self, f.name) for f in fields(self)}


# file key -> attribute name; "lambda" is a Python keyword
_ATTR = {"lambda": "lam"}
_FILE_KEY = {v: k for k, v in _ATTR.items()}
_PARSERS = {
    "task": str,
    "seed": int,
    "rank": int,
    "lam": float,
    "step_size": float,
    "epochs": int,
    "batch_size": _opt_int,
    "init": str,
    "sigma_init": float,
    "noise_std": float,
    "perturb_eps": float,
    "tol_grad": float,
    "tol_hess": float,
    "rank_tol": float,
    "runs": int,
    "eta": float,
    "slack_eps": float,
    "n_pop": int,
    "out_dir": str,
}
CONFIG_KEYS = tuple(_FILE_KEY.get(k, k) for k in _PARSERS)


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  ``overrides`` win over the text."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = str(val)
    kw = {}
    for key, val in values.items():
        attr = _ATTR.get(key, key)
        if attr not in _PARSERS or key in _FILE_KEY:
            raise ConfigError(f"unknown config key {key!r}; allowed: {', '.join(CONFIG_KEYS)}")
        try:
            kw[attr] = _PARSERS[attr](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r} ({exc})") from None
    return ExperimentConfig(**kw)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, val in cfg.to_dict().items():
        lines.append(f"{key} = {'none' if val is None else val}")
    return "\n".join(lines) + "\n"
