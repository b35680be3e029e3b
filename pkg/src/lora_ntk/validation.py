"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import os

import numpy as np

from .model import LinearizedDataset, LoraFactors, LossKind

__all__ = ["check_dataset", "check_update", "check_factors", "check_positive", "check_probability"]


def check_dataset(data, loss=None) -> LinearizedDataset:
    """Return a :class:`LinearizedDataset` from a dataset or an LNTK1 file path."""
    if isinstance(data, (str, os.PathLike)):
        from .io import read_dataset

        data = read_dataset(data)
    if not isinstance(data, LinearizedDataset):
        raise TypeError(f"expected a LinearizedDataset or a path, got {type(data).__name__}")
    if loss is not None and data.loss is not LossKind(loss):
        raise ValueError(f"dataset loss is {data.loss.value}, expected {LossKind(loss).value}")
    return data


def check_update(delta, data: LinearizedDataset) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (data.shape.m, data.shape.n):
        raise ValueError(f"update has shape {delta.shape}, expected {(data.shape.m, data.shape.n)}")
    if not np.all(np.isfinite(delta)):
        raise ValueError("update has non-finite entries")
    return delta


def check_factors(f: LoraFactors, data: LinearizedDataset) -> LoraFactors:
    if f.u.shape[0] != data.shape.m or f.v.shape[0] != data.shape.n:
        raise ValueError(f"factors {f.u.shape}, {f.v.shape} do not match m={data.shape.m}, n={data.shape.n}")
    return f


def check_positive(name: str, value, strict: bool = True) -> float:
    value = float(value)
    ok = value > 0 if strict else value >= 0
    if not (ok and np.isfinite(value)):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value}")
    return value


def check_probability(name: str, value) -> float:
    value = float(value)
    if not 0 < value < 1:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value
