"""Dense-tensor numerics shared by scoring and the toy forward pass.

Tensors are plain ``numpy`` arrays. Weights are stored as float32; every
reduction accumulates in float64 through ``np.add.reduce``, whose pairwise
traversal is fixed for a given shape, so scores are reproducible run to run.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ShapeError, UnknownDTypeError


@dataclass(frozen=True)
class SourceDType:
    tag: str
    width: int
    numpy: str


DTYPES = {
    "F32": SourceDType("F32", 4, "<f4"),
    "F16": SourceDType("F16", 2, "<f2"),
    "BF16": SourceDType("BF16", 2, "<u2"),
}

_ALIASES = {
    "float32": "F32", "f32": "F32",
    "float16": "F16", "f16": "F16", "half": "F16",
    "bfloat16": "BF16", "bf16": "BF16",
}


def dtype_of(tag: str | SourceDType) -> SourceDType:
    if isinstance(tag, SourceDType):
        return tag
    key = _ALIASES.get(tag.lower(), tag.upper())
    try:
        return DTYPES[key]
    except KeyError:
        raise UnknownDTypeError(f"unknown dtype tag {tag!r}") from None


def decode(raw: bytes | memoryview, dtype: str | SourceDType, count: int) -> np.ndarray:
    """Little-endian payload -> float32 vector of ``count`` values.

    Half-precision formats embed exactly into float32, so this never rounds.
    """
    dt = dtype_of(dtype)
    if len(raw) != count * dt.width:
        raise FormatError(
            f"payload has {len(raw)} bytes, expected {count} x {dt.width} for {dt.tag}"
        )
    if dt.tag == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        out = bits.view(np.float32)
    else:
        out = np.frombuffer(raw, dtype=dt.numpy).astype(np.float32)
    bad = ~np.isfinite(out)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DataError(f"non-finite {dt.tag} value at byte offset {idx * dt.width}")
    return out


def encode(values: np.ndarray, dtype: str | SourceDType) -> bytes:
    """float32 values -> little-endian payload, rounding to nearest even."""
    dt = dtype_of(dtype)
    x = np.ascontiguousarray(values, dtype=np.float32).ravel()
    if not np.isfinite(x).all():
        raise DataError("cannot encode non-finite values")
    if dt.tag == "F32":
        return x.astype("<f4").tobytes()
    if dt.tag == "F16":
        with np.errstate(over="ignore"):
            y = x.astype("<f2")
        if not np.isfinite(y).all():
            raise DataError("value overflows float16")
        return y.tobytes()
    bits = x.view(np.uint32).astype(np.uint64)
    bits = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    y = bits.astype("<u2")
    if ((y & 0x7F80) == 0x7F80).any():
        raise DataError("value overflows bfloat16")
    return y.tobytes()


def round_to(values: np.ndarray, dtype: str | SourceDType) -> np.ndarray:
    """Round float32 values to what ``dtype`` can store, keeping float32."""
    x = np.asarray(values, dtype=np.float32)
    return decode(encode(x, dtype), dtype, x.size).reshape(x.shape)


def as_tensor2d(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    t = np.asarray(values, dtype=np.float32)
    if t.ndim == 1 and rows is not None and cols is not None:
        t = t.reshape(rows, cols)
    if t.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {t.shape}")
    if (rows is not None and t.shape[0] != rows) or (cols is not None and t.shape[1] != cols):
        raise ShapeError(f"expected shape ({rows}, {cols}), got {t.shape}")
    if not np.isfinite(t).all():
        raise DataError("tensor contains non-finite values")
    return t


def l1_norm(t: np.ndarray) -> float:
    return float(np.add.reduce(np.abs(np.asarray(t, dtype=np.float64)), axis=None))


def sum_squares(t: np.ndarray) -> float:
    x = np.asarray(t, dtype=np.float64)
    return float(np.add.reduce(x * x, axis=None))


@dataclass(frozen=True)
class ExpertTensors:
    """gate (m x d), up (m x d) and down (d x m) projections of one expert."""

    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray

    def __post_init__(self):
        m, d = self.gate.shape
        if self.up.shape != (m, d) or self.down.shape != (d, m):
            raise ShapeError(
                f"inconsistent expert shapes gate={self.gate.shape} "
                f"up={self.up.shape} down={self.down.shape}"
            )
        if m * d == 0:
            raise ShapeError("expert has no parameters")

    @property
    def numel(self) -> int:
        return self.gate.size + self.up.size + self.down.size

    @property
    def dims(self) -> tuple[int, int]:
        """(d, m)"""
        return self.gate.shape[1], self.gate.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.gate.ravel(), self.up.ravel(), self.down.ravel()])

    @classmethod
    def from_flat(cls, w, d: int, m: int) -> "ExpertTensors":
        w = np.asarray(w, dtype=np.float32)
        if w.size != 3 * m * d:
            raise ShapeError(f"flat vector of {w.size} values cannot form 3 x {m} x {d}")
        k = m * d
        return cls(w[:k].reshape(m, d), w[k:2 * k].reshape(m, d), w[2 * k:].reshape(d, m))


def _vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def matvec(t: np.ndarray, v) -> np.ndarray:
    t = np.asarray(t)
    v = _vec(v)
    if t.ndim != 2 or v.ndim != 1 or t.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {t.shape} by vector of shape {v.shape}")
    return t.astype(np.float64) @ v


def silu(v) -> np.ndarray:
    v = _vec(v)
    # exp(-|x|) keeps the sigmoid finite at both tails
    e = np.exp(-np.abs(v))
    return v * np.where(v >= 0, 1.0, e) / (1.0 + e)


def hadamard(a, b) -> np.ndarray:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard of mismatched shapes {a.shape} and {b.shape}")
    return a * b


def softmax(v) -> np.ndarray:
    v = _vec(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax needs a nonempty vector")
    if not np.isfinite(v).all():
        raise DataError("softmax input is not finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def rms_normalize(v, eps: float = 1e-6) -> np.ndarray:
    v = _vec(v)
    return v / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
