"""Shared containers, configuration, seeded randomness and the binary trace format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .decay import GateTrace

DEFAULT_EPSILON = math.exp(-10.0)
DEFAULT_BLOCK = 64

BOUND_MODES = ("explicit_max", "query_key_norms", "qk_norm_params")
PRECISIONS = ("f64", "f32")

TRACE_MAGIC = b"FOXTRC01"
_HEADER = struct.Struct("<8sIII")


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class TraceFormatError(ValueError):
    """Trace file does not start with the expected magic bytes."""


class TraceLengthError(ValueError):
    """Trace file payload is shorter or longer than its header declares."""


def as_matrix(a, name="matrix", dtype=np.float64) -> np.ndarray:
    """Return a finite, C-contiguous 2-D copy of ``a``."""
    arr = np.array(a, dtype=dtype, order="C", copy=True)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class AttentionInputs:
    """Per-head query, key and value matrices, each ``L x d``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        # float32 survives so reduced-precision runs stay reduced; anything else becomes float64
        dt = np.float32 if all(getattr(a, "dtype", None) == np.float32 for a in (self.q, self.k, self.v)) else np.float64
        q = as_matrix(self.q, "q", dt)
        k = as_matrix(self.k, "k", dt)
        v = as_matrix(self.v, "v", dt)
        if not (q.shape == k.shape == v.shape):
            raise ValidationError(
                f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}"
            )
        if q.shape[0] < 1 or q.shape[1] < 1:
            raise ValidationError(f"need L >= 1 and d >= 1, got {q.shape}")
        for name, arr in (("q", q), ("k", k), ("v", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def seq_len(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    def astype(self, dtype) -> "AttentionInputs":
        if self.q.dtype == dtype:
            return self
        return AttentionInputs(
            self.q.astype(dtype), self.k.astype(dtype), self.v.astype(dtype)
        )


@dataclass(frozen=True)
class PruneConfig:
    """Pruning hyperparameters.

    ``gamma_q``/``gamma_k`` are the RMSNorm scale vectors and are only
    consulted when ``bound_mode == "qk_norm_params"``.
    """

    epsilon: float = DEFAULT_EPSILON
    block_q: int = DEFAULT_BLOCK
    block_k: int = DEFAULT_BLOCK
    bound_mode: str = "query_key_norms"
    precision: str = "f64"
    gamma_q: tuple[float, ...] | None = None
    gamma_k: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0) or math.isnan(self.epsilon):
            raise ValidationError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.block_q < 1 or self.block_k < 1:
            raise ValidationError(
                f"block sizes must be >= 1, got {self.block_q}, {self.block_k}"
            )
        if self.bound_mode not in BOUND_MODES:
            raise ValidationError(f"unknown bound_mode {self.bound_mode!r}")
        if self.precision not in PRECISIONS:
            raise ValidationError(f"unknown precision {self.precision!r}")
        if self.bound_mode == "qk_norm_params" and (
            not self.gamma_q or not self.gamma_k
        ):
            raise ValidationError("qk_norm_params mode needs gamma_q and gamma_k")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


class Rng:
    """Seeded random stream (PCG64) with deterministic child forking.

    Children are derived from the seed sequence, not from draws, so forking
    never perturbs the parent stream.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if seed.entropy is not None else 0
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def fork(self, n: int) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)


def trace_file_size(num_heads: int, seq_len: int, head_dim: int) -> int:
    return _HEADER.size + num_heads * (seq_len + 3 * seq_len * head_dim) * 8


def write_trace(path, records) -> None:
    """Write ``(GateTrace, AttentionInputs)`` records as a FOXTRC01 file.

    All heads must share ``L`` and ``d``. Values are stored as little-endian
    float64 so a round trip through :func:`read_trace` is bit-exact.
    """
    records = list(records)
    if records:
        L = records[0][1].seq_len
        d = records[0][1].head_dim
    else:
        L = d = 0
    parts = [_HEADER.pack(TRACE_MAGIC, len(records), L, d)]
    for h, (trace, inputs) in enumerate(records):
        if inputs.seq_len != L or inputs.head_dim != d:
            raise ValidationError(
                f"head {h} has shape {inputs.q.shape}, expected ({L}, {d})"
            )
        if trace.seq_len != L:
            raise ValidationError(f"head {h} gate trace has length {trace.seq_len}")
        if np.any(trace.log_gates > 0):
            raise ValidationError(f"head {h} has positive log-gates")
        for arr in (trace.log_gates, inputs.q, inputs.k, inputs.v):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_trace(path) -> list[tuple["GateTrace", AttentionInputs]]:
    from .decay import GateTrace

    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:8] != TRACE_MAGIC:
        raise TraceFormatError(f"{path}: missing FOXTRC01 magic")
    _, H, L, d = _HEADER.unpack_from(raw)
    expected = trace_file_size(H, L, d)
    if len(raw) != expected:
        raise TraceLengthError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    per_head = L + 3 * L * d
    records = []
    for h in range(H):
        chunk = data[h * per_head : (h + 1) * per_head]
        log_gates = chunk[:L].astype(np.float64)
        if np.any(log_gates > 0):
            raise ValidationError(f"{path}: head {h} has a positive log-gate")
        mats = chunk[L:].astype(np.float64).reshape(3, L, d)
        records.append(
            (GateTrace.from_log_gates(log_gates), AttentionInputs(*mats))
        )
    return records
