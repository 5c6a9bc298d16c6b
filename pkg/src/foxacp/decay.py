"""Forget gates, their log-cumulative sums, and decay-bias entries.

Every consumer works from the prefix sums ``c``; the ``L x L`` decay matrix
is never materialized here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError

# Keeps c finite when a gate underflows to 0; e^-60 is far below any threshold.
LOG_FLOOR = -60.0


@dataclass(frozen=True)
class GateParams:
    w_f: np.ndarray
    b_f: float

    def __post_init__(self):
        w = np.asarray(self.w_f, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)) or not np.isfinite(self.b_f):
            raise ValidationError("gate parameters must be finite")
        object.__setattr__(self, "w_f", w)


@dataclass(frozen=True)
class GateTrace:
    """Per-head log forget gates and their prefix sums (0-based)."""

    log_gates: np.ndarray
    cumsum: np.ndarray

    @classmethod
    def from_log_gates(cls, log_gates) -> "GateTrace":
        lg = np.asarray(log_gates, dtype=np.float64).reshape(-1)
        if lg.size < 1:
            raise ValidationError("gate trace needs at least one step")
        if np.any(np.isnan(lg)) or np.any(lg > 0):
            raise ValidationError("log-gates must be <= 0")
        lg = np.maximum(lg, LOG_FLOOR)
        c = np.cumsum(lg)
        lg.setflags(write=False)
        c.setflags(write=False)
        return cls(lg, c)

    @property
    def seq_len(self) -> int:
        return self.log_gates.shape[0]


def sigmoid(x):
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate_from_inputs(x_t, params: GateParams) -> float:
    """Forget gate ``sigmoid(w_f . x_t + b_f)`` for a single timestep."""
    x = np.asarray(x_t, dtype=np.float64).reshape(-1)
    if x.shape != params.w_f.shape:
        raise ValidationError(
            f"x_t has {x.size} features, w_f has {params.w_f.size}"
        )
    return float(sigmoid(np.array(x @ params.w_f + params.b_f)))


def log_sigmoid(x):
    """``log(sigmoid(x))`` without underflow for very negative logits."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def build_trace(gates) -> GateTrace:
    """Build a :class:`GateTrace` from raw gate values in ``(0, 1]``."""
    g = np.asarray(gates, dtype=np.float64).reshape(-1)
    if g.size < 1:
        raise ValidationError("gate trace needs at least one step")
    if np.any(~(g > 0)) or np.any(g > 1):
        raise ValidationError("gates must lie in (0, 1]")
    return GateTrace.from_log_gates(np.log(g))


def decay_entry(trace: GateTrace, i: int, j: int) -> float:
    """Decay bias ``D[i, j] = c[i] - c[j]`` for ``j <= i`` (0-based)."""
    if not (0 <= j <= i < trace.seq_len):
        raise ValidationError(
            f"need 0 <= j <= i < {trace.seq_len}, got i={i}, j={j}"
        )
    if i == j:
        return 0.0
    return float(trace.cumsum[i] - trace.cumsum[j])
