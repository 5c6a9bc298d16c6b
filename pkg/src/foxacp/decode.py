"""Token-at-a-time decoding with an online pruning boundary and KV eviction.

The threshold must be fixed before the stream starts. Future query norms
are unknown, so it comes from a caller-supplied logit bound (for example
one derived from QK-norm scale parameters) and a declared maximum length.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import AttentionInputs, ValidationError
from .decay import LOG_FLOOR, GateTrace
from .pruning import compute_threshold


def decode_threshold(U: float, max_len: int, epsilon: float) -> float:
    return compute_threshold(U, max_len, epsilon)


@dataclass
class DecodeState:
    """Per-head decoding state.

    ``boundary`` is the absolute (0-based) position of the oldest retained
    cache entry; ``position`` is the index the next token will get.
    """

    head_dim: int
    delta: float
    boundary: int = 0
    position: int = 0
    c: float = 0.0
    cache: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.head_dim < 1:
            raise ValidationError("head_dim must be >= 1")
        if math.isnan(self.delta) or self.delta > 0:
            raise ValidationError(f"delta must be <= 0, got {self.delta}")

    @property
    def cache_len(self) -> int:
        return len(self.cache)


def decode_step(state: DecodeState, q, k, v, log_f: float):
    """Append one token, evict entries behind the boundary, return ``(o, evicted)``."""
    if not log_f <= 0:
        raise ValidationError(f"log forget gate must be <= 0, got {log_f}")
    d = state.head_dim
    q, k, v = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (q, k, v))
    if not (q.size == k.size == v.size == d):
        raise ValidationError(f"q, k, v must have {d} entries")

    state.c += max(log_f, LOG_FLOOR)
    state.cache.append((k, v, state.c))
    state.position += 1

    evicted = 0
    # Decay to the oldest entry only grows more negative over time, so
    # eviction is always from the front and the boundary never moves back.
    while state.c - state.cache[0][2] < state.delta:
        state.cache.popleft()
        state.boundary += 1
        evicted += 1

    keys = np.stack([e[0] for e in state.cache])
    vals = np.stack([e[1] for e in state.cache])
    cs = np.array([e[2] for e in state.cache])
    s = keys @ q / math.sqrt(d) + (state.c - cs)
    w = np.exp(s - s.max())
    return w @ vals / w.sum(), evicted


class DecodeStep(NamedTuple):
    step: int
    cache_len: int
    evicted: int
    boundary: int


class DecodeResult(NamedTuple):
    outputs: np.ndarray
    max_cache_len: int
    total_evicted: int
    history: list[DecodeStep]


def decode_sequence(inputs: AttentionInputs, trace: GateTrace, delta: float) -> DecodeResult:
    """Stream a whole head through :func:`decode_step`.

    ``delta = -inf`` disables pruning.
    """
    if trace.seq_len != inputs.seq_len:
        raise ValidationError("trace and inputs lengths differ")
    L, d = inputs.q.shape
    state = DecodeState(d, delta)
    out = np.empty((L, d))
    history = []
    max_len = total = 0
    for i in range(L):
        out[i], ev = decode_step(state, inputs.q[i], inputs.k[i], inputs.v[i], trace.log_gates[i])
        total += ev
        max_len = max(max_len, state.cache_len)
        history.append(DecodeStep(i, state.cache_len, ev, state.boundary))
    return DecodeResult(out, max_len, total, history)
