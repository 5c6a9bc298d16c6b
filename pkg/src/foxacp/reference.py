"""Dense O(L^2) oracles for forgetting attention, its pruned variants and gradients.

Nothing here is tuned; these functions exist to be obviously correct. Masks
are boolean ``L x L`` arrays where True means the entry participates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttentionInputs, ValidationError, as_matrix
from .decay import GateTrace


@dataclass
class AttentionOutput:
    o: np.ndarray
    weights: np.ndarray | None = None


@dataclass
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dlog_gates: np.ndarray


def _check(inputs: AttentionInputs, trace: GateTrace):
    if trace.seq_len != inputs.seq_len:
        raise ValidationError(
            f"trace length {trace.seq_len} != sequence length {inputs.seq_len}"
        )


def decay_matrix(trace: GateTrace) -> np.ndarray:
    """Dense decay bias with -inf above the diagonal (oracle use only)."""
    c = trace.cumsum
    D = c[:, None] - c[None, :]
    np.fill_diagonal(D, 0.0)
    D[np.triu_indices(c.size, 1)] = -np.inf
    return D


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def entry_keep_mask(trace: GateTrace, delta: float) -> np.ndarray:
    """Entry-level indicator: keep ``(i, j)`` iff ``j <= i`` and ``D[i, j] >= delta``."""
    return decay_matrix(trace) >= delta


def block_keep_mask(trace: GateTrace, delta: float, block_q: int, block_k: int):
    """Block-level indicator computed by brute force.

    A block is kept iff the largest causal decay entry inside it is
    ``>= delta``; every causal entry of a kept block participates.
    """
    if block_q < 1 or block_k < 1:
        raise ValidationError("block sizes must be >= 1")
    D = decay_matrix(trace)
    L = D.shape[0]
    keep = np.zeros((L, L), dtype=bool)
    for r0 in range(0, L, block_q):
        r1 = min(r0 + block_q, L)
        for k0 in range(0, L, block_k):
            k1 = min(k0 + block_k, L)
            blk = D[r0:r1, k0:k1]
            if np.isfinite(blk).any() and blk.max() >= delta:
                keep[r0:r1, k0:k1] = np.isfinite(blk)
    return keep


def _logits(inputs: AttentionInputs, trace: GateTrace, keep: np.ndarray):
    d = inputs.head_dim
    S = inputs.q @ inputs.k.T / np.sqrt(d) + decay_matrix(trace)
    return np.where(keep, S, -np.inf)


def _softmax_rows(S):
    m = S.max(axis=1, keepdims=True)
    E = np.exp(S - m)
    return E / E.sum(axis=1, keepdims=True)


def masked_forward(inputs, trace, keep) -> AttentionOutput:
    """Softmax attention restricted to ``keep`` (which must contain the diagonal)."""
    _check(inputs, trace)
    keep = np.asarray(keep, dtype=bool) & causal_mask(inputs.seq_len)
    if not keep.diagonal().all():
        raise ValidationError("mask must keep every diagonal entry")
    A = _softmax_rows(_logits(inputs, trace, keep))
    return AttentionOutput(A @ inputs.v, A)


def naive_forward(inputs: AttentionInputs, trace: GateTrace) -> AttentionOutput:
    return masked_forward(inputs, trace, causal_mask(inputs.seq_len))


def naive_pruned_forward(inputs, trace, delta: float) -> AttentionOutput:
    """Entry-level pruning: drop every ``(i, j)`` with ``D[i, j] < delta``."""
    if not delta < 0:
        raise ValidationError(f"delta must be negative, got {delta}")
    return masked_forward(inputs, trace, entry_keep_mask(trace, delta))


def naive_block_pruned_forward(inputs, trace, delta, block_q, block_k):
    return masked_forward(
        inputs, trace, block_keep_mask(trace, delta, block_q, block_k)
    )


def pruned_weight_mass(inputs, trace, delta: float) -> np.ndarray:
    """Per-row full-attention weight that falls on entries with ``D < delta``."""
    A = naive_forward(inputs, trace).weights
    pruned = causal_mask(inputs.seq_len) & ~entry_keep_mask(trace, delta)
    return np.where(pruned, A, 0.0).sum(axis=1)


def naive_backward(inputs, trace, upstream, keep=None) -> AttentionGrads:
    """Analytic gradient of ``<upstream, O>`` for the (optionally masked) attention.

    The mask is held fixed, so with ``keep`` from a pruning rule this is the
    gradient of the pruned function away from its switching points.
    """
    _check(inputs, trace)
    L, d = inputs.q.shape
    dO = as_matrix(upstream, "upstream")
    if dO.shape != (L, d):
        raise ValidationError(f"upstream shape {dO.shape} != {(L, d)}")
    if keep is None:
        keep = causal_mask(L)
    out = masked_forward(inputs, trace, keep)
    A, O = out.weights, out.o
    scale = 1.0 / np.sqrt(d)

    dV = A.T @ dO
    dA = dO @ inputs.v.T
    dS = A * (dA - (dO * O).sum(axis=1, keepdims=True))
    dQ = dS @ inputs.k * scale
    dK = dS.T @ inputs.q * scale
    # D[i, j] = c[i] - c[j] and c is the prefix sum of the log-gates.
    dc = dS.sum(axis=1) - dS.sum(axis=0)
    dlog = np.cumsum(dc[::-1])[::-1]
    return AttentionGrads(dQ, dK, dV, dlog)
