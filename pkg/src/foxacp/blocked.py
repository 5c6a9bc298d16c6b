"""Tiled forward/backward forgetting attention that skips pruned blocks.

Each query-block row ``m`` iterates key blocks ``n[m] .. diag[m]`` with an
online softmax; blocks left of ``n[m]`` are never loaded. The backward pass
recomputes block probabilities from the saved row max and denominator.

Work is split so that every output element has exactly one owner:
query-block rows own ``dq`` and the row half of ``dc``; key blocks own
``dk``, ``dv`` and the column half of ``dc``. Each owner accumulates in a
fixed order, which makes the result bitwise independent of how many worker
threads run.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import AttentionInputs, PruneConfig, ValidationError, as_matrix
from .decay import GateTrace
from .pruning import BoundarySpec, compute_threshold, find_boundary, logit_bound, no_pruning
from .reference import AttentionGrads, AttentionOutput


@dataclass
class BlockCounters:
    visited_blocks: int
    total_lower_blocks: int
    skipped_kv_loads: int
    flops_visited: int
    flops_total: int

    @property
    def pruned_fraction(self) -> float:
        if self.total_lower_blocks == 0:
            return 0.0
        return 1.0 - self.visited_blocks / self.total_lower_blocks


@dataclass
class SavedStats:
    """What the backward pass needs from the forward: row max, denominator, output."""

    row_max: np.ndarray
    row_denom: np.ndarray
    o: np.ndarray


class ForwardResult(NamedTuple):
    output: AttentionOutput
    boundary: BoundarySpec
    counters: BlockCounters
    stats: SavedStats


class AccessLog:
    """Records every K/V block read as ``(pass, query_block, key_block)``."""

    def __init__(self):
        self.reads: list[tuple[str, int, int]] = []

    def record(self, tag, m, n):
        self.reads.append((tag, m, n))

    def pairs(self, tag=None) -> set[tuple[int, int]]:
        return {(m, n) for t, m, n in self.reads if tag is None or t == tag}


def _block_flops(boundary: BoundarySpec, d: int):
    """Matmul flops (scores + value aggregation) of visited and all causal blocks."""
    L, bq, bk = boundary.seq_len, boundary.block_q, boundary.block_k
    col_w = np.minimum((np.arange(boundary.num_key_blocks) + 1) * bk, L) - np.arange(boundary.num_key_blocks) * bk
    col_cum = np.concatenate([[0], np.cumsum(col_w)])
    visited = total = 0
    for m, lo, hi in boundary.row_ranges():
        rows = min((m + 1) * bq, L) - m * bq
        visited += 4 * rows * int(col_cum[hi + 1] - col_cum[lo]) * d
        total += 4 * rows * int(col_cum[hi + 1]) * d
    return visited, total


def make_counters(boundary: BoundarySpec, d: int) -> BlockCounters:
    fv, ft = _block_flops(boundary, d)
    return BlockCounters(
        visited_blocks=boundary.visited_blocks,
        total_lower_blocks=boundary.total_lower_blocks,
        skipped_kv_loads=boundary.pruned_blocks,
        flops_visited=fv,
        flops_total=ft,
    )


def _run(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _check_dims(inputs: AttentionInputs, trace: GateTrace):
    if trace.seq_len != inputs.seq_len:
        raise ValidationError(
            f"trace length {trace.seq_len} != sequence length {inputs.seq_len}"
        )


def _block_logits(q_blk, k_blk, c_rows, c_cols, r0, k0, scale):
    S = q_blk @ k_blk.T * scale + (c_rows[:, None] - c_cols[None, :])
    if k0 + k_blk.shape[0] - 1 > r0:
        rows = np.arange(r0, r0 + q_blk.shape[0])
        cols = np.arange(k0, k0 + k_blk.shape[0])
        S = np.where(cols[None, :] > rows[:, None], -np.inf, S)
    return S


def blocked_forward(inputs, trace, boundary: BoundarySpec, dtype=np.float64, workers=1, access_log=None):
    """Run the tiled forward over the blocks ``boundary`` marks as visited."""
    _check_dims(inputs, trace)
    inputs = inputs.astype(dtype)
    Q, K, V = inputs.q, inputs.k, inputs.v
    c = trace.cumsum.astype(dtype)
    L, d = Q.shape
    bq, bk = boundary.block_q, boundary.block_k
    scale = dtype(1.0 / math.sqrt(d))

    def row(item):
        m, lo, hi = item
        r0, r1 = m * bq, min((m + 1) * bq, L)
        q_blk, c_rows = Q[r0:r1], c[r0:r1]
        run_max = np.full(r1 - r0, -np.inf, dtype=dtype)
        denom = np.zeros(r1 - r0, dtype=dtype)
        acc = np.zeros((r1 - r0, d), dtype=dtype)
        for n in range(lo, hi + 1):
            k0, k1 = n * bk, min((n + 1) * bk, L)
            if access_log is not None:
                access_log.record("fwd", m, n)
            S = _block_logits(q_blk, K[k0:k1], c_rows, c[k0:k1], r0, k0, scale)
            # The first visited block holds a causal entry for every row, so
            # run_max is finite from then on and exp never sees inf - inf.
            new_max = np.maximum(run_max, S.max(axis=1))
            alpha = np.exp(run_max - new_max)
            P = np.exp(S - new_max[:, None])
            denom = denom * alpha + P.sum(axis=1)
            acc = acc * alpha[:, None] + P @ V[k0:k1]
            run_max = new_max
        return acc / denom[:, None], run_max, denom

    results = _run(row, list(boundary.row_ranges()), workers)
    O = np.concatenate([r[0] for r in results])
    row_max = np.concatenate([r[1] for r in results])
    denom = np.concatenate([r[2] for r in results])
    return AttentionOutput(O), SavedStats(row_max, denom, O)


def _resolve_delta(inputs, trace, config, delta):
    if delta is not None:
        return float(delta)
    return compute_threshold(logit_bound(inputs, config), trace.seq_len, config.epsilon)


def acp_forward(inputs: AttentionInputs, trace: GateTrace, config: PruneConfig = PruneConfig(), delta=None, workers=1, access_log=None) -> ForwardResult:
    """Forward pass with adaptive computation pruning.

    ``delta`` defaults to the threshold derived from ``config`` (logit bound,
    sequence length, epsilon); pass it explicitly to pin the pruning pattern.
    """
    _check_dims(inputs, trace)
    delta = _resolve_delta(inputs, trace, config, delta)
    boundary = find_boundary(trace, delta, config.block_q, config.block_k)
    out, stats = blocked_forward(inputs, trace, boundary, config.dtype, workers, access_log)
    return ForwardResult(out, boundary, make_counters(boundary, inputs.head_dim), stats)


def full_blocked_forward(inputs, trace, config: PruneConfig = PruneConfig(), workers=1, access_log=None) -> ForwardResult:
    """Unpruned tiled forward; visits every causal block."""
    _check_dims(inputs, trace)
    boundary = no_pruning(inputs.seq_len, config.block_q, config.block_k)
    out, stats = blocked_forward(inputs, trace, boundary, config.dtype, workers, access_log)
    return ForwardResult(out, boundary, make_counters(boundary, inputs.head_dim), stats)


def acp_backward(inputs, trace, config: PruneConfig, boundary: BoundarySpec, saved_stats: SavedStats, upstream, workers=1, access_log=None) -> AttentionGrads:
    """Gradients of ``<upstream, O>`` through the block-pruned attention.

    Pruned blocks are never visited and so contribute exactly zero.
    """
    _check_dims(inputs, trace)
    dtype = config.dtype
    L, d = inputs.q.shape
    dO = as_matrix(upstream, "upstream").astype(dtype)
    if dO.shape != (L, d):
        raise ValidationError(f"upstream shape {dO.shape} != {(L, d)}")
    if (
        boundary.seq_len != L
        or saved_stats.row_max.shape != (L,)
        or saved_stats.row_denom.shape != (L,)
        or saved_stats.o.shape != (L, d)
    ):
        raise ValidationError("saved stats / boundary do not match these inputs")
    if boundary.block_q != config.block_q or boundary.block_k != config.block_k:
        raise ValidationError("boundary was built with different block sizes")

    inputs = inputs.astype(dtype)
    Q, K, V = inputs.q, inputs.k, inputs.v
    c = trace.cumsum.astype(dtype)
    row_max = saved_stats.row_max.astype(dtype)
    denom = saved_stats.row_denom.astype(dtype)
    # rowsum(dO * O) per query, the softmax-backward correction term
    corr = (dO * saved_stats.o.astype(dtype)).sum(axis=1)
    bq, bk = boundary.block_q, boundary.block_k
    scale = dtype(1.0 / math.sqrt(d))

    def block_grads(m, n):
        r0, r1 = m * bq, min((m + 1) * bq, L)
        k0, k1 = n * bk, min((n + 1) * bk, L)
        S = _block_logits(Q[r0:r1], K[k0:k1], c[r0:r1], c[k0:k1], r0, k0, scale)
        P = np.exp(S - row_max[r0:r1, None]) / denom[r0:r1, None]
        dP = dO[r0:r1] @ V[k0:k1].T
        dS = P * (dP - corr[r0:r1, None])
        return P, dS

    def query_row(item):
        m, lo, hi = item
        r0, r1 = m * bq, min((m + 1) * bq, L)
        dq = np.zeros((r1 - r0, d), dtype=dtype)
        dc = np.zeros(r1 - r0, dtype=dtype)
        for n in range(lo, hi + 1):
            if access_log is not None:
                access_log.record("bwd_q", m, n)
            k0, k1 = n * bk, min((n + 1) * bk, L)
            _, dS = block_grads(m, n)
            dq += dS @ K[k0:k1] * scale
            dc += dS.sum(axis=1)
        return dq, dc

    def key_col(n):
        k0, k1 = n * bk, min((n + 1) * bk, L)
        dk = np.zeros((k1 - k0, d), dtype=dtype)
        dv = np.zeros((k1 - k0, d), dtype=dtype)
        dc = np.zeros(k1 - k0, dtype=dtype)
        for m in boundary.rows_visiting(n):
            if access_log is not None:
                access_log.record("bwd_kv", m, n)
            r0, r1 = m * bq, min((m + 1) * bq, L)
            P, dS = block_grads(m, n)
            dv += P.T @ dO[r0:r1]
            dk += dS.T @ Q[r0:r1] * scale
            dc -= dS.sum(axis=0)
        return dk, dv, dc

    rows = _run(query_row, list(boundary.row_ranges()), workers)
    cols = _run(key_col, range(boundary.num_key_blocks), workers)
    dQ = np.concatenate([r[0] for r in rows])
    dK = np.concatenate([r[0] for r in cols])
    dV = np.concatenate([r[1] for r in cols])
    dc = np.concatenate([r[1] for r in rows]) + np.concatenate([r[2] for r in cols])
    dlog = np.cumsum(dc[::-1])[::-1]
    return AttentionGrads(dQ, dK, dV, dlog)
