"""Logit bounds, the dynamic pruning threshold and the block boundary search.

Block indices are 0-based. Query block ``m`` covers rows
``[m*B_q, min((m+1)*B_q, L))``; key block ``l`` covers columns
``[l*B_k, min((l+1)*B_k, L))``. The last block in either direction may be
short when ``L`` is not a multiple of the block size.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .core import AttentionInputs, PruneConfig, ValidationError
from .decay import GateTrace

# Test hook: when True, blocks whose max decay equals delta are pruned too.
_PRUNE_TIES = False


@contextlib.contextmanager
def inject_tie_fault():
    """Temporarily flip the tie-break to ``D_max <= delta`` (mutation testing)."""
    global _PRUNE_TIES
    prev, _PRUNE_TIES = _PRUNE_TIES, True
    try:
        yield
    finally:
        _PRUNE_TIES = prev


def _pruned(d_max: float, delta: float) -> bool:
    return d_max <= delta if _PRUNE_TIES else d_max < delta


@dataclass(frozen=True)
class LogitBound:
    U: float
    mode: str


@dataclass
class BoundarySpec:
    """First unpruned key block per query-block row, plus block bookkeeping.

    ``n[m]`` is the first visited key block on row ``m`` and ``diag[m]`` the
    last key block holding any causal entry of that row, so row ``m`` visits
    ``n[m] .. diag[m]`` inclusive.
    """

    n: np.ndarray
    diag: np.ndarray
    delta: float
    block_q: int
    block_k: int
    seq_len: int
    iterations: int = 0
    clamp_hits: int = 0
    pruned_blocks_outside_prefix: int = field(default=0, repr=False)

    @property
    def num_query_blocks(self) -> int:
        return self.n.size

    @property
    def num_key_blocks(self) -> int:
        return -(-self.seq_len // self.block_k)

    @property
    def total_lower_blocks(self) -> int:
        return int((self.diag + 1).sum())

    @property
    def visited_blocks(self) -> int:
        return int((self.diag - self.n + 1).sum())

    @property
    def pruned_blocks(self) -> int:
        return self.total_lower_blocks - self.visited_blocks

    @property
    def pruned_fraction(self) -> float:
        return self.pruned_blocks / self.total_lower_blocks

    def row_ranges(self):
        for m in range(self.n.size):
            yield m, int(self.n[m]), int(self.diag[m])

    def rows_visiting(self, l: int) -> range:
        """Query-block rows that visit key block ``l`` (contiguous by monotonicity)."""
        lo = int(np.searchsorted(self.diag, l, side="left"))
        hi = int(np.searchsorted(self.n, l, side="right"))
        return range(lo, hi)

    def keep_mask(self) -> np.ndarray:
        """Entry-level mask of the visited blocks (causal entries only)."""
        L = self.seq_len
        keep = np.zeros((L, L), dtype=bool)
        for m, lo, hi in self.row_ranges():
            r0, r1 = m * self.block_q, min((m + 1) * self.block_q, L)
            keep[r0:r1, lo * self.block_k : min((hi + 1) * self.block_k, L)] = True
        return keep & np.tril(np.ones((L, L), dtype=bool))


def bound_explicit(inputs: AttentionInputs) -> LogitBound:
    """Exact ``max |q_i . k_j| / sqrt(d)`` over causal pairs. O(L^2 d); oracle only."""
    S = inputs.q @ inputs.k.T
    U = np.abs(np.tril(S)).max() / math.sqrt(inputs.head_dim)
    return LogitBound(float(U), "explicit_max")


def bound_from_norms(inputs: AttentionInputs) -> LogitBound:
    rho_q = np.linalg.norm(inputs.q, axis=1).max()
    rho_k = np.linalg.norm(inputs.k, axis=1).max()
    return LogitBound(float(rho_q * rho_k / math.sqrt(inputs.head_dim)), "query_key_norms")


def bound_from_qk_norm(gamma_q, gamma_k, d: int) -> LogitBound:
    """Bound for RMS-normalized queries/keys scaled elementwise by ``gamma``.

    Each such row has L2 norm at most ``max|gamma| * sqrt(d)``, hence
    ``|s_ij| <= max|gamma_q| * max|gamma_k| * sqrt(d)``.
    """
    gq = np.asarray(gamma_q, dtype=np.float64).reshape(-1)
    gk = np.asarray(gamma_k, dtype=np.float64).reshape(-1)
    if gq.size == 0 or gk.size == 0:
        raise ValidationError("gamma arrays must be non-empty")
    if d < 1:
        raise ValidationError(f"d must be >= 1, got {d}")
    U = np.abs(gq).max() * np.abs(gk).max() * math.sqrt(d)
    return LogitBound(float(U), "qk_norm_params")


def logit_bound(inputs: AttentionInputs, config: PruneConfig) -> LogitBound:
    if config.bound_mode == "explicit_max":
        return bound_explicit(inputs)
    if config.bound_mode == "query_key_norms":
        return bound_from_norms(inputs)
    return bound_from_qk_norm(config.gamma_q, config.gamma_k, inputs.head_dim)


def compute_threshold(bound: LogitBound | float, L: int, epsilon: float) -> float:
    """``delta = -2U - log L + log epsilon``.

    Entries with decay below this carry less than ``epsilon / L`` attention
    weight each, so a row loses less than ``epsilon`` in total.
    """
    U = bound.U if isinstance(bound, LogitBound) else float(bound)
    if not (0.0 < epsilon <= 1.0):
        raise ValidationError(f"epsilon must be in (0, 1], got {epsilon}")
    if L < 1:
        raise ValidationError(f"L must be >= 1, got {L}")
    if U < 0:
        raise ValidationError(f"U must be non-negative, got {U}")
    return -2.0 * U - math.log(L) + math.log(epsilon)


def _grid(L: int, block_q: int, block_k: int):
    if block_q < 1 or block_k < 1:
        raise ValidationError(f"block sizes must be >= 1, got {block_q}, {block_k}")
    M = -(-L // block_q)
    first_row = np.arange(M) * block_q
    last_row = np.minimum(first_row + block_q, L) - 1
    diag = last_row // block_k
    # First key block whose top-right entry is non-negative for this row.
    own = first_row // block_k
    last_col = np.minimum((np.arange(-(-L // block_k)) + 1) * block_k, L) - 1
    return first_row, diag, own, last_col


def _check_delta(delta: float):
    if math.isnan(delta) or delta > 0:
        raise ValidationError(f"delta must be <= 0, got {delta}")


def find_boundary(trace: GateTrace, delta: float, block_q: int, block_k: int) -> BoundarySpec:
    """Two-pointer scan for the first unpruned key block on each query-block row.

    The top-right entry ``c[first_row(m)] - c[last_col(l)]`` is the largest
    decay in block ``(m, l)``. Because the decay matrix is coordinate-wise
    monotone, the boundary never moves left as ``m`` grows, so a single
    pointer sweeps the key blocks once: at most ``M + N`` comparisons total.
    """
    _check_delta(delta)
    L = trace.seq_len
    c = trace.cumsum
    first_row, diag, own, last_col = _grid(L, block_q, block_k)
    M = first_row.size
    n = np.empty(M, dtype=np.int64)
    iterations = clamp_hits = 0
    l = 0
    for m in range(M):
        top = c[first_row[m]]
        cap = int(own[m])
        while True:
            iterations += 1
            if l >= cap:
                if l > cap or _pruned(top - c[last_col[cap]], delta):
                    clamp_hits += 1
                l = cap
                break
            if not _pruned(top - c[last_col[l]], delta):
                break
            l += 1
        n[m] = l
    return BoundarySpec(
        n=n,
        diag=diag.astype(np.int64),
        delta=float(delta),
        block_q=block_q,
        block_k=block_k,
        seq_len=L,
        iterations=iterations,
        clamp_hits=clamp_hits,
    )


def find_boundary_oracle(trace: GateTrace, delta: float, block_q: int, block_k: int) -> BoundarySpec:
    """Exhaustive O(MN) version: test every causal block independently.

    Each block's maximum is taken over all of its causal entries rather than
    read from the top-right corner. ``pruned_blocks_outside_prefix`` counts
    pruned blocks that are not part of a left-aligned prefix (always 0 for a
    valid trace; non-zero would mean monotonicity is broken).
    """
    _check_delta(delta)
    L = trace.seq_len
    c = trace.cumsum
    first_row, diag, _, _ = _grid(L, block_q, block_k)
    M = first_row.size
    n = np.empty(M, dtype=np.int64)
    stray = 0
    for m in range(M):
        rows = np.arange(first_row[m], min(first_row[m] + block_q, L))
        pruned = []
        for l in range(int(diag[m]) + 1):
            cols = np.arange(l * block_k, min((l + 1) * block_k, L))
            D = c[rows, None] - c[None, cols]
            d_max = D[rows[:, None] >= cols[None, :]].max()
            pruned.append(_pruned(d_max, delta))
        first_kept = pruned.index(False) if False in pruned else len(pruned)
        stray += sum(pruned[first_kept:])
        n[m] = first_kept
    return BoundarySpec(
        n=n,
        diag=diag.astype(np.int64),
        delta=float(delta),
        block_q=block_q,
        block_k=block_k,
        seq_len=L,
        iterations=0,
        pruned_blocks_outside_prefix=stray,
    )


def no_pruning(L: int, block_q: int, block_k: int) -> BoundarySpec:
    """Boundary that visits every causal block (``delta = -inf``)."""
    first_row, diag, _, _ = _grid(L, block_q, block_k)
    return BoundarySpec(
        n=np.zeros(first_row.size, dtype=np.int64),
        diag=diag.astype(np.int64),
        delta=-math.inf,
        block_q=block_q,
        block_k=block_k,
        seq_len=L,
    )


def block_max_decay(trace: GateTrace, block_q: int, block_k: int) -> np.ndarray:
    """Top-right decay entry of every block; NaN for blocks with no causal entry.

    Diagonal blocks report their true causal maximum, 0.
    """
    L = trace.seq_len
    c = trace.cumsum
    first_row, diag, _, last_col = _grid(L, block_q, block_k)
    out = c[first_row][:, None] - c[last_col][None, :]
    cols = np.arange(last_col.size)
    out = np.where(last_col[None, :] >= first_row[:, None], 0.0, out)
    return np.where(cols[None, :] <= diag[:, None], out, np.nan)
