"""Savings accounting: per-head pruned fractions, histograms, epsilon sweeps, boundary exports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PruneConfig, ValidationError
from .pruning import block_max_decay, compute_threshold, find_boundary, logit_bound

NUM_BINS = 20

PER_HEAD_HEADER = ("head_id", "layer_id", "pruned_fraction")
HISTOGRAM_HEADER = ("bin_low_percent", "bin_high_percent", "mass")
LAYER_HISTOGRAM_HEADER = ("layer_id", "bin_low_percent", "bin_high_percent", "mass")
SWEEP_HEADER = ("epsilon", "delta", "pruned_fraction")
BOUNDARY_HEADER = ("row_block", "first_unpruned_col")
BLOCK_DMAX_HEADER = ("row_block", "col_block", "d_max")


@dataclass
class HeadSavings:
    head_id: int
    layer_id: int
    pruned_blocks: int
    total_blocks: int
    delta: float

    @property
    def pruned_fraction(self) -> float:
        return self.pruned_blocks / self.total_blocks


@dataclass
class SavingsReport:
    per_head: list[HeadSavings]
    histogram: np.ndarray
    aggregate_pruned_fraction: float

    def layer_histograms(self) -> dict[int, np.ndarray]:
        layers = sorted({h.layer_id for h in self.per_head})
        return {
            layer: savings_histogram([h for h in self.per_head if h.layer_id == layer])
            for layer in layers
        }


@dataclass
class SweepTable:
    epsilon: np.ndarray
    delta: np.ndarray
    pruned_fraction: np.ndarray

    def rows(self):
        return list(zip(self.epsilon.tolist(), self.delta.tolist(), self.pruned_fraction.tolist()))


def bin_edges_percent():
    return [(5 * b, 5 * (b + 1)) for b in range(NUM_BINS)]


def savings_bin(pruned: int, total: int) -> int:
    """Bin index for a pruned/total ratio: [0,5), [5,10), ..., [95,100].

    Integer arithmetic, so ratios sitting exactly on an edge land in the
    upper bin and 100% joins the last bin.
    """
    return min(NUM_BINS - 1, (pruned * NUM_BINS) // total)


def savings_histogram(heads) -> np.ndarray:
    hist = np.zeros(NUM_BINS)
    for h in heads:
        hist[savings_bin(h.pruned_blocks, h.total_blocks)] += 1
    if hist.sum() > 0:
        hist /= hist.sum()
    return hist


def _head_savings(h, trace, inputs, layer, config):
    delta = compute_threshold(logit_bound(inputs, config), trace.seq_len, config.epsilon)
    b = find_boundary(trace, delta, config.block_q, config.block_k)
    return HeadSavings(h, int(layer), b.pruned_blocks, b.total_lower_blocks, delta)


def _normalize_records(records):
    out = []
    for rec in records:
        if len(rec) == 2:
            out.append((rec[0], rec[1], 0))
        else:
            out.append(tuple(rec[:3]))
    if not out:
        raise ValidationError("need at least one head")
    return out


def savings_for_traces(records, config: PruneConfig = PruneConfig()) -> SavingsReport:
    """Per-head pruned-block fractions on the forward grid.

    ``records`` holds ``(GateTrace, AttentionInputs, layer_id)``; the layer id
    may be omitted. Each head gets its own threshold from its own logit bound.
    """
    records = _normalize_records(records)
    heads = [
        _head_savings(h, trace, inputs, layer, config)
        for h, (trace, inputs, layer) in enumerate(records)
    ]
    agg = sum(h.pruned_blocks for h in heads) / sum(h.total_blocks for h in heads)
    return SavingsReport(heads, savings_histogram(heads), agg)


def sweep_epsilon(records, config: PruneConfig, epsilons) -> SweepTable:
    """Aggregate pruned fraction for each epsilon.

    The ``delta`` column is the mean threshold across heads (each head's
    logit bound differs, so so does its threshold).
    """
    records = _normalize_records(records)
    epsilons = [float(e) for e in epsilons]
    for e in epsilons:
        if not (0.0 < e <= 1.0):
            raise ValidationError(f"epsilon must be in (0, 1], got {e}")
    bounds = [logit_bound(inputs, config) for _, inputs, _ in records]
    deltas, fracs = [], []
    for eps in epsilons:
        pruned = total = 0
        ds = []
        for (trace, _, _), bound in zip(records, bounds):
            delta = compute_threshold(bound, trace.seq_len, eps)
            b = find_boundary(trace, delta, config.block_q, config.block_k)
            pruned += b.pruned_blocks
            total += b.total_lower_blocks
            ds.append(delta)
        deltas.append(float(np.mean(ds)))
        fracs.append(pruned / total)
    return SweepTable(np.array(epsilons), np.array(deltas), np.array(fracs))


def export_boundary(trace, config: PruneConfig = PruneConfig(), delta=None, bound=None):
    """Boundary polyline ``[(m, n_m)]`` and the per-block max decay grid.

    The threshold is ``delta`` if given, else derived from ``bound`` (a
    :class:`~foxacp.pruning.LogitBound` or float U) with ``config.epsilon``.
    Cells with no causal entry are NaN in the grid.
    """
    if delta is None:
        if bound is None:
            raise ValidationError("export_boundary needs delta or a logit bound")
        delta = compute_threshold(bound, trace.seq_len, config.epsilon)
    b = find_boundary(trace, delta, config.block_q, config.block_k)
    polyline = [(m, int(b.n[m])) for m in range(b.num_query_blocks)]
    return polyline, block_max_decay(trace, config.block_q, config.block_k)


def _write(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def write_per_head_csv(path, report: SavingsReport):
    return _write(path, PER_HEAD_HEADER, [(h.head_id, h.layer_id, _fmt(h.pruned_fraction)) for h in report.per_head])


def write_histogram_csv(path, hist):
    return _write(path, HISTOGRAM_HEADER, [(lo, hi, _fmt(m)) for (lo, hi), m in zip(bin_edges_percent(), hist)])


def write_layer_histogram_csv(path, report: SavingsReport):
    rows = []
    for layer, hist in report.layer_histograms().items():
        rows.extend((layer, lo, hi, _fmt(m)) for (lo, hi), m in zip(bin_edges_percent(), hist))
    return _write(path, LAYER_HISTOGRAM_HEADER, rows)


def write_sweep_csv(path, table: SweepTable):
    return _write(path, SWEEP_HEADER, [tuple(map(_fmt, r)) for r in table.rows()])


def write_boundary_csv(path, polyline):
    return _write(path, BOUNDARY_HEADER, polyline)


def write_block_dmax_csv(path, grid):
    rows = [
        (m, n, _fmt(grid[m, n]))
        for m in range(grid.shape[0])
        for n in range(grid.shape[1])
        if not math.isnan(grid[m, n])
    ]
    return _write(path, BLOCK_DMAX_HEADER, rows)
