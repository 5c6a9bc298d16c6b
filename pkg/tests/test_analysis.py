import csv
import math

import numpy as np
import pytest

from foxacp.analysis import (
    BLOCK_DMAX_HEADER,
    BOUNDARY_HEADER,
    HISTOGRAM_HEADER,
    LAYER_HISTOGRAM_HEADER,
    PER_HEAD_HEADER,
    SWEEP_HEADER,
    bin_edges_percent,
    export_boundary,
    savings_bin,
    savings_for_traces,
    sweep_epsilon,
    write_block_dmax_csv,
    write_boundary_csv,
    write_histogram_csv,
    write_layer_histogram_csv,
    write_per_head_csv,
    write_sweep_csv,
)
from foxacp.blocked import acp_forward
from foxacp.core import AttentionInputs, PruneConfig, Rng, ValidationError
from foxacp.pruning import compute_threshold, find_boundary_oracle
from foxacp.workload import HeadProfile, constant_decay_trace, generate_head, generate_model

EPS = [math.exp(-30), math.exp(-20), math.exp(-10), math.exp(-5), math.exp(-1)]


def test_bins():
    assert bin_edges_percent()[0] == (0, 5) and bin_edges_percent()[-1] == (95, 100)
    assert len(bin_edges_percent()) == 20
    assert savings_bin(0, 10) == 0
    assert savings_bin(1, 20) == 1  # exactly 5% sits in [5, 10)
    assert savings_bin(19, 20) == 19
    assert savings_bin(20, 20) == 19
    assert savings_bin(94, 100) == 18


def test_no_decay_everything_zero(make_head):
    recs = [make_head(Rng(s), 200, 4, decay=0.0) for s in range(3)]
    rep = savings_for_traces(recs, PruneConfig(block_q=16, block_k=16))
    assert rep.aggregate_pruned_fraction == 0.0
    assert rep.histogram[0] == 1.0 and rep.histogram.sum() == 1.0
    tab = sweep_epsilon(recs, PruneConfig(block_q=16, block_k=16), EPS)
    assert np.all(tab.pruned_fraction == 0.0)


def test_constant_decay_head_exhaustive_count():
    L, B = 4096, 64
    t = constant_decay_trace(L, -1.0)
    delta = compute_threshold(1.0, 1024, math.exp(-10))
    polyline, _ = export_boundary(t, PruneConfig(block_q=B, block_k=B), delta=delta)
    o = find_boundary_oracle(t, delta, B, B)
    assert [n for _, n in polyline] == o.n.tolist()
    # A 19-position window keeps the diagonal block and its left neighbour.
    assert o.visited_blocks == 64 + 63
    assert o.pruned_fraction == pytest.approx(1953 / 2080, rel=1e-15)


def test_aggregate_matches_independent_counters():
    recs = generate_model(2, 2, 0.5, 512, 8, Rng(1))
    cfg = PruneConfig(block_q=32, block_k=32)
    rep = savings_for_traces(recs, cfg)
    counters = [acp_forward(inp, t, cfg).counters for t, inp, _ in recs]
    assert rep.aggregate_pruned_fraction == pytest.approx(np.mean([c.pruned_fraction for c in counters]), rel=1e-12)
    for h, c in zip(rep.per_head, counters):
        assert h.pruned_blocks == c.skipped_kv_loads
    assert sum(rep.histogram) == pytest.approx(1.0)
    layers = rep.layer_histograms()
    assert sorted(layers) == [0, 1]


def test_bimodal_mixture():
    recs = generate_model(2, 4, 0.5, 16384, 4, Rng(2))
    hist = savings_for_traces(recs).histogram
    assert hist[0] == pytest.approx(0.5) and hist[19] == pytest.approx(0.5)


def test_sweep_monotone_and_degenerate():
    recs = [generate_head(HeadProfile("local"), 2048, 16, Rng(s)) for s in range(3)]
    tab = sweep_epsilon(recs, PruneConfig(), EPS)
    assert np.all(np.diff(tab.pruned_fraction) >= 0)
    assert np.all(np.diff(tab.delta) > 0)
    one = [(constant_decay_trace(1, 0.0), AttentionInputs([[0.0]], [[0.0]], [[1.0]]))]
    tab = sweep_epsilon(one, PruneConfig(bound_mode="explicit_max"), [1.0])
    assert tab.delta[0] == 0.0 and tab.pruned_fraction[0] == 0.0
    with pytest.raises(ValidationError):
        sweep_epsilon(one, PruneConfig(), [0.0])


def test_export_boundary_shapes():
    polyline, grid = export_boundary(constant_decay_trace(100, 0.0), PruneConfig(block_q=10, block_k=10), delta=-1.0)
    assert all(n == 0 for _, n in polyline)
    assert grid.shape == (10, 10) and math.isnan(grid[0, 1])
    polyline, _ = export_boundary(constant_decay_trace(100, -1.0), PruneConfig(block_q=1, block_k=1), delta=-5.0)
    assert [n for _, n in polyline] == [max(0, m - 5) for m in range(100)]
    t, inp = generate_head(HeadProfile("local"), 300, 4, Rng(3))
    cfg = PruneConfig(block_q=7, block_k=11)
    polyline, _ = export_boundary(t, cfg, bound=2.0)
    assert [n for _, n in polyline] == find_boundary_oracle(t, compute_threshold(2.0, 300, cfg.epsilon), 7, 11).n.tolist()
    with pytest.raises(ValidationError):
        export_boundary(t, cfg)


def _header(path):
    with open(path) as fh:
        return tuple(next(csv.reader(fh)))


def test_csv_headers(tmp_path):
    recs = generate_model(2, 2, 0.5, 256, 4, Rng(4))
    cfg = PruneConfig(block_q=16, block_k=16)
    rep = savings_for_traces(recs, cfg)
    polyline, grid = export_boundary(recs[0][0], cfg, delta=-5.0)
    files = {
        write_per_head_csv(tmp_path / "a.csv", rep): PER_HEAD_HEADER,
        write_histogram_csv(tmp_path / "b.csv", rep.histogram): HISTOGRAM_HEADER,
        write_layer_histogram_csv(tmp_path / "c.csv", rep): LAYER_HISTOGRAM_HEADER,
        write_sweep_csv(tmp_path / "d.csv", sweep_epsilon(recs, cfg, EPS)): SWEEP_HEADER,
        write_boundary_csv(tmp_path / "e.csv", polyline): BOUNDARY_HEADER,
        write_block_dmax_csv(tmp_path / "f.csv", grid): BLOCK_DMAX_HEADER,
    }
    for path, header in files.items():
        assert _header(path) == header
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "head_id,layer_id,pruned_fraction"
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "bin_low_percent,bin_high_percent,mass"
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "epsilon,delta,pruned_fraction"
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 21
