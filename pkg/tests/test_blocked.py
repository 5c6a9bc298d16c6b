import math
from dataclasses import replace

import numpy as np
import pytest

from foxacp.blocked import AccessLog, acp_backward, acp_forward, full_blocked_forward
from foxacp.core import AttentionInputs, PruneConfig, Rng, ValidationError
from foxacp.decay import build_trace
from foxacp.pruning import compute_threshold, find_boundary_oracle
from foxacp.reference import (
    block_keep_mask,
    naive_backward,
    naive_block_pruned_forward,
    naive_forward,
)
from foxacp.verify import _fd_grads, output_error_bound, rel_err
from foxacp.workload import constant_decay_trace


def _cfg(bq, bk, **kw):
    return PruneConfig(block_q=bq, block_k=bk, **kw)


@pytest.mark.parametrize("bq,bk", [(1, 1), (4, 4), (5, 3), (16, 16), (7, 64)])
def test_forward_matches_block_indicator_oracle(make_head, bq, bk):
    for child in Rng(bq * 100 + bk).fork(6):
        L = int(child.integers(1, 100))
        t, inp = make_head(child, L, 3, decay=float(child.uniform(0.05, 2)))
        delta = -float(child.uniform(0.5, 20))
        got = acp_forward(inp, t, _cfg(bq, bk), delta=delta).output.o
        want = naive_block_pruned_forward(inp, t, delta, bq, bk).o
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_no_decay_means_no_pruning(make_head):
    t, inp = make_head(Rng(1), 90, 4, decay=0.0)
    for eps in (1e-30, math.exp(-10), 0.5, 1.0):
        res = acp_forward(inp, t, _cfg(16, 16, epsilon=eps))
        assert res.counters.pruned_fraction == 0.0
        np.testing.assert_allclose(res.output.o, naive_forward(inp, t).o, rtol=0, atol=1e-10)


def test_constant_decay_example():
    rng = Rng(2)
    inp = AttentionInputs(*(rng.normal(size=(256, 4)) for _ in range(3)))
    t = constant_decay_trace(256, -1.0)
    delta = compute_threshold(1.0, 256, math.exp(-10))
    res = acp_forward(inp, t, _cfg(16, 16), delta=delta)
    np.testing.assert_allclose(res.output.o, naive_block_pruned_forward(inp, t, delta, 16, 16).o, atol=1e-10, rtol=0)
    oracle = find_boundary_oracle(t, delta, 16, 16)
    assert res.counters.visited_blocks == oracle.visited_blocks
    assert res.counters.pruned_fraction == pytest.approx(oracle.pruned_fraction, rel=1e-12)
    assert res.counters.pruned_fraction > 0.5


def test_default_epsilon_output_bound(make_head):
    for child in Rng(3).fork(10):
        t, inp = make_head(child, 200, 8, decay=0.5)
        res = acp_forward(inp, t, _cfg(16, 16))
        err = np.abs(res.output.o - naive_forward(inp, t).o).max()
        assert err <= 2 * math.exp(-10) * np.abs(inp.v).max() + 1e-9
        assert err <= output_error_bound(math.exp(-10), np.abs(inp.v).max())


def test_full_blocked_forward(make_head):
    t, inp = make_head(Rng(4), 77, 5, decay=1.0)
    res = full_blocked_forward(inp, t, _cfg(8, 16))
    np.testing.assert_allclose(res.output.o, naive_forward(inp, t).o, atol=1e-10, rtol=0)
    assert res.counters.pruned_fraction == 0.0
    assert res.counters.visited_blocks == res.counters.total_lower_blocks
    one = AttentionInputs([[1.0]], [[2.0]], [[3.0]])
    assert full_blocked_forward(one, build_trace([0.3])).output.o.tolist() == [[3.0]]


def test_no_touch_forward_and_backward():
    rng = Rng(5)
    L = 200
    inp = AttentionInputs(*(rng.normal(size=(L, 4)) for _ in range(3)))
    t = constant_decay_trace(L, -0.7)
    cfg = _cfg(8, 12)
    log = AccessLog()
    res = acp_forward(inp, t, cfg, delta=-15.0, access_log=log)
    acp_backward(inp, t, cfg, res.boundary, res.stats, rng.normal(size=(L, 4)), access_log=log)
    allowed = {(m, n) for m, lo, hi in res.boundary.row_ranges() for n in range(lo, hi + 1)}
    assert res.boundary.pruned_blocks > 0
    for tag in ("fwd", "bwd_q", "bwd_kv"):
        touched = log.pairs(tag)
        assert touched == allowed, tag
    for m, lo, _ in res.boundary.row_ranges():
        assert not any(n < lo for mm, n in log.pairs() if mm == m)


def test_backward_matches_oracle(make_head):
    for child in Rng(6).fork(8):
        L = int(child.integers(1, 129))
        bq, bk = int(child.integers(1, 20)), int(child.integers(1, 20))
        t, inp = make_head(child, L, 4, decay=float(child.uniform(0.05, 1.5)))
        delta = -float(child.uniform(1, 20))
        cfg = _cfg(bq, bk)
        res = acp_forward(inp, t, cfg, delta=delta)
        up = child.normal(size=(L, 4))
        g = acp_backward(inp, t, cfg, res.boundary, res.stats, up)
        ref = naive_backward(inp, t, up, block_keep_mask(t, delta, bq, bk))
        for a, b in zip((g.dq, g.dk, g.dv, g.dlog_gates), (ref.dq, ref.dk, ref.dv, ref.dlog_gates)):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)


def test_backward_no_decay_and_zero_upstream(make_head):
    t, inp = make_head(Rng(7), 50, 3, decay=0.0)
    cfg = _cfg(8, 8)
    res = acp_forward(inp, t, cfg)
    up = Rng(8).normal(size=(50, 3))
    g = acp_backward(inp, t, cfg, res.boundary, res.stats, up)
    ref = naive_backward(inp, t, up)
    for a, b in zip((g.dq, g.dk, g.dv, g.dlog_gates), (ref.dq, ref.dk, ref.dv, ref.dlog_gates)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)
    g0 = acp_backward(inp, t, cfg, res.boundary, res.stats, np.zeros((50, 3)))
    for a in (g0.dq, g0.dk, g0.dv, g0.dlog_gates):
        assert not np.any(a)


@pytest.mark.slow
def test_backward_matches_finite_differences_strong_decay():
    rng = Rng(9)
    L, d = 128, 2
    inp = AttentionInputs(*(rng.normal(size=(L, d)) for _ in range(3)))
    t = constant_decay_trace(L, -1.0)
    cfg = _cfg(16, 16)
    delta = -12.5  # away from any integer decay value, so FD steps never cross a tie
    res = acp_forward(inp, t, cfg, delta=delta)
    assert res.boundary.pruned_blocks > 0
    up = rng.normal(size=(L, d))
    g = acp_backward(inp, t, cfg, res.boundary, res.stats, up)
    fd = _fd_grads(inp, t, block_keep_mask(t, delta, 16, 16), up)
    for a, b in zip((g.dq, g.dk, g.dv, g.dlog_gates), fd):
        assert rel_err(a, b) <= 1e-5


def test_counters_and_flops():
    t = constant_decay_trace(100, -1.0)
    inp = AttentionInputs(*(Rng(10).normal(size=(100, 3)) for _ in range(3)))
    res = acp_forward(inp, t, _cfg(10, 10), delta=-20.0)
    c = res.counters
    assert c.skipped_kv_loads == c.total_lower_blocks - c.visited_blocks
    # brute-force flop count over the visited entries' enclosing blocks
    keep = block_keep_mask(t, -20.0, 10, 10)
    rows_cols = sum(10 * 10 for m in range(10) for n in range(m + 1) if keep[m * 10 : (m + 1) * 10, n * 10 : (n + 1) * 10].any())
    assert c.flops_visited == 4 * rows_cols * 3
    assert c.flops_total == 4 * 10 * 10 * 55 * 3


def test_worker_count_is_bitwise_irrelevant(make_head):
    t, inp = make_head(Rng(11), 300, 8, decay=0.3)
    cfg = _cfg(16, 32)
    up = Rng(12).normal(size=(300, 8))
    outs = []
    for w in (1, 2, 4):
        res = acp_forward(inp, t, cfg, workers=w)
        g = acp_backward(inp, t, cfg, res.boundary, res.stats, up, workers=w)
        outs.append(b"".join(a.tobytes() for a in (res.output.o, g.dq, g.dk, g.dv, g.dlog_gates)))
    assert outs[0] == outs[1] == outs[2]


def test_f32_precision(make_head):
    t, inp = make_head(Rng(13), 120, 8, decay=0.3)
    res = acp_forward(inp, t, _cfg(16, 16, precision="f32"), delta=-10.0)
    assert res.output.o.dtype == np.float32
    want = naive_block_pruned_forward(inp, t, -10.0, 16, 16).o
    np.testing.assert_allclose(res.output.o, want, atol=1e-5, rtol=0)


def test_stale_stats_and_mismatches(make_head):
    t, inp = make_head(Rng(14), 40, 3)
    t2, inp2 = make_head(Rng(15), 41, 3)
    cfg = _cfg(8, 8)
    res = acp_forward(inp, t, cfg)
    with pytest.raises(ValidationError):
        acp_backward(inp2, t2, cfg, res.boundary, res.stats, np.zeros((41, 3)))
    with pytest.raises(ValidationError):
        acp_backward(inp, t, _cfg(4, 8), res.boundary, res.stats, np.zeros((40, 3)))
    with pytest.raises(ValidationError):
        acp_forward(inp, t2, cfg)
