"""``foxacp`` command line.

Exit codes: 0 success, 1 a requested check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import analysis
from .blocked import acp_backward, acp_forward, blocked_forward, full_blocked_forward
from .core import DEFAULT_EPSILON, PruneConfig, Rng, ValidationError, read_trace, write_trace
from .decode import decode_sequence
from .pruning import compute_threshold, find_boundary, inject_tie_fault, logit_bound
from .reference import naive_pruned_forward
from .verify import run_all
from .workload import DEFAULT_QK_SCALE, HeadProfile, generate_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

BOUND_FLAGS = {"explicit": "explicit_max", "norms": "query_key_norms", "qknorm": "qk_norm_params"}


class UsageError(Exception):
    pass


def _add_common(p, gen=True):
    p.add_argument("--block-q", type=int, default=64)
    p.add_argument("--block-k", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--bound", choices=sorted(BOUND_FLAGS), default="norms")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--qk-scale", type=float, default=DEFAULT_QK_SCALE,
                   help="RMSNorm scale used by the generator and by --bound qknorm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    if gen:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--trace", type=Path)
        src.add_argument("--gen-profile", choices=("local", "global", "mixed"))
        p.add_argument("--local-frac", type=float, default=0.7)
        p.add_argument("--seq-len", type=int, default=4096)
        p.add_argument("--head-dim", type=int, default=64)
        p.add_argument("--num-layers", type=int, default=4)
        p.add_argument("--heads-per-layer", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foxacp", description="Forgetting attention with adaptive computation pruning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run seeded oracle/invariant suites")
    _add_common(p, gen=False)
    p.add_argument("--quick", action="store_true", help="smaller instance counts")
    p.add_argument("--inject-fault", choices=("tie-break",), help=argparse.SUPPRESS)

    p = sub.add_parser("savings", help="per-head pruned-block fractions and histograms")
    _add_common(p)

    p = sub.add_parser("sweep-eps", help="aggregate pruned fraction across epsilon")
    _add_common(p)
    p.add_argument("--log-eps", type=float, nargs="+", default=[-30, -20, -10, -5, -1],
                   help="natural-log epsilon values")

    p = sub.add_parser("boundary", help="export pruning boundary and block max-decay grid")
    _add_common(p)
    p.add_argument("--head", type=int, default=0)

    p = sub.add_parser("decode", help="stream one head token by token with KV eviction")
    _add_common(p)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--max-len", type=int, help="declared maximum length for the threshold (default: L)")
    p.add_argument("--logit-bound", type=float, help="caller-supplied U (otherwise --bound qknorm is required)")
    p.add_argument("--check", action="store_true", help="compare against the prefill oracle")

    p = sub.add_parser("bench", help="wall-clock and block counts, full vs pruned")
    _add_common(p)
    p.add_argument("--backward", action="store_true", help="include the backward pass")
    p.add_argument("--max-heads", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gen", help="write a synthetic trace file")
    _add_common(p)
    return parser


def _config(args) -> PruneConfig:
    mode = BOUND_FLAGS[args.bound]
    gammas = {}
    if mode == "qk_norm_params":
        d = getattr(args, "head_dim", 64)
        g = tuple([float(args.qk_scale)] * d)
        gammas = {"gamma_q": g, "gamma_k": g}
    try:
        return PruneConfig(args.epsilon, args.block_q, args.block_k, mode, args.precision, **gammas)
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def _records(args, required=True):
    if args.trace is not None:
        try:
            raw = read_trace(args.trace)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read trace: {exc}") from exc
        if not raw:
            raise UsageError("trace file has no heads")
        args.head_dim = raw[0][1].head_dim
        return [(t, i, h % max(args.num_layers, 1)) for h, (t, i) in enumerate(raw)]
    if args.gen_profile is None:
        if required:
            raise UsageError("supply --trace PATH or --gen-profile {local,global,mixed}")
        args.gen_profile = "mixed"
    frac = {"local": 1.0, "global": 0.0}.get(args.gen_profile, args.local_frac)
    try:
        prof_l = HeadProfile("local", qk_scale=args.qk_scale)
        prof_g = HeadProfile("global", qk_scale=args.qk_scale)
        return generate_model(args.num_layers, args.heads_per_layer, frac, args.seq_len, args.head_dim,
                              Rng(args.seed), global_profile=prof_g, local_profile=prof_l)
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def cmd_verify(args) -> int:
    config = _config(args)
    ctx = inject_tie_fault() if args.inject_fault == "tie-break" else nullcontext()
    with ctx:
        results = run_all(config, seed=args.seed, quick=args.quick)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"[{'PASS' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    if failed:
        print("violated invariants: " + ", ".join(r.name for r in failed))
        return EXIT_FAIL
    return EXIT_OK


def cmd_savings(args) -> int:
    config = _config(args)
    records = _records(args)
    report = analysis.savings_for_traces(records, config)
    analysis.write_per_head_csv(args.out / "per_head.csv", report)
    analysis.write_histogram_csv(args.out / "histogram.csv", report.histogram)
    analysis.write_layer_histogram_csv(args.out / "layer_histogram.csv", report)
    print(f"heads: {len(report.per_head)}")
    print(f"aggregate pruned fraction: {report.aggregate_pruned_fraction:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config(args)
    records = _records(args)
    table = analysis.sweep_epsilon(records, config, [math.exp(x) for x in args.log_eps])
    analysis.write_sweep_csv(args.out / "sweep.csv", table)
    for eps, delta, frac in table.rows():
        print(f"epsilon={eps:.3e} delta={delta:.3f} pruned_fraction={frac:.4f}")
    return EXIT_OK


def _one_head(args):
    records = _records(args)
    if not (0 <= args.head < len(records)):
        raise UsageError(f"--head must be in [0, {len(records)})")
    return records[args.head]


def cmd_boundary(args) -> int:
    config = _config(args)
    trace, inputs, _ = _one_head(args)
    polyline, grid = analysis.export_boundary(trace, config, bound=logit_bound(inputs, config))
    analysis.write_boundary_csv(args.out / "boundary.csv", polyline)
    analysis.write_block_dmax_csv(args.out / "block_dmax.csv", grid)
    print(f"rows: {len(polyline)}; first unpruned cols: {[n for _, n in polyline][:16]}{' ...' if len(polyline) > 16 else ''}")
    return EXIT_OK


def cmd_decode(args) -> int:
    trace, inputs, _ = _one_head(args)
    L, d = inputs.q.shape
    max_len = args.max_len or L
    if max_len < L:
        raise UsageError(f"--max-len {max_len} is shorter than the stream ({L})")
    if args.logit_bound is not None:
        U = args.logit_bound
    elif args.bound == "qknorm":
        U = args.qk_scale ** 2 * math.sqrt(d)
    else:
        raise UsageError("decode needs --logit-bound U or --bound qknorm (the bound must be fixed before streaming)")
    delta = compute_threshold(U, max_len, args.epsilon)
    res = decode_sequence(inputs, trace, delta)
    path = args.out / "decode.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "cache_len", "evicted", "boundary"))
        w.writerows(res.history)
    print(f"delta={delta:.3f} max_cache_len={res.max_cache_len} total_evicted={res.total_evicted}")
    if args.check:
        ref = naive_pruned_forward(inputs, trace, delta).o
        err = float(np.abs(res.outputs - ref).max())
        ok = err <= 1e-10
        print(f"[{'PASS' if ok else 'FAIL'}] decode vs prefill: max err {err:.3e}")
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def cmd_bench(args) -> int:
    config = _config(args)
    records = _records(args)
    # Counters cover every head; timing only the first --max-heads.
    report = analysis.savings_for_traces(records, config)
    visited = sum(h.total_blocks - h.pruned_blocks for h in report.per_head)
    total = sum(h.total_blocks for h in report.per_head)
    rows = []
    t_full = t_acp = t_search = 0.0
    for h, (trace, inputs, _) in enumerate(records[: args.max_heads]):
        up = np.ones_like(inputs.v)

        def full():
            r = full_blocked_forward(inputs, trace, config, workers=args.workers)
            if args.backward:
                acp_backward(inputs, trace, config, r.boundary, r.stats, up, workers=args.workers)

        def search():
            delta = compute_threshold(logit_bound(inputs, config), trace.seq_len, config.epsilon)
            return find_boundary(trace, delta, config.block_q, config.block_k)

        _, tf = _timed(full)
        boundary, ts = _timed(search)

        def pruned():
            out, stats = blocked_forward(inputs, trace, boundary, config.dtype, args.workers)
            if args.backward:
                acp_backward(inputs, trace, config, boundary, stats, up, workers=args.workers)

        _, tk = _timed(pruned)
        ta = ts + tk
        t_full += tf
        t_acp += ta
        t_search += ts
        rows.append((h, boundary.visited_blocks, boundary.total_lower_blocks, f"{tf:.6f}", f"{ta:.6f}", f"{ts:.6f}"))
    path = args.out / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("head_id", "visited_blocks", "total_blocks", "full_seconds", "acp_seconds", "search_seconds"))
        w.writerows(rows)
    print(f"visited blocks: {visited}/{total} = {visited / total:.4f}")
    if t_full > 0:
        print(f"wall-clock acp/full (timed heads): {t_acp / t_full:.3f} ({t_acp:.3f}s vs {t_full:.3f}s)")
    if t_acp > 0:
        print(f"boundary search share of acp time: {100 * t_search / t_acp:.2f}% (GPU reference: 2-6%)")
    return EXIT_OK


def cmd_gen(args) -> int:
    records = _records(args, required=False)
    out = args.out
    if out.is_dir() or str(out) in (".", ""):
        out = out / "trace.foxtrc"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(out, [(t, i) for t, i, _ in records])
    print(f"wrote {len(records)} heads to {out}")
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "savings": cmd_savings,
    "sweep-eps": cmd_sweep,
    "boundary": cmd_boundary,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "gen": cmd_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"foxacp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
