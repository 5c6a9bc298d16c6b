"""Seeded self-check suites run by ``foxacp verify``."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .blocked import acp_backward, acp_forward
from .core import AttentionInputs, PruneConfig, Rng
from .decay import GateTrace
from .decode import decode_sequence
from .pruning import (
    bound_explicit,
    bound_from_norms,
    bound_from_qk_norm,
    compute_threshold,
    find_boundary,
    find_boundary_oracle,
)
from .reference import (
    block_keep_mask,
    masked_forward,
    naive_backward,
    naive_block_pruned_forward,
    naive_forward,
    naive_pruned_forward,
    pruned_weight_mass,
)
from .workload import HeadProfile, constant_decay_trace, generate_head


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def output_error_bound(epsilon: float, v_max: float, slack: float = 1e-9) -> float:
    """Max-norm output change allowed after removing < epsilon mass and renormalizing."""
    if epsilon >= 1.0:
        return math.inf
    return (epsilon / (1.0 - epsilon) + epsilon) * v_max + slack


def _instances(rng: Rng, count, lengths, dims):
    """Cycle through every (length, dim, regime) combination, alternating norm styles."""
    kinds = ("local", "global", "mixed")
    nl, nd = len(lengths), len(dims)
    for i, child in enumerate(rng.fork(count)):
        L = lengths[i % nl]
        d = dims[(i // nl) % nd]
        kind = kinds[(i // (nl * nd)) % 3]
        rms = bool((i // (nl * nd * 3)) % 2)
        prof = HeadProfile(kind, qk_scale=float(child.uniform(0.3, 1.5)), rms_normalized=rms)
        trace, inputs = generate_head(prof, L, d, child)
        yield prof, trace, inputs


def check_safety(config: PruneConfig, rng: Rng, count=200, lengths=(16, 64, 256), dims=(4, 16)):
    eps = config.epsilon
    worst_mass = 0.0
    worst_out = 0.0
    violations = []
    for idx, (prof, trace, inputs) in enumerate(_instances(rng, count, lengths, dims)):
        L, d = inputs.q.shape
        bounds = [bound_explicit(inputs), bound_from_norms(inputs)]
        if prof.rms_normalized:
            bounds.append(bound_from_qk_norm(*prof.gammas(d), d))
        ref = naive_forward(inputs, trace).o
        for bound in bounds:
            delta = compute_threshold(bound, L, eps)
            mass = pruned_weight_mass(inputs, trace, delta).max()
            worst_mass = max(worst_mass, mass)
            if not mass < eps:
                violations.append(f"instance {idx} {bound.mode}: mass {mass:.3e}")
            res = acp_forward(inputs, trace, config, delta=delta)
            err = np.abs(res.output.o - ref).max()
            worst_out = max(worst_out, err)
            if err > output_error_bound(eps, np.abs(inputs.v).max()):
                violations.append(f"instance {idx} {bound.mode}: output err {err:.3e}")
    detail = f"max pruned weight {worst_mass:.3e} vs epsilon {eps:.3e}; max output err {worst_out:.3e}"
    if violations:
        detail += "; " + "; ".join(violations[:3])
    return CheckResult("safety: pruned-weight bound", not violations, detail)


def check_tie_break(config: PruneConfig):
    """Blocks whose largest decay equals delta must be kept."""
    trace = constant_decay_trace(48, -1.0)
    rng = Rng(7)
    inputs = AttentionInputs(*(rng.normal(size=(48, 4)) for _ in range(3)))
    cfg = replace(config, block_q=1, block_k=1)
    res = acp_forward(inputs, trace, cfg, delta=-10.0)
    ref = naive_pruned_forward(inputs, trace, -10.0).o
    err = np.abs(res.output.o - ref).max()
    ok = err <= 1e-10
    return CheckResult("safety: tie-break keeps D_max == delta", bool(ok), f"max err vs entry-level oracle {err:.3e}")


def check_oracle_equivalence(config: PruneConfig, rng: Rng, count=30):
    worst = 0.0
    for child in rng.fork(count):
        L = int(child.integers(1, 129))
        d = int(child.integers(1, 9))
        bq, bk = int(child.integers(1, 33)), int(child.integers(1, 33))
        trace, inputs = generate_head(HeadProfile("custom", gate_logit_mean=float(child.uniform(-1, 6)), gate_logit_std=1.0, rms_normalized=False), L, d, child)
        delta = -float(child.uniform(0.5, 30))
        cfg = replace(config, block_q=bq, block_k=bk)
        got = acp_forward(inputs, trace, cfg, delta=delta).output.o
        want = naive_block_pruned_forward(inputs, trace, delta, bq, bk).o
        worst = max(worst, np.abs(got - want).max())
    return CheckResult("oracle equivalence (blocked vs naive)", bool(worst <= 1e-10), f"max err {worst:.3e}")


def _fd_grads(inputs, trace, keep, upstream, h=1e-5):
    def loss(q, k, v, lg):
        out = masked_forward(AttentionInputs(q, k, v), GateTrace.from_log_gates(lg), keep).o
        return float((out * upstream).sum())

    args = [inputs.q.copy(), inputs.k.copy(), inputs.v.copy(), trace.log_gates.copy()]
    grads = []
    for a in range(4):
        g = np.zeros_like(args[a])
        flat = args[a].reshape(-1)
        gf = g.reshape(-1)
        for t in range(flat.size):
            orig = flat[t]
            flat[t] = orig + h
            up = loss(*args)
            flat[t] = orig - h
            dn = loss(*args)
            flat[t] = orig
            gf[t] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def rel_err(got, want) -> float:
    return float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-12))


def check_gradients(config: PruneConfig, rng: Rng, count=6):
    worst_an = worst_fd = 0.0
    for child in rng.fork(count):
        L = int(child.integers(8, 33))
        trace = constant_decay_trace(L, -1.0)
        inputs = AttentionInputs(*(child.normal(size=(L, 3)) for _ in range(3)))
        # Keep log-gates away from the floor and boundary decisions away from ties.
        delta = -6.5
        cfg = replace(config, block_q=4, block_k=4)
        res = acp_forward(inputs, trace, cfg, delta=delta)
        up = child.normal(size=(L, 3))
        g = acp_backward(inputs, trace, cfg, res.boundary, res.stats, up)
        keep = block_keep_mask(trace, delta, 4, 4)
        ref = naive_backward(inputs, trace, up, keep)
        for a, b in zip((g.dq, g.dk, g.dv, g.dlog_gates), (ref.dq, ref.dk, ref.dv, ref.dlog_gates)):
            worst_an = max(worst_an, np.abs(a - b).max())
        fd = _fd_grads(inputs, trace, keep, up)
        for a, b in zip((g.dq, g.dk, g.dv, g.dlog_gates), fd):
            worst_fd = max(worst_fd, rel_err(a, b))
    ok = bool(worst_an <= 1e-8 and worst_fd <= 1e-5)
    return CheckResult("gradients (analytic + finite differences)", ok, f"max abs err vs oracle {worst_an:.3e}; max rel err vs FD {worst_fd:.3e}")


def check_boundary(rng: Rng, count=100):
    bad = []
    for idx, child in enumerate(rng.fork(count)):
        L = int(child.integers(1, 300))
        bq, bk = int(child.integers(1, 40)), int(child.integers(1, 40))
        log_f = -np.abs(child.normal(0, float(child.uniform(0.01, 2)), L))
        trace = GateTrace.from_log_gates(log_f)
        delta = -float(child.uniform(0, 40))
        b = find_boundary(trace, delta, bq, bk)
        o = find_boundary_oracle(trace, delta, bq, bk)
        M, N = b.num_query_blocks, b.num_key_blocks
        if not np.array_equal(b.n, o.n):
            bad.append(f"case {idx}: boundary differs from oracle")
        if b.iterations > M + N:
            bad.append(f"case {idx}: {b.iterations} iterations > M+N={M + N}")
        if np.any(np.diff(b.n) < 0) or np.any(b.n > b.diag) or b.clamp_hits:
            bad.append(f"case {idx}: monotonicity/diagonal violated")
    return CheckResult("boundary search vs exhaustive oracle", not bad, "; ".join(bad[:3]) or f"{count} cases agree")


def check_decode(config: PruneConfig, rng: Rng, count=8):
    worst = 0.0
    worst_mass = 0.0
    for prof, trace, inputs in _instances(rng, count, (32, 96), (4,)):
        L, d = inputs.q.shape
        if prof.rms_normalized:
            U = bound_from_qk_norm(*prof.gammas(d), d).U
        else:
            U = bound_from_norms(inputs).U
        delta = compute_threshold(U, L, config.epsilon)
        if not delta < 0:
            continue
        res = decode_sequence(inputs, trace, delta)
        ref = naive_pruned_forward(inputs, trace, delta).o
        worst = max(worst, np.abs(res.outputs - ref).max())
        worst_mass = max(worst_mass, pruned_weight_mass(inputs, trace, delta).max())
    ok = bool(worst <= 1e-10 and worst_mass < config.epsilon)
    return CheckResult("decode vs prefill consistency", ok, f"max err {worst:.3e}; max evicted mass {worst_mass:.3e}")


def check_degenerate(config: PruneConfig):
    """L = 1 with zero logits: delta = log(epsilon), 0 when epsilon = 1."""
    inputs = AttentionInputs(np.zeros((1, 4)), np.zeros((1, 4)), np.arange(4.0).reshape(1, 4))
    trace = constant_decay_trace(1, 0.0)
    res = acp_forward(inputs, trace, replace(config, bound_mode="explicit_max"))
    ok = bool(np.array_equal(res.output.o, inputs.v) and res.counters.pruned_fraction == 0.0)
    return CheckResult("degenerate threshold (L=1, U=0)", ok, f"delta={res.boundary.delta:.3g}")


def run_all(config: PruneConfig = PruneConfig(), seed: int = 0, quick: bool = False):
    base = Rng(seed)
    r = base.fork(5)
    scale = 3 if quick else 1
    return [
        check_safety(config, r[0], count=200 // scale),
        check_tie_break(config),
        check_oracle_equivalence(config, r[1], count=30 // scale),
        check_gradients(config, r[2], count=max(1, 6 // scale)),
        check_boundary(r[3], count=100 // scale),
        check_decode(config, r[4], count=8 // scale),
        check_degenerate(config),
    ]
