"""Deterministic synthetic heads with controllable decay regimes.

Gate logits are drawn i.i.d. around a mean; nothing here models learned,
input-dependent gates. The generator only has to land heads in the local
(fast-forgetting) or global (barely-forgetting) regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AttentionInputs, Rng, ValidationError
from .decay import GateTrace, log_sigmoid

HEAD_KINDS = ("local", "global", "mixed", "custom")

# sigmoid(log 9) = 0.9, sigmoid(log 99) = 0.99, sigmoid(log 9999) = 0.9999
_DEFAULT_LOGIT = {"local": math.log(9.0), "mixed": math.log(99.0), "global": math.log(9999.0)}
# A wide logit spread gives local heads occasional near-zero gates, which is
# what pulls their mean log-gate down to about -0.43.
_DEFAULT_STD = {"local": 2.5, "mixed": 1.0, "global": 0.5}
# RMS-normalized rows scaled by 1.1 give U = 1.21 * sqrt(d), about 9.7 at d = 64.
DEFAULT_QK_SCALE = 1.1


@dataclass(frozen=True)
class HeadProfile:
    kind: str = "local"
    gate_logit_mean: float | None = None
    gate_logit_std: float | None = None
    qk_scale: float = DEFAULT_QK_SCALE
    rms_normalized: bool = True

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValidationError(f"unknown head kind {self.kind!r}")
        if self.kind == "custom" and self.gate_logit_mean is None:
            raise ValidationError("custom profiles need gate_logit_mean")
        for name in ("gate_logit_mean", "gate_logit_std", "qk_scale"):
            val = getattr(self, name)
            if val is not None and not math.isfinite(val):
                raise ValidationError(f"{name} must be finite")
        if self.std < 0 or self.qk_scale < 0:
            raise ValidationError("gate_logit_std and qk_scale must be >= 0")

    @property
    def mean(self) -> float:
        if self.gate_logit_mean is not None:
            return self.gate_logit_mean
        return _DEFAULT_LOGIT.get(self.kind, 0.0)

    @property
    def std(self) -> float:
        if self.gate_logit_std is not None:
            return self.gate_logit_std
        return _DEFAULT_STD.get(self.kind, 0.0)

    def gammas(self, d: int):
        """Per-dimension RMSNorm scales implied by this profile (constant ``qk_scale``)."""
        g = tuple([float(self.qk_scale)] * d)
        return g, g


def rms_normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
    return x / np.where(rms > 0, rms, 1.0)


def generate_head(profile: HeadProfile, L: int, d: int, rng: Rng):
    """Return ``(GateTrace, AttentionInputs)`` for one synthetic head."""
    if L < 1 or d < 1:
        raise ValidationError(f"need L >= 1 and d >= 1, got {L}, {d}")
    logits = rng.normal(profile.mean, profile.std, L) if profile.std > 0 else np.full(L, profile.mean)
    trace = GateTrace.from_log_gates(log_sigmoid(logits))
    q, k, v = (rng.normal(0.0, 1.0, (L, d)) for _ in range(3))
    if profile.rms_normalized:
        q, k = rms_normalize(q), rms_normalize(k)
    return trace, AttentionInputs(q * profile.qk_scale, k * profile.qk_scale, v)


def generate_model(num_layers: int, heads_per_layer: int, local_fraction: float, L: int, d: int, rng: Rng, global_profile=None, local_profile=None):
    """A population of local and global heads as ``(trace, inputs, layer_id)``.

    ``round(local_fraction * H)`` heads are local; which ones is a seeded
    permutation. Head ``h`` sits in layer ``h % num_layers``.
    """
    H = num_layers * heads_per_layer
    if H < 1:
        raise ValidationError("model needs at least one head")
    if not (0.0 <= local_fraction <= 1.0):
        raise ValidationError(f"local_fraction must be in [0, 1], got {local_fraction}")
    local_profile = local_profile or HeadProfile("local")
    global_profile = global_profile or HeadProfile("global")
    n_local = int(round(local_fraction * H))
    is_local = np.zeros(H, dtype=bool)
    is_local[rng.permutation(H)[:n_local]] = True
    children = rng.fork(H)
    records = []
    for h in range(H):
        prof = local_profile if is_local[h] else global_profile
        trace, inputs = generate_head(prof, L, d, children[h])
        records.append((trace, inputs, h % num_layers))
    return records


def constant_decay_trace(L: int, log_f: float) -> GateTrace:
    return GateTrace.from_log_gates(np.full(L, float(log_f)))
