"""Forgetting attention with adaptive computation pruning, on the CPU."""

from .blocked import BlockCounters, ForwardResult, SavedStats, acp_backward, acp_forward, full_blocked_forward
from .core import (
    AttentionInputs,
    PruneConfig,
    Rng,
    TraceFormatError,
    TraceLengthError,
    ValidationError,
    read_trace,
    write_trace,
)
from .decay import LOG_FLOOR, GateParams, GateTrace, build_trace, decay_entry, gate_from_inputs
from .decode import DecodeState, decode_sequence, decode_step
from .pruning import (
    BoundarySpec,
    LogitBound,
    bound_explicit,
    bound_from_norms,
    bound_from_qk_norm,
    compute_threshold,
    find_boundary,
    find_boundary_oracle,
)
from .reference import (
    AttentionGrads,
    AttentionOutput,
    naive_backward,
    naive_forward,
    naive_pruned_forward,
    pruned_weight_mass,
)

__version__ = "0.1.0"
