"""KV-cache size relative to the multi-head baseline.

Batch size, sequence length and head dimension cancel out of the ratio, so
the cache is counted in key/value heads: a layer with ``P`` groups keeps
``P`` of its ``H`` heads.
"""

from __future__ import annotations

from .core import LayerGrouping, ModelPlan
from .errors import PartitionError, PlanError

__all__ = ["layer_kv_fraction", "model_kv_fraction", "model_kv_heads"]


def layer_kv_fraction(grouping: LayerGrouping, num_heads: int) -> float:
    if not isinstance(grouping, LayerGrouping) or grouping.num_heads != num_heads:
        raise PartitionError(f"grouping is not a partition of {num_heads} heads")
    return grouping.num_groups / num_heads


def model_kv_heads(plan: ModelPlan, num_heads: int) -> int:
    """Total retained key/value heads across the model (MHA layers keep all ``H``)."""
    total = 0
    for i, g in enumerate(plan.per_layer):
        if g is None:
            total += num_heads
        elif g.num_heads != num_heads:
            raise PlanError(f"layer {i}: grouping is for H={g.num_heads}, expected {num_heads}")
        else:
            total += g.num_groups
    return total


def model_kv_fraction(plan: ModelPlan, num_heads: int, layer_count: int | None = None) -> float:
    """Retained heads divided by ``H * layer_count``."""
    n = len(plan.per_layer)
    if n == 0:
        raise PlanError("empty plan")
    if layer_count is not None and layer_count != n:
        raise PlanError(f"plan covers {n} layers, expected {layer_count}")
    return model_kv_heads(plan, num_heads) / (num_heads * n)
