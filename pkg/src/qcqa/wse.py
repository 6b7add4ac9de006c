"""Mean-pooling of heads and the weight-sharing error (WSE).

For a grouping ``G_1..G_P`` of a layer's heads the WSE is::

    sum_j sum_{i in G_j} mean((W_K[i] - mean_{G_j} W_K)^2) + mean((W_V[i] - mean_{G_j} W_V)^2)

where ``mean`` inside the sum is over matrix entries. It is the K-means
within-cluster sum of squares with each head's matrix as one point, scaled
by the number of matrix entries. The same formula applied to per-token key
and value *features* instead of weights gives :func:`feature_wse`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import LayerGrouping, LayerWeights, ModelPlan, WeightArchive
from .errors import PartitionError, PlanError, ShapeError

__all__ = ["mean_pool", "group_sse", "layer_wse", "model_wse", "feature_wse", "layer_wse_terms", "merge_sweep"]


def mean_pool(heads, group) -> np.ndarray:
    """Element-wise mean of ``heads[i]`` over ``i in group``."""
    members = sorted(set(int(i) for i in group))
    if not members:
        raise PartitionError("cannot mean-pool an empty group")
    mats = [np.asarray(heads[i], dtype=np.float64) for i in members]
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ShapeError(f"cannot pool heads of differing shapes {sorted(shapes)}")
    return np.mean(np.stack(mats), axis=0)


def group_sse(stack: np.ndarray, grouping: LayerGrouping) -> float:
    """Sum over heads of the per-entry mean squared deviation from the group mean.

    ``stack`` is ``[H, ...]``; any trailing shape is averaged over.
    """
    if stack.shape[0] != grouping.num_heads:
        raise PartitionError(
            f"grouping is for H={grouping.num_heads} but tensor stack has {stack.shape[0]} heads"
        )
    total = 0.0
    for g in grouping.groups:
        if len(g) == 1:
            continue
        block = stack[list(g)]
        if (block == block[0]).all():
            continue  # exact zero; the mean of copies can round
        dev = block - block.mean(axis=0)
        total += float(np.mean(dev * dev, axis=tuple(range(1, dev.ndim))).sum())
    return total


def layer_wse_terms(layer: LayerWeights, grouping: LayerGrouping) -> tuple[float, float]:
    """Return the (key, value) halves of :func:`layer_wse` separately."""
    return group_sse(layer.keys, grouping), group_sse(layer.values, grouping)


def layer_wse(
    layer: LayerWeights,
    grouping: LayerGrouping,
    weights: tuple[float, float] = (1.0, 1.0),
) -> float:
    """Weight-sharing error of one layer under ``grouping``.

    ``weights`` scales the key and value terms; ``(1, 1)`` is the plain sum.
    Singleton groups contribute exactly zero.
    """
    if not isinstance(grouping, LayerGrouping):
        raise PartitionError(f"expected LayerGrouping, got {type(grouping).__name__}")
    k, v = layer_wse_terms(layer, grouping)
    wk, wv = weights
    return wk * k + wv * v


def model_wse(
    archive: WeightArchive,
    plan: ModelPlan,
    weights: tuple[float, float] = (1.0, 1.0),
) -> float:
    """Sum of :func:`layer_wse` over the grouped layers of ``plan``."""
    if len(plan.per_layer) != archive.layer_count:
        raise PlanError(
            f"plan covers {len(plan.per_layer)} layers, archive has {archive.layer_count}"
        )
    return sum(
        layer_wse(layer, g, weights)
        for layer, g in zip(archive.layers, plan.per_layer)
        if g is not None
    )


def _stack_features(features: Sequence, what: str) -> np.ndarray:
    arrs = [np.asarray(f, dtype=np.float64) for f in features]
    if not arrs:
        raise ShapeError(f"{what}: no heads given")
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ShapeError(f"{what}: heads have differing shapes {sorted(shapes)}")
    return np.stack(arrs)


def feature_wse(
    key_features: Sequence,
    value_features: Sequence,
    grouping: LayerGrouping,
    weights: tuple[float, float] = (1.0, 1.0),
) -> float:
    """WSE computed on per-head feature tensors (e.g. ``[T, d]``) instead of weights.

    The expectation is taken over every entry of whatever tensor the caller
    passes, so tokens, batch and feature dimensions are all averaged.
    """
    k = _stack_features(key_features, "key features")
    v = _stack_features(value_features, "value features")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} key heads but {v.shape[0]} value heads")
    wk, wv = weights
    return wk * group_sse(k, grouping) + wv * group_sse(v, grouping)


def merge_sweep(layer, weights=(1.0, 1.0)) -> list[tuple[int, float, LayerGrouping]]:
    """Agglomerative sweep from ``H`` singletons down to one group.

    At each step the pair of groups whose merge adds the least WSE is merged.
    Each level refines the next, so WSE never increases with group count.
    """
    H = layer.num_heads
    groups = [[h] for h in range(H)]
    current = LayerGrouping.singletons(H)
    levels = [(H, layer_wse(layer, current, weights), current)]
    while len(groups) > 1:
        best = None
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                merged = groups[:a] + groups[a + 1:b] + groups[b + 1:] + [groups[a] + groups[b]]
                g = LayerGrouping.from_groups(merged, H)
                w = layer_wse(layer, g, weights)
                if best is None or w < best[0]:
                    best = (w, merged, g)
        w, groups, current = best
        levels.append((len(groups), w, current))
    return sorted(levels, key=lambda t: t[0])
