"""Single-layer attention simulator used to check WSE against output drift.

Grouped attention replaces head ``i``'s keys and values with the mean of its
group's key and value features. Because every head projects the same token
embeddings, pooling features equals projecting with pooled weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LayerGrouping, LayerWeights
from .errors import NumericError, PartitionError, ShapeError

__all__ = [
    "AttentionInputs",
    "softmax_rows",
    "mha_attention",
    "grouped_attention",
    "divergence",
    "synth_layer",
    "SynthLayer",
]


@dataclass(frozen=True)
class AttentionInputs:
    """Query, key and value features of one head, each ``[T, d]``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.q)[0], np.shape(self.k)[0], np.shape(self.v)[0]}
        if len(shapes) != 1:
            raise ShapeError(f"q/k/v disagree on sequence length: {shapes}")
        if np.ndim(self.q) != 2 or np.ndim(self.k) != 2 or np.ndim(self.v) != 2:
            raise ShapeError("q, k and v must be 2-D [T, d]")
        if np.shape(self.q)[1] != np.shape(self.k)[1]:
            raise ShapeError("q and k must share the head dimension")

    @property
    def seq_len(self) -> int:
        return int(np.shape(self.q)[0])


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("attention input contains non-finite values")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _attend(q, k, v, causal: bool) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_finite(q, k, v)
    logits = q @ k.T / np.sqrt(q.shape[1])
    if causal:
        T = logits.shape[0]
        logits = np.where(np.tril(np.ones((T, T), dtype=bool)), logits, -np.inf)
    return softmax_rows(logits) @ v


def mha_attention(inputs, head: int | None = None, *, causal: bool = False) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` for one head.

    ``inputs`` is either a single :class:`AttentionInputs` or a list indexed by ``head``.
    """
    x = inputs if head is None else inputs[head]
    return _attend(x.q, x.k, x.v, causal)


def grouped_attention(
    inputs, grouping: LayerGrouping, head: int, *, causal: bool = False
) -> np.ndarray:
    """Head ``head``'s query against the mean K/V features of its group."""
    if grouping.num_heads != len(inputs):
        raise PartitionError(f"grouping is for H={grouping.num_heads}, got {len(inputs)} heads")
    group = grouping.group_of(head)
    k = np.mean([np.asarray(inputs[i].k, dtype=np.float64) for i in group], axis=0)
    v = np.mean([np.asarray(inputs[i].v, dtype=np.float64) for i in group], axis=0)
    return _attend(inputs[head].q, k, v, causal)


def divergence(inputs, grouping: LayerGrouping, *, causal: bool = False) -> float:
    """Mean over heads of the mean squared difference between MHA and grouped outputs."""
    errs = []
    for i in range(len(inputs)):
        a = mha_attention(inputs, i, causal=causal)
        b = grouped_attention(inputs, grouping, i, causal=causal)
        errs.append(np.mean((a - b) ** 2))
    return float(np.mean(errs))


@dataclass(frozen=True)
class SynthLayer:
    weights: LayerWeights
    queries: np.ndarray  # [H, d, d_model]
    embeddings: np.ndarray  # [T, d_model]
    inputs: tuple[AttentionInputs, ...]


def synth_layer(
    num_heads: int, seq_len: int, head_dim: int, d_model: int, seed: int = 0
) -> SynthLayer:
    """Random layer: N(0, 1/d_model) projections applied to N(0, 1) token embeddings."""
    if min(num_heads, seq_len, head_dim, d_model) < 1:
        raise ShapeError("all synthetic dimensions must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d_model)
    wq = rng.standard_normal((num_heads, head_dim, d_model)) * scale
    wk = rng.standard_normal((num_heads, head_dim, d_model)) * scale
    wv = rng.standard_normal((num_heads, head_dim, d_model)) * scale
    x = rng.standard_normal((seq_len, d_model))
    inputs = tuple(
        AttentionInputs(x @ wq[h].T, x @ wk[h].T, x @ wv[h].T) for h in range(num_heads)
    )
    return SynthLayer(LayerWeights(wk, wv), wq, x, inputs)
