"""Exhaustive references for small instances.

Set partitions are walked as restricted-growth strings: ``a[0] = 0`` and
``a[i] <= 1 + max(a[:i])``. Each string names exactly one partition, so no
deduplication is needed.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Iterator

from .core import FrontEntry, LayerGrouping, LayerWeights, ParetoFront
from .errors import BudgetExceededError, ConfigError
from .kvcache import layer_kv_fraction
from .wse import layer_wse

__all__ = [
    "PARTITION_BUDGET",
    "stirling2",
    "partition_count",
    "restricted_growth_strings",
    "enumerate_partitions",
    "pareto_filter",
    "exact_pareto",
    "exact_plan_front",
]

PARTITION_BUDGET = 10_000_000


@lru_cache(maxsize=None)
def _stirling_row(n: int) -> tuple[int, ...]:
    if n == 0:
        return (1,)
    prev = _stirling_row(n - 1)
    row = [0] * (n + 1)
    for k in range(1, n + 1):
        left = prev[k] if k < len(prev) else 0
        row[k] = k * left + prev[k - 1]
    return tuple(row)


def stirling2(n: int, k: int) -> int:
    """Stirling number of the second kind, exact."""
    if n < 0 or k < 0:
        raise ValueError("stirling2 arguments must be non-negative")
    if k > n:
        return 0
    # iterate rows to avoid deep recursion for large n
    for i in range(n + 1):
        _stirling_row(i)
    return _stirling_row(n)[k]


def partition_count(num_heads: int, max_groups: int) -> int:
    return sum(stirling2(num_heads, k) for k in range(1, max_groups + 1))


def restricted_growth_strings(n: int, max_blocks: int) -> Iterator[tuple[int, ...]]:
    """Lexicographic restricted-growth strings of length ``n`` using at most ``max_blocks`` values."""
    if n == 0:
        yield ()
        return
    a = [0] * n
    # m[i] = max(a[:i+1])
    m = [0] * n

    def rec(i: int):
        if i == n:
            yield tuple(a)
            return
        top = min(m[i - 1] + 1, max_blocks - 1)
        for v in range(top + 1):
            a[i] = v
            m[i] = max(m[i - 1], v)
            yield from rec(i + 1)

    yield from rec(1)


def enumerate_partitions(
    num_heads: int, max_groups: int, budget: int = PARTITION_BUDGET
) -> Iterator[LayerGrouping]:
    """Every partition of ``0..num_heads-1`` with at most ``max_groups`` blocks, once each."""
    if not 1 <= max_groups <= num_heads:
        raise ConfigError(f"need 1 <= max_groups <= H, got max_groups={max_groups}, H={num_heads}")
    count = partition_count(num_heads, max_groups)
    if count > budget:
        raise BudgetExceededError(
            f"{count} partitions of {num_heads} heads into <= {max_groups} groups exceeds budget {budget}"
        )
    for rgs in restricted_growth_strings(num_heads, max_groups):
        yield LayerGrouping.from_labels(rgs)


def pareto_filter(entries) -> list:
    """Non-dominated subset of ``(kv, wse, item)`` triples (both minimized).

    Sort-and-sweep: a point survives iff its wse is minimal within its kv
    level and strictly below every wse seen at smaller kv. Points with equal
    objectives are all kept. Shares no code with the evolutionary engine it
    is used to validate.
    """
    entries = sorted(entries, key=lambda e: (e[0], e[1]))
    keep = []
    best_below = float("inf")
    i = 0
    while i < len(entries):
        j = i
        while j < len(entries) and entries[j][0] == entries[i][0]:
            j += 1
        level_min = entries[i][1]
        if level_min < best_below:
            keep.extend(e for e in entries[i:j] if e[1] == level_min)
            best_below = level_min
        i = j
    return keep


def _sorted_front(entries, key) -> ParetoFront:
    return ParetoFront(tuple(FrontEntry(*e) for e in sorted(entries, key=key)))


def exact_pareto(
    layer: LayerWeights,
    max_groups: int,
    weights: tuple[float, float] = (1.0, 1.0),
    budget: int = PARTITION_BUDGET,
) -> ParetoFront:
    """Exact (kv_fraction, wse) front over all partitions with <= ``max_groups`` blocks.

    Ties in objective space keep every partition achieving them.
    """
    H = layer.num_heads
    entries = [
        (layer_kv_fraction(g, H), layer_wse(layer, g, weights), g)
        for g in enumerate_partitions(H, max_groups, budget)
    ]
    return _sorted_front(pareto_filter(entries), key=lambda e: (e[0], e[1], e[2].groups))


def exact_plan_front(
    layer_values: list[tuple[int, float]],
    num_heads: int,
    max_layers: int = 20,
) -> ParetoFront:
    """Exact front over all ``2**nlayers`` keep/group selections.

    ``layer_values[i]`` is ``(num_groups, wse)`` of the grouping layer ``i``
    would receive. Items are bit tuples (1 = grouped).
    """
    n = len(layer_values)
    if n > max_layers:
        raise BudgetExceededError(f"2**{n} layer selections exceeds budget 2**{max_layers}")
    entries = []
    for bits in itertools.product((0, 1), repeat=n):
        heads = sum(g if b else num_heads for b, (g, _) in zip(bits, layer_values))
        wse = sum(w for b, (_, w) in zip(bits, layer_values) if b)
        entries.append((heads / (num_heads * n), wse, bits))
    return _sorted_front(pareto_filter(entries), key=lambda e: (e[0], e[1], e[2]))
