"""Two-stage grouping search.

Stage 1 (:func:`qcqa_groups`) evolves a grouping for every layer on its own,
minimizing (layer WSE, layer KV fraction), then collates the per-layer
fronts into five buckets by KV-fraction percentile. Stage 2
(:func:`qcqa_select_layers`) evolves a keep/group bit per layer using one
bucket's groupings and returns the model-level front.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    AcCandidate,
    FrontEntry,
    LayerGrouping,
    LayerWeights,
    ModelPlan,
    ParetoFront,
    WeightArchive,
    decode_ac,
    decode_ec,
    random_ec,
)
from .errors import ConfigError, PlanError, QcqaError
from .kvcache import layer_kv_fraction
from .nsga2 import VariationRates, evolve, fast_nondominated_sort, vary_ac, vary_bits, vary_ec
from .wse import layer_wse

log = logging.getLogger(__name__)

__all__ = [
    "PERCENTILES",
    "PercentileBuckets",
    "nearest_rank_index",
    "search_layer",
    "collate_percentiles",
    "qcqa_groups",
    "qcqa_select_layers",
    "select_layers_all_buckets",
    "merge_fronts",
    "plan_from_bits",
    "plan_sort_key",
]

PERCENTILES = (0, 25, 50, 75, 100)
ENCODINGS = ("ac", "ec")


@dataclass(frozen=True)
class PercentileBuckets:
    """One grouping per layer for each of the five KV-fraction percentiles.

    ``layer_fronts`` keeps the deduplicated per-layer stage-1 fronts the
    buckets were drawn from.
    """

    buckets: dict[int, tuple[LayerGrouping, ...]]
    layer_fronts: tuple[ParetoFront, ...] = ()

    def __post_init__(self):
        if tuple(sorted(self.buckets)) != PERCENTILES:
            raise ConfigError(f"buckets must be keyed by {PERCENTILES}, got {sorted(self.buckets)}")
        lengths = {len(v) for v in self.buckets.values()}
        if len(lengths) != 1:
            raise ConfigError(f"buckets have differing layer counts {sorted(lengths)}")

    @property
    def layer_count(self) -> int:
        return len(self.buckets[0])

    def __getitem__(self, percentile: int) -> tuple[LayerGrouping, ...]:
        return self.buckets[percentile]


def nearest_rank_index(n: int, percentile: float) -> int:
    """Zero-based index of the nearest-rank percentile in ``n`` sorted values."""
    if n < 1:
        raise ValueError("percentile of an empty list")
    rank = math.ceil(percentile / 100.0 * n)
    return min(max(rank, 1), n) - 1


def _unique_front(entries) -> ParetoFront:
    """Collapse ``(kv, wse, grouping)`` rank-0 entries to one grouping per objective point."""
    best: dict[tuple[float, float], LayerGrouping] = {}
    for kv, wse, g in entries:
        key = (kv, wse)
        if key not in best or g.groups < best[key].groups:
            best[key] = g
    ordered = sorted(best.items(), key=lambda kv_g: (kv_g[0][0], kv_g[0][1]))
    return ParetoFront(tuple(FrontEntry(kv, wse, g) for (kv, wse), g in ordered))


def _initial_population(encoding, num_heads, max_groups, pop_size, rng):
    if encoding == "ac":
        labels = rng.integers(0, max_groups, size=(pop_size, num_heads))
        return [AcCandidate(tuple(int(v) for v in row), max_groups) for row in labels]
    return [random_ec(num_heads, max_groups, num_heads, rng) for _ in range(pop_size)]


def search_layer(
    layer: LayerWeights,
    max_groups: int,
    encoding: str = "ac",
    pop_size: int = 64,
    ngen: int = 200,
    rng: np.random.Generator | int | None = None,
    *,
    rates: VariationRates | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
    threads: int = 1,
    callback=None,
) -> ParetoFront:
    """Evolve groupings of one layer; return the final rank-0 front, one grouping per point.

    For ``"ec"`` every candidate has exactly ``max_groups`` groups, so the
    front collapses to a single KV level.
    """
    H = layer.num_heads
    if encoding not in ENCODINGS:
        raise ConfigError(f"unknown encoding {encoding!r}; expected one of {ENCODINGS}")
    if not 1 <= max_groups <= H:
        raise ConfigError(f"max_groups must be in [1, {H}], got {max_groups}")
    if encoding == "ec" and H % max_groups:
        raise ConfigError(f"equal-cardinality encoding needs P | H, got H={H}, P={max_groups}")
    rng = np.random.default_rng(rng)
    rates = rates or VariationRates()
    decode = decode_ac if encoding == "ac" else decode_ec
    vary_op = vary_ac if encoding == "ac" else vary_ec

    def evaluate(candidate):
        g = decode(candidate)
        return layer_wse(layer, g, weights), layer_kv_fraction(g, H)

    initial = _initial_population(encoding, H, max_groups, pop_size, rng)
    pop = evolve(
        initial,
        evaluate,
        lambda parents, r: vary_op(parents, rates, r),
        ngen,
        rng,
        threads=threads,
        callback=callback,
    )
    front = pop.first_front()
    if not front:
        raise QcqaError("evolution returned an empty rank-0 front")
    return _unique_front((p.kv, p.wse, decode(m)) for m, p in front)


def collate_percentiles(layer_fronts: Sequence[ParetoFront]) -> PercentileBuckets:
    """Pick each layer's front member at the 0/25/50/75/100th KV percentile."""
    buckets: dict[int, list[LayerGrouping]] = {p: [] for p in PERCENTILES}
    for i, front in enumerate(layer_fronts):
        if len(front) == 0:
            raise QcqaError(f"layer {i}: empty front, nothing to collate")
        entries = sorted(front.entries, key=lambda e: (e.kv_fraction, e.wse, e.item.groups))
        for p in PERCENTILES:
            buckets[p].append(entries[nearest_rank_index(len(entries), p)].item)
    return PercentileBuckets({p: tuple(v) for p, v in buckets.items()}, tuple(layer_fronts))


def _layer_seed(seed: int, stage: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, index])


def qcqa_groups(
    archive: WeightArchive,
    max_groups: int,
    encoding: str = "ac",
    pop_size: int = 64,
    ngen: int = 200,
    seed: int = 42,
    *,
    rates: VariationRates | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
    threads: int = 1,
) -> PercentileBuckets:
    """Stage 1: independent per-layer searches followed by percentile collation."""
    H = archive.heads_per_layer

    def run(i: int) -> ParetoFront:
        front = search_layer(
            archive.layers[i],
            max_groups,
            encoding,
            pop_size,
            ngen,
            _layer_seed(seed, 1, i),
            rates=rates,
            weights=weights,
        )
        log.info("layer %d: %d front points (H=%d)", i, len(front), H)
        return front

    idx = range(archive.layer_count)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            fronts = list(pool.map(run, idx))
    else:
        fronts = [run(i) for i in idx]
    return collate_percentiles(fronts)


def plan_from_bits(bits: Sequence[int], groupings: Sequence[LayerGrouping]) -> ModelPlan:
    return ModelPlan(tuple(g if b else None for b, g in zip(bits, groupings)))


def plan_sort_key(plan: ModelPlan):
    return tuple(() if g is None else g.groups for g in plan.per_layer)


def qcqa_select_layers(
    archive: WeightArchive,
    buckets: PercentileBuckets,
    bucket_choice: int = 50,
    pop_size: int = 64,
    ngen: int = 100,
    seed: int = 42,
    *,
    rates: VariationRates | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
    threads: int = 1,
    callback=None,
) -> ParetoFront:
    """Stage 2: choose which layers adopt their bucket grouping.

    Returns the rank-0 plans (items are :class:`ModelPlan`), one per distinct
    bit-vector, sorted by KV fraction. The all-MHA plan is placed in the
    initial population; the rest is sampled Bernoulli(0.5).
    """
    if bucket_choice not in PERCENTILES:
        raise ConfigError(f"bucket must be one of {PERCENTILES}, got {bucket_choice}")
    groupings = buckets[bucket_choice]
    n = archive.layer_count
    H = archive.heads_per_layer
    if len(groupings) != n:
        raise PlanError(f"buckets cover {len(groupings)} layers, archive has {n}")
    per_layer = [
        (g.num_groups, layer_wse(layer, g, weights)) for layer, g in zip(archive.layers, groupings)
    ]
    denom = H * n

    def evaluate(bits):
        wse = sum(w for b, (_, w) in zip(bits, per_layer) if b)
        heads = sum(k if b else H for b, (k, _) in zip(bits, per_layer))
        return wse, heads / denom

    rng = _layer_seed(seed, 2, bucket_choice)
    rates = rates or VariationRates()
    init = rng.integers(0, 2, size=(pop_size, n))
    init[0] = 0
    initial = [tuple(int(v) for v in row) for row in init]
    pop = evolve(
        initial,
        evaluate,
        lambda parents, r: vary_bits(parents, rates, r),
        ngen,
        rng,
        threads=threads,
        callback=callback,
    )
    seen = {}
    for bits, p in pop.first_front():
        seen.setdefault(bits, p)
    entries = sorted(
        (FrontEntry(p.kv, p.wse, plan_from_bits(bits, groupings)) for bits, p in seen.items()),
        key=lambda e: (e.kv_fraction, e.wse, plan_sort_key(e.item)),
    )
    return ParetoFront(tuple(entries))


def merge_fronts(fronts: Sequence[ParetoFront]) -> ParetoFront:
    """Non-dominated union of several plan fronts, identical plans merged."""
    unique: dict = {}
    for front in fronts:
        for e in front:
            unique.setdefault(plan_sort_key(e.item), e)
    entries = list(unique.values())
    if not entries:
        return ParetoFront(())
    ranks = fast_nondominated_sort([(e.wse, e.kv_fraction) for e in entries])
    keep = [e for e, r in zip(entries, ranks) if r == 0]
    keep.sort(key=lambda e: (e.kv_fraction, e.wse, plan_sort_key(e.item)))
    return ParetoFront(tuple(keep))


def select_layers_all_buckets(
    archive: WeightArchive,
    buckets: PercentileBuckets,
    pop_size: int = 64,
    ngen: int = 100,
    seed: int = 42,
    **kwargs,
) -> ParetoFront:
    """Run stage 2 once per bucket and merge the resulting fronts."""
    fronts = [
        qcqa_select_layers(archive, buckets, p, pop_size, ngen, seed, **kwargs) for p in PERCENTILES
    ]
    return merge_fronts(fronts)
