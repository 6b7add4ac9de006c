"""Domain types and the two grouping encodings.

A *grouping* of a layer is a set partition of the head indices ``0..H-1``.
Two genome encodings decode into groupings:

* :class:`AcCandidate` (arbitrary cardinality): one integer label per head,
  heads sharing a label share a key/value head.
* :class:`EcCandidate` (equal cardinality): a permutation of the heads cut
  into consecutive blocks of ``C = H / P`` positions.

All weight data is held as read-only float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EncodingError, PartitionError, PlanError, ShapeError

__all__ = [
    "HeadMatrix",
    "head_matrix",
    "LayerWeights",
    "WeightArchive",
    "LayerGrouping",
    "AcCandidate",
    "EcCandidate",
    "ModelPlan",
    "KEEP_MHA",
    "FrontEntry",
    "ParetoFront",
    "decode_ac",
    "decode_ec",
    "random_ec",
    "gqa_baseline",
]

HeadMatrix = np.ndarray
"""A ``[rows, cols]`` float64 matrix: one head's K or V projection."""

KEEP_MHA = None
"""Per-layer plan entry meaning "leave this layer as multi-head attention"."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def head_matrix(data) -> HeadMatrix:
    """Validate and widen ``data`` to a read-only float64 head matrix."""
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"head matrix must be 2-D with positive dims, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError("head matrix contains non-finite entries")
    return _frozen(m)


def _stack_heads(heads, what: str) -> np.ndarray:
    if isinstance(heads, np.ndarray) and heads.ndim == 3:
        arr = np.array(heads, dtype=np.float64)
    else:
        mats = [head_matrix(h) for h in heads]
        if not mats:
            raise ShapeError(f"{what}: at least one head is required")
        shapes = {m.shape for m in mats}
        if len(shapes) != 1:
            raise ShapeError(f"{what}: heads have differing shapes {sorted(shapes)}")
        arr = np.stack(mats)
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ShapeError(f"{what}: invalid stacked shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{what}: non-finite entries")
    return _frozen(arr)


class LayerWeights:
    """Per-head key and value projections of one attention layer.

    ``keys`` has shape ``[H, d_k, d_model]`` and ``values`` ``[H, d_v, d_model]``.
    Either argument may be a 3-D array or a sequence of 2-D head matrices.
    """

    __slots__ = ("keys", "values")

    def __init__(self, keys, values):
        k = _stack_heads(keys, "keys")
        v = _stack_heads(values, "values")
        if k.shape[0] != v.shape[0]:
            raise ShapeError(f"{k.shape[0]} key heads but {v.shape[0]} value heads")
        object.__setattr__(self, "keys", k)
        object.__setattr__(self, "values", v)

    def __setattr__(self, name, value):
        raise AttributeError("LayerWeights is immutable")

    @property
    def num_heads(self) -> int:
        return int(self.keys.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerWeights):
            return NotImplemented
        return np.array_equal(self.keys, other.keys) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.keys.shape, self.values.shape, self.keys.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"LayerWeights(H={self.num_heads}, k={self.keys.shape[1:]}, v={self.values.shape[1:]})"


class WeightArchive:
    """An ordered collection of :class:`LayerWeights`.

    Archives loaded from an original checkpoint have the same head count in
    every layer. Archives produced by mean-pooling may not, which is why
    :attr:`heads_per_layer` raises instead of guessing.
    """

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[LayerWeights]):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("an archive needs at least one layer")
        for i, layer in enumerate(layers):
            if not isinstance(layer, LayerWeights):
                raise TypeError(f"layer {i} is {type(layer).__name__}, expected LayerWeights")
        object.__setattr__(self, "layers", layers)

    def __setattr__(self, name, value):
        raise AttributeError("WeightArchive is immutable")

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def head_counts(self) -> tuple[int, ...]:
        return tuple(layer.num_heads for layer in self.layers)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.head_counts)) == 1

    @property
    def heads_per_layer(self) -> int:
        counts = set(self.head_counts)
        if len(counts) != 1:
            raise ShapeError(f"layers have differing head counts {self.head_counts}")
        return counts.pop()

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightArchive):
            return NotImplemented
        return self.layers == other.layers

    def __hash__(self):
        return hash(self.layers)

    def __repr__(self) -> str:
        return f"WeightArchive(layers={self.layer_count}, heads={self.head_counts})"


@dataclass(frozen=True)
class LayerGrouping:
    """A canonical partition of ``0..H-1`` into non-empty groups.

    Canonical form: members ascending, groups ordered by smallest member.
    Build instances with :meth:`from_groups` or :meth:`from_labels`; the
    constructor validates but does not reorder.
    """

    groups: tuple[tuple[int, ...], ...]
    num_heads: int

    def __post_init__(self):
        H = self.num_heads
        if H < 1:
            raise PartitionError(f"head count must be >= 1, got {H}")
        seen: set[int] = set()
        for g in self.groups:
            if not g:
                raise PartitionError("empty group")
            for h in g:
                if not 0 <= h < H:
                    raise PartitionError(f"head index {h} out of range for H={H}")
                if h in seen:
                    raise PartitionError(f"head {h} appears in more than one group")
                seen.add(h)
        if len(seen) != H:
            missing = sorted(set(range(H)) - seen)
            raise PartitionError(f"heads {missing} are not covered by any group")
        canon = tuple(sorted(tuple(sorted(g)) for g in self.groups))
        if canon != self.groups:
            raise PartitionError("grouping is not in canonical form; use LayerGrouping.from_groups")

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable[int]], num_heads: int) -> "LayerGrouping":
        canon = tuple(sorted(tuple(sorted(int(h) for h in g)) for g in groups))
        return cls(canon, int(num_heads))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "LayerGrouping":
        classes: dict[int, list[int]] = {}
        for head, lab in enumerate(labels):
            classes.setdefault(int(lab), []).append(head)
        return cls.from_groups(classes.values(), len(labels))

    @classmethod
    def singletons(cls, num_heads: int) -> "LayerGrouping":
        return cls(tuple((h,) for h in range(num_heads)), num_heads)

    @classmethod
    def single_group(cls, num_heads: int) -> "LayerGrouping":
        return cls((tuple(range(num_heads)),), num_heads)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def labels(self) -> tuple[int, ...]:
        """Restricted-growth label vector: head ``i`` -> index of its group."""
        out = [0] * self.num_heads
        for j, g in enumerate(self.groups):
            for h in g:
                out[h] = j
        return tuple(out)

    def group_of(self, head: int) -> tuple[int, ...]:
        for g in self.groups:
            if head in g:
                return g
        raise PartitionError(f"head {head} is not in the grouping")

    def as_lists(self) -> list[list[int]]:
        return [list(g) for g in self.groups]

    def __str__(self) -> str:
        return "{" + ",".join("{" + ",".join(map(str, g)) + "}" for g in self.groups) + "}"


@dataclass(frozen=True)
class AcCandidate:
    """Arbitrary-cardinality genome: ``labels[i]`` is the group label of head ``i``."""

    labels: tuple[int, ...]
    max_groups: int

    def __post_init__(self):
        if self.max_groups < 1:
            raise EncodingError(f"max_groups must be >= 1, got {self.max_groups}")
        if not self.labels:
            raise EncodingError("label vector is empty")
        for i, lab in enumerate(self.labels):
            if not 0 <= lab < self.max_groups:
                raise EncodingError(
                    f"label {lab} at head {i} outside [0, {self.max_groups - 1}]"
                )

    @property
    def num_heads(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class EcCandidate:
    """Equal-cardinality genome: a head permutation cut into blocks of ``block_size``."""

    perm: tuple[int, ...]
    block_size: int

    def __post_init__(self):
        H = len(self.perm)
        if H < 1:
            raise EncodingError("permutation is empty")
        if self.block_size < 1 or H % self.block_size:
            raise EncodingError(f"H={H} cannot be cut into blocks of {self.block_size}")
        if sorted(self.perm) != list(range(H)):
            raise EncodingError(f"{self.perm} is not a permutation of 0..{H - 1}")

    @property
    def num_heads(self) -> int:
        return len(self.perm)

    @property
    def num_groups(self) -> int:
        return len(self.perm) // self.block_size


@dataclass(frozen=True)
class ModelPlan:
    """Per-layer decision: :data:`KEEP_MHA` (``None``) or a :class:`LayerGrouping`."""

    per_layer: tuple[LayerGrouping | None, ...]

    def __post_init__(self):
        for i, entry in enumerate(self.per_layer):
            if entry is not None and not isinstance(entry, LayerGrouping):
                raise PlanError(
                    f"layer {i}: expected LayerGrouping or None, got {type(entry).__name__}"
                )

    def validate_for(self, num_heads: int, layer_count: int) -> None:
        if len(self.per_layer) != layer_count:
            raise PlanError(f"plan has {len(self.per_layer)} layers, archive has {layer_count}")
        for i, g in enumerate(self.per_layer):
            if g is not None and g.num_heads != num_heads:
                raise PlanError(f"layer {i}: grouping is for H={g.num_heads}, archive has H={num_heads}")

    @classmethod
    def all_mha(cls, layer_count: int) -> "ModelPlan":
        return cls((None,) * layer_count)

    @classmethod
    def uniform(cls, grouping: LayerGrouping, layer_count: int) -> "ModelPlan":
        return cls((grouping,) * layer_count)


class FrontEntry(NamedTuple):
    kv_fraction: float
    wse: float
    item: object


@dataclass(frozen=True)
class ParetoFront:
    """Non-dominated (kv_fraction, wse) points, ascending by kv_fraction."""

    entries: tuple[FrontEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def objectives(self) -> list[tuple[float, float]]:
        return [(e.kv_fraction, e.wse) for e in self.entries]

    def items(self) -> list:
        return [e.item for e in self.entries]


def decode_ac(candidate: AcCandidate, num_heads: int | None = None) -> LayerGrouping:
    """Group heads that carry the same label; unused labels simply vanish."""
    if num_heads is not None and num_heads != candidate.num_heads:
        raise EncodingError(f"candidate has {candidate.num_heads} labels, expected {num_heads}")
    return LayerGrouping.from_labels(candidate.labels)


def decode_ec(candidate: EcCandidate) -> LayerGrouping:
    C = candidate.block_size
    perm = candidate.perm
    return LayerGrouping.from_groups(
        (perm[m * C:(m + 1) * C] for m in range(len(perm) // C)), len(perm)
    )


def _check_divisible(num_heads: int, num_groups: int) -> None:
    if num_groups < 1 or num_heads < 1 or num_heads % num_groups:
        raise ConfigError(f"H={num_heads} is not divisible into P={num_groups} equal groups")


def random_ec(
    num_heads: int,
    num_groups: int,
    swap_count: int | None = None,
    rng: np.random.Generator | int | None = None,
) -> EcCandidate:
    """Start from the identity permutation and apply ``swap_count`` random transpositions.

    ``swap_count`` defaults to ``num_heads``. Each swap picks two positions
    uniformly from ``0..H-1`` (possibly equal, which is a no-op).
    """
    _check_divisible(num_heads, num_groups)
    if swap_count is None:
        swap_count = num_heads
    if swap_count < 0:
        raise ConfigError(f"swap_count must be >= 0, got {swap_count}")
    rng = np.random.default_rng(rng)
    perm = list(range(num_heads))
    for _ in range(swap_count):
        i, j = (int(x) for x in rng.integers(0, num_heads, size=2))
        perm[i], perm[j] = perm[j], perm[i]
    return EcCandidate(tuple(perm), num_heads // num_groups)


def gqa_baseline(num_heads: int, num_groups: int) -> LayerGrouping:
    """Consecutive equal blocks; ``num_groups=1`` is the MQA grouping."""
    _check_divisible(num_heads, num_groups)
    C = num_heads // num_groups
    return LayerGrouping(tuple(tuple(range(m * C, (m + 1) * C)) for m in range(num_groups)), num_heads)
