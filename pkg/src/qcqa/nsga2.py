"""A small NSGA-II for two minimized objectives.

Genomes are any hashable values (the candidate dataclasses and plain
tuples of bits all qualify). The engine only needs an ``evaluate`` callable
returning an :class:`ObjectivePoint` and a ``vary`` callable producing two
children from two parents.

All random draws happen on the coordinating thread from one
``numpy.random.Generator``; fitness evaluation may be farmed out to a thread
pool without changing the result.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Hashable, NamedTuple, Sequence

import numpy as np

from .core import AcCandidate, EcCandidate
from .errors import ConfigError, EvaluationError

log = logging.getLogger(__name__)

__all__ = [
    "ObjectivePoint",
    "Population",
    "VariationRates",
    "dominates",
    "fast_nondominated_sort",
    "crowding_distance",
    "hypervolume_2d",
    "vary_ac",
    "vary_ec",
    "vary_bits",
    "order_crossover",
    "evolve",
]


class ObjectivePoint(NamedTuple):
    wse: float
    kv: float


@dataclass
class Population:
    members: list
    points: list[ObjectivePoint] = field(default_factory=list)

    def __post_init__(self):
        if self.points and len(self.points) != len(self.members):
            raise ValueError("members and points differ in length")

    def __len__(self) -> int:
        return len(self.members)

    def objective_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.float64).reshape(-1, 2)

    def ranks(self) -> list[int]:
        return fast_nondominated_sort(self.points)

    def first_front(self) -> list[tuple[Hashable, ObjectivePoint]]:
        """Rank-0 members with their points, duplicates included."""
        r = self.ranks()
        return [(m, p) for m, p, k in zip(self.members, self.points, r) if k == 0]


@dataclass(frozen=True)
class VariationRates:
    """Crossover/mutation settings.

    ``p_mut=None`` means ``1 / genome_length``. ``max_swaps`` bounds the
    number of transpositions applied to a permutation child (drawn uniformly
    from ``0..max_swaps``).
    """

    p_cx: float = 0.9
    p_mut: float | None = None
    max_swaps: int = 2

    def mutation_rate(self, length: int) -> float:
        return 1.0 / length if self.p_mut is None else self.p_mut


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def _domination_matrix(F: np.ndarray) -> np.ndarray:
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    return le & lt


def fast_nondominated_sort(points) -> list[int]:
    """Pareto rank of every point (0 = non-dominated)."""
    if len(points) == 0:
        return []
    F = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(F)
    D = _domination_matrix(F)  # D[i, j]: i dominates j
    dominated_by = D.sum(axis=0)
    ranks = np.full(n, -1, dtype=np.int64)
    current = np.flatnonzero(dominated_by == 0)
    r = 0
    while current.size:
        ranks[current] = r
        dominated_by = dominated_by - D[current].sum(axis=0)
        dominated_by[ranks >= 0] = -1
        current = np.flatnonzero(dominated_by == 0)
        r += 1
    return ranks.tolist()


def crowding_distance(front) -> list[float]:
    """Crowding distance within one front.

    Extremes in each objective get ``inf``. Exact duplicates of an earlier
    point get 0 so copies never outrank a distinct neighbour. An objective
    with zero range adds nothing to interior points.
    """
    F = np.asarray(front, dtype=np.float64).reshape(len(front), -1)
    n = len(F)
    if n <= 2:
        return [math.inf] * n
    _, first_idx = np.unique(F, axis=0, return_index=True)
    first_idx = np.sort(first_idx)
    U = F[first_idx]
    m = len(U)
    dist = np.zeros(m)
    if m <= 2:
        dist[:] = math.inf
    else:
        for k in range(U.shape[1]):
            order = np.argsort(U[:, k], kind="stable")
            vals = U[order, k]
            span = vals[-1] - vals[0]
            dist[order[0]] = math.inf
            dist[order[-1]] = math.inf
            if span > 0:
                dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    out = np.zeros(n)
    out[first_idx] = dist
    return out.tolist()


def hypervolume_2d(points, reference: tuple[float, float]) -> float:
    """Area dominated by ``points`` and bounded by ``reference`` (both minimized)."""
    rx, ry = reference
    pts = sorted((float(a), float(b)) for a, b in points if a <= rx and b <= ry)
    area = 0.0
    best_y = ry
    for x, y in pts:
        if y < best_y:
            area += (rx - x) * (best_y - y)
            best_y = y
    return area


def order_crossover(a: Sequence[int], b: Sequence[int], start: int, end: int) -> tuple[int, ...]:
    """OX: keep ``a[start:end]`` in place, fill the other slots in ``b``'s order."""
    n = len(a)
    child: list[int | None] = [None] * n
    child[start:end] = a[start:end]
    kept = set(a[start:end])
    fill = iter(x for x in b if x not in kept)
    for i in range(n):
        if child[i] is None:
            child[i] = next(fill)
    return tuple(child)  # type: ignore[arg-type]


def vary_ac(parents, rates: VariationRates, rng: np.random.Generator):
    """Uniform crossover then per-position label reset."""
    a, b = parents
    P = a.max_groups
    x = np.array(a.labels)
    y = np.array(b.labels)
    H = len(x)
    if rng.random() < rates.p_cx:
        swap = rng.random(H) < 0.5
        x[swap], y[swap] = y[swap], x[swap].copy()
    pm = rates.mutation_rate(H)
    children = []
    for c in (x, y):
        mask = rng.random(H) < pm
        c[mask] = rng.integers(0, P, size=int(mask.sum()))
        children.append(AcCandidate(tuple(int(v) for v in c), P))
    return children[0], children[1]


def _swap_mutate(perm: list[int], rates: VariationRates, rng: np.random.Generator) -> None:
    k = int(rng.integers(0, rates.max_swaps + 1))
    n = len(perm)
    for _ in range(k):
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        perm[i], perm[j] = perm[j], perm[i]


def vary_ec(parents, rates: VariationRates, rng: np.random.Generator):
    """Order crossover then a few random transpositions; children stay permutations."""
    a, b = parents
    H = len(a.perm)
    if rng.random() < rates.p_cx:
        i, j = sorted(int(v) for v in rng.integers(0, H + 1, size=2))
        x = list(order_crossover(a.perm, b.perm, i, j))
        y = list(order_crossover(b.perm, a.perm, i, j))
    else:
        x, y = list(a.perm), list(b.perm)
    _swap_mutate(x, rates, rng)
    _swap_mutate(y, rates, rng)
    return EcCandidate(tuple(x), a.block_size), EcCandidate(tuple(y), b.block_size)


def vary_bits(parents, rates: VariationRates, rng: np.random.Generator):
    """Uniform crossover and independent bit flips on 0/1 tuples."""
    x = np.array(parents[0], dtype=np.int8)
    y = np.array(parents[1], dtype=np.int8)
    n = len(x)
    if rng.random() < rates.p_cx:
        swap = rng.random(n) < 0.5
        x[swap], y[swap] = y[swap], x[swap].copy()
    pm = rates.mutation_rate(n)
    for c in (x, y):
        flip = rng.random(n) < pm
        c[flip] ^= 1
    return tuple(int(v) for v in x), tuple(int(v) for v in y)


class _Evaluator:
    """Memoizing, optionally threaded fitness evaluation."""

    def __init__(self, evaluate, threads: int):
        self.evaluate = evaluate
        self.threads = max(1, int(threads))
        self.cache: dict = {}

    def _one(self, genome) -> ObjectivePoint:
        try:
            res = self.evaluate(genome)
            pt = ObjectivePoint(float(res[0]), float(res[1]))
        except Exception as exc:
            raise EvaluationError(f"fitness evaluation failed for genome {genome!r}: {exc}") from exc
        if not (math.isfinite(pt.wse) and math.isfinite(pt.kv)):
            raise EvaluationError(f"non-finite fitness {tuple(pt)} for genome {genome!r}")
        return pt

    def __call__(self, genomes: list) -> list[ObjectivePoint]:
        todo = [g for g in dict.fromkeys(genomes) if g not in self.cache]
        if self.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(self._one, todo))
        else:
            results = [self._one(g) for g in todo]
        self.cache.update(zip(todo, results))
        return [self.cache[g] for g in genomes]


def _rank_and_crowd(points: list[ObjectivePoint]) -> tuple[np.ndarray, np.ndarray]:
    ranks = np.asarray(fast_nondominated_sort(points))
    crowd = np.zeros(len(points))
    F = np.asarray(points, dtype=np.float64)
    for r in np.unique(ranks):
        idx = np.flatnonzero(ranks == r)
        crowd[idx] = crowding_distance(F[idx])
    return ranks, crowd


def _tournament(ranks, crowd, rng) -> int:
    i, j = (int(v) for v in rng.integers(0, len(ranks), size=2))
    if ranks[i] != ranks[j]:
        return i if ranks[i] < ranks[j] else j
    if crowd[i] != crowd[j]:
        return i if crowd[i] > crowd[j] else j
    return min(i, j)


def _environmental_selection(points: list[ObjectivePoint], size: int):
    """Indices of the ``size`` survivors, with their rank and crowding distance.

    Repeats of an objective vector already present are ordered after every
    distinct point; otherwise copies of the front crowd out the dominated
    stepping stones the search needs.
    """
    ranks, crowd = _rank_and_crowd(points)
    F = np.asarray(points, dtype=np.float64)
    _, first = np.unique(F, axis=0, return_index=True)
    repeat = np.ones(len(points), dtype=np.int64)
    repeat[first] = 0
    # lexsort: last key is primary; index breaks exact ties
    order = np.lexsort((np.arange(len(points)), -crowd, ranks, repeat))
    keep = np.sort(order[:size])
    return keep.tolist(), ranks[keep], crowd[keep]


def evolve(
    initial,
    evaluate: Callable[[Hashable], tuple[float, float]],
    vary: Callable,
    ngen: int,
    rng: np.random.Generator | int | None = None,
    *,
    threads: int = 1,
    callback: Callable[[int, Population], None] | None = None,
) -> Population:
    """Run NSGA-II and return the final population.

    ``initial`` is a :class:`Population` or a list of genomes. ``vary`` is
    called as ``vary((parent_a, parent_b), rng)`` and returns two children.
    ``callback(gen, population)`` is invoked after evaluation of the initial
    population (``gen=0``) and after every generation.
    """
    members = list(initial.members if isinstance(initial, Population) else initial)
    n = len(members)
    if n < 4 or n % 2:
        raise ConfigError(f"population size must be even and >= 4, got {n}")
    if ngen < 1:
        raise ConfigError(f"ngen must be >= 1, got {ngen}")
    rng = np.random.default_rng(rng)
    evaluator = _Evaluator(evaluate, threads)

    points = evaluator(members)
    pop = Population(members, points)
    if callback:
        callback(0, pop)
    ranks, crowd = _rank_and_crowd(pop.points)
    for gen in range(1, ngen + 1):
        offspring = []
        for _ in range(n // 2):
            a = pop.members[_tournament(ranks, crowd, rng)]
            b = pop.members[_tournament(ranks, crowd, rng)]
            offspring.extend(vary((a, b), rng))
        off_points = evaluator(offspring)
        all_members = pop.members + offspring
        all_points = pop.points + off_points
        keep, ranks, crowd = _environmental_selection(all_points, n)
        pop = Population([all_members[i] for i in keep], [all_points[i] for i in keep])
        if callback:
            callback(gen, pop)
    log.debug("evolve: %d generations, %d distinct genomes evaluated", ngen, len(evaluator.cache))
    return pop
