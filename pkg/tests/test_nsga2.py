import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_layer
from qcqa.core import AcCandidate, EcCandidate, decode_ac, random_ec
from qcqa.errors import ConfigError, EvaluationError
from qcqa.kvcache import layer_kv_fraction
from qcqa.nsga2 import (
    Population,
    VariationRates,
    crowding_distance,
    dominates,
    evolve,
    fast_nondominated_sort,
    hypervolume_2d,
    order_crossover,
    vary_ac,
    vary_bits,
    vary_ec,
)
from qcqa.wse import layer_wse

points2d = st.lists(
    st.tuples(st.integers(0, 6).map(float), st.integers(0, 6).map(float)), min_size=1, max_size=25
)


def brute_ranks(points):
    """Peel non-dominated layers one at a time."""
    left = set(range(len(points)))
    ranks = [None] * len(points)
    r = 0
    while left:
        layer = {i for i in left if not any(dominates(points[j], points[i]) for j in left)}
        for i in layer:
            ranks[i] = r
        left -= layer
        r += 1
    return ranks


class TestSorting:
    def test_hand_example(self):
        assert fast_nondominated_sort([(1, 2), (2, 1), (2, 2)]) == [0, 0, 1]

    def test_chain(self):
        assert fast_nondominated_sort([(3, 3), (2, 2), (1, 1)]) == [2, 1, 0]

    def test_duplicates_share_rank(self):
        assert fast_nondominated_sort([(1, 1), (1, 1), (2, 2)]) == [0, 0, 1]

    def test_empty(self):
        assert fast_nondominated_sort([]) == []

    @given(points2d)
    def test_matches_peeling(self, pts):
        assert fast_nondominated_sort(pts) == brute_ranks(pts)

    @given(points2d)
    def test_rank_zero_mutually_nondominated(self, pts):
        ranks = fast_nondominated_sort(pts)
        front = [p for p, r in zip(pts, ranks) if r == 0]
        assert front
        assert not any(dominates(a, b) for a in front for b in front)


class TestCrowding:
    def test_hand_example(self):
        d = crowding_distance([(0, 2), (1, 1), (2, 0)])
        assert d[0] == d[2] == math.inf
        assert d[1] == 2.0

    def test_small_fronts(self):
        assert crowding_distance([(1, 1)]) == [math.inf]
        assert crowding_distance([(1, 1), (0, 2)]) == [math.inf, math.inf]

    def test_zero_range_objective(self):
        d = crowding_distance([(0, 5), (1, 5), (3, 5)])
        assert d[1] == pytest.approx(1.0)

    def test_duplicate_gets_zero(self):
        d = crowding_distance([(0, 2), (1, 1), (1, 1), (2, 0)])
        assert d[2] == 0.0 and d[1] == 2.0

    @given(points2d)
    def test_nonnegative(self, pts):
        assert all(x >= 0 for x in crowding_distance(pts))


class TestHypervolume:
    def test_single(self):
        assert hypervolume_2d([(1, 1)], (2, 2)) == 1.0

    def test_staircase(self):
        assert hypervolume_2d([(0, 2), (1, 1), (2, 0)], (3, 3)) == 6.0

    def test_outside_reference(self):
        assert hypervolume_2d([(5, 5)], (2, 2)) == 0.0


class TestOperators:
    def test_order_crossover_full_segment(self):
        assert order_crossover((2, 0, 1), (0, 1, 2), 0, 3) == (2, 0, 1)

    def test_order_crossover_empty_segment(self):
        assert order_crossover((2, 0, 1), (0, 1, 2), 1, 1) == (0, 1, 2)

    def test_order_crossover_example(self):
        assert order_crossover((0, 1, 2, 3, 4), (4, 3, 2, 1, 0), 1, 3) == (4, 1, 2, 3, 0)

    def test_ac_children_valid(self):
        rng = np.random.default_rng(0)
        rates = VariationRates(p_mut=0.3)
        a = AcCandidate((0, 1, 2, 3, 0, 1, 2, 3), 4)
        b = AcCandidate((3, 3, 3, 3, 0, 0, 0, 0), 4)
        for _ in range(10_000):
            for c in vary_ac((a, b), rates, rng):
                assert len(c.labels) == 8 and all(0 <= v < 4 for v in c.labels)

    def test_ec_children_are_permutations(self):
        rng = np.random.default_rng(1)
        rates = VariationRates(max_swaps=3)
        pop = [random_ec(8, 4, rng=rng) for _ in range(8)]
        for t in range(10_000):
            a, b = pop[t % 8], pop[(t * 3 + 1) % 8]
            for c in vary_ec((a, b), rates, rng):
                assert sorted(c.perm) == list(range(8)) and c.block_size == 2

    def test_bits_children_valid(self):
        rng = np.random.default_rng(2)
        a, b = (0,) * 6, (1,) * 6
        for _ in range(10_000):
            for c in vary_bits((a, b), VariationRates(), rng):
                assert len(c) == 6 and set(c) <= {0, 1}

    def test_zero_rates_copy_parents(self):
        rng = np.random.default_rng(3)
        rates = VariationRates(p_cx=0.0, p_mut=0.0, max_swaps=0)
        a, b = AcCandidate((0, 1, 1), 2), AcCandidate((1, 1, 0), 2)
        assert vary_ac((a, b), rates, rng) == (a, b)
        e, f = EcCandidate((0, 1, 2, 3), 2), EcCandidate((3, 2, 1, 0), 2)
        assert vary_ec((e, f), rates, rng) == (e, f)


def _layer_problem(H=6, P=3, seed=0):
    layer = random_layer(H, seed)

    def evaluate(c):
        g = decode_ac(c)
        return layer_wse(layer, g), layer_kv_fraction(g, H)

    def init(n, rng):
        return [AcCandidate(tuple(int(v) for v in rng.integers(0, P, H)), P) for _ in range(n)]

    return evaluate, init


class TestEvolve:
    def test_deterministic(self):
        evaluate, init = _layer_problem()
        vary = lambda p, r: vary_ac(p, VariationRates(), r)
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            runs.append(evolve(init(16, rng), evaluate, vary, 10, rng))
        assert runs[0].members == runs[1].members and runs[0].points == runs[1].points

    def test_threads_match_serial(self):
        evaluate, init = _layer_problem()
        vary = lambda p, r: vary_ac(p, VariationRates(), r)
        out = []
        for threads in (1, 4):
            rng = np.random.default_rng(6)
            out.append(evolve(init(16, rng), evaluate, vary, 10, rng, threads=threads))
        assert out[0].members == out[1].members

    def test_zero_rates_only_reuse_initial(self):
        evaluate, init = _layer_problem()
        rng = np.random.default_rng(7)
        initial = init(16, rng)
        rates = VariationRates(p_cx=0.0, p_mut=0.0)
        pop = evolve(initial, evaluate, lambda p, r: vary_ac(p, rates, r), 1, rng)
        start = {tuple(map(float, evaluate(c))) for c in initial}
        assert len(pop) == 16
        assert set(map(tuple, pop.points)) <= start

    def test_hypervolume_never_decreases(self):
        evaluate, init = _layer_problem(H=6, P=6, seed=3)
        rng = np.random.default_rng(8)
        hv = []
        ref = (100.0, 1.01)

        def cb(gen, pop):
            front = [p for _, p in pop.first_front()]
            hv.append(hypervolume_2d(front, ref))

        evolve(init(20, rng), evaluate, lambda p, r: vary_ac(p, VariationRates(), r), 30, rng, callback=cb)
        assert len(hv) == 31
        assert all(b >= a - 1e-12 for a, b in zip(hv, hv[1:]))

    def test_population_invariants(self):
        evaluate, init = _layer_problem()
        rng = np.random.default_rng(9)
        sizes = []

        def cb(gen, pop):
            sizes.append(len(pop))
            front = [p for _, p in pop.first_front()]
            assert not any(dominates(a, b) for a in front for b in front)

        evolve(init(12, rng), evaluate, lambda p, r: vary_ac(p, VariationRates(), r), 15, rng, callback=cb)
        assert sizes == [12] * 16

    def test_accepts_population(self):
        evaluate, init = _layer_problem()
        rng = np.random.default_rng(10)
        pop = evolve(Population(init(8, rng)), evaluate, lambda p, r: vary_ac(p, VariationRates(), r), 2, rng)
        assert len(pop) == 8

    @pytest.mark.parametrize("size,ngen", [(3, 5), (5, 5), (8, 0)])
    def test_bad_config(self, size, ngen):
        with pytest.raises(ConfigError):
            evolve([(0,)] * size, lambda g: (0, 0), lambda p, r: p, ngen, 0)

    def test_evaluation_error_names_genome(self):
        def bad(g):
            raise RuntimeError("boom")

        with pytest.raises(EvaluationError, match=r"\(0, 1\)"):
            evolve([(0, 1)] * 4, bad, lambda p, r: p, 1, 0)

    def test_non_finite_fitness(self):
        with pytest.raises(EvaluationError, match="non-finite"):
            evolve([(0,)] * 4, lambda g: (math.nan, 0.5), lambda p, r: p, 1, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_bit_problem_front_is_nondominated(seed):
    rng = np.random.default_rng(seed)
    w = rng.random(5)

    def evaluate(bits):
        return float(np.dot(bits, w)), 1.0 - 0.1 * sum(bits)

    init = [tuple(int(v) for v in row) for row in rng.integers(0, 2, (8, 5))]
    pop = evolve(init, evaluate, lambda p, r: vary_bits(p, VariationRates(), r), 5, rng)
    front = [p for _, p in pop.first_front()]
    assert not any(dominates(a, b) for a in front for b in front)
