import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_layer
from qcqa.core import LayerGrouping, LayerWeights, ModelPlan, WeightArchive, gqa_baseline
from qcqa.errors import PartitionError, PlanError, ShapeError
from qcqa.wse import feature_wse, layer_wse, mean_pool, merge_sweep, model_wse


def brute_wse(layer, grouping):
    """Direct double loop over groups and members, entry means via Python sums."""
    total = 0.0
    for g in grouping.groups:
        for stack in (layer.keys, layer.values):
            pooled = sum(stack[i] for i in g) / len(g)
            for i in g:
                diff = stack[i] - pooled
                total += float((diff * diff).sum()) / diff.size
    return total


def all_partitions(H):
    return {LayerGrouping.from_labels(lab) for lab in itertools.product(range(H), repeat=H)}


class TestMeanPool:
    def test_singleton(self):
        np.testing.assert_array_equal(mean_pool([np.array([[1.0, 3.0]])], {0}), [[1, 3]])

    def test_pair(self):
        heads = [np.array([[1.0, 3.0]]), np.array([[3.0, 5.0]])]
        np.testing.assert_array_equal(mean_pool(heads, {0, 1}), [[2, 4]])

    def test_identical(self):
        M = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(mean_pool([M, M, M], {0, 1, 2}), M)

    def test_empty_group(self):
        with pytest.raises(PartitionError):
            mean_pool([np.zeros((1, 1))], set())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mean_pool([np.zeros((1, 2)), np.zeros((2, 1))], {0, 1})


class TestLayerWse:
    def test_singletons_zero(self, layer6):
        assert layer_wse(layer6, LayerGrouping.singletons(6)) == 0.0

    def test_hand_example(self):
        layer = LayerWeights([[[2.0]], [[4.0]]], [[[0.0]], [[0.0]]])
        # pooled K = 3; (2-3)^2 + (4-3)^2 = 2
        assert layer_wse(layer, LayerGrouping.single_group(2)) == 2.0

    def test_refinement(self):
        layer = random_layer(4, 99)
        coarse = LayerGrouping.from_groups([(0, 1, 2), (3,)], 4)
        fine = LayerGrouping.from_groups([(0, 2), (1,), (3,)], 4)
        assert layer_wse(layer, coarse) >= layer_wse(layer, fine)
        assert layer_wse(layer, coarse) == pytest.approx(brute_wse(layer, coarse), abs=1e-12)
        assert layer_wse(layer, fine) == pytest.approx(brute_wse(layer, fine), abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_brute_force_all_partitions(self, seed):
        layer = random_layer(5, seed, d_k=3, d_v=2, d_model=4)
        for g in all_partitions(5):
            assert layer_wse(layer, g) == pytest.approx(brute_wse(layer, g), rel=1e-12, abs=1e-14)

    @pytest.mark.parametrize("H", [3, 4, 5, 6])
    def test_single_group_is_maximum(self, H):
        layer = random_layer(H, 10 + H)
        top = layer_wse(layer, LayerGrouping.single_group(H))
        assert all(layer_wse(layer, g) <= top + 1e-12 for g in all_partitions(H))

    def test_term_weights(self, layer6):
        g = gqa_baseline(6, 2)
        only_k = layer_wse(layer6, g, (1.0, 0.0))
        only_v = layer_wse(layer6, g, (0.0, 1.0))
        assert layer_wse(layer6, g) == pytest.approx(only_k + only_v)
        assert layer_wse(layer6, g, (2.0, 0.5)) == pytest.approx(2 * only_k + 0.5 * only_v)

    def test_wrong_H(self, layer6):
        with pytest.raises(PartitionError):
            layer_wse(layer6, LayerGrouping.singletons(4))

    def test_zero_iff_identical_within_groups(self):
        rng = np.random.default_rng(3)
        base_k = rng.standard_normal((2, 3, 4))
        base_v = rng.standard_normal((2, 2, 4))
        # heads 0,1,2 copy base 0; heads 3,4 copy base 1
        idx = [0, 0, 0, 1, 1]
        layer = LayerWeights(base_k[idx], base_v[idx])
        assert layer_wse(layer, LayerGrouping.from_groups([(0, 1, 2), (3, 4)], 5)) == 0.0
        assert layer_wse(layer, LayerGrouping.from_groups([(0, 1), (2, 3, 4)], 5)) > 0.0
        # identical keys but differing values is still non-zero
        v = base_v[idx].copy()
        v[1] += 1e-3
        layer2 = LayerWeights(base_k[idx], v)
        assert layer_wse(layer2, LayerGrouping.from_groups([(0, 1, 2), (3, 4)], 5)) > 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10**6), st.data())
def test_merge_monotonicity(H, seed, data):
    layer = random_layer(H, seed)
    labels = data.draw(st.lists(st.integers(0, H - 1), min_size=H, max_size=H))
    g = LayerGrouping.from_labels(labels)
    if g.num_groups < 2:
        return
    a, b = data.draw(st.lists(st.integers(0, g.num_groups - 1), min_size=2, max_size=2, unique=True))
    merged_groups = [grp for j, grp in enumerate(g.groups) if j not in (a, b)]
    merged_groups.append(g.groups[a] + g.groups[b])
    merged = LayerGrouping.from_groups(merged_groups, H)
    assert layer_wse(layer, merged) >= layer_wse(layer, g) - 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10**6), st.floats(-5, 5), st.floats(0.1, 10))
def test_translation_and_scale(H, seed, shift, scale):
    layer = random_layer(H, seed)
    rng = np.random.default_rng(seed + 1)
    g = LayerGrouping.from_labels(rng.integers(0, max(1, H // 2), size=H))
    base = layer_wse(layer, g)
    ck = rng.standard_normal(layer.keys.shape[1:]) * shift
    cv = rng.standard_normal(layer.values.shape[1:]) * shift
    shifted = LayerWeights(layer.keys + ck, layer.values + cv)
    assert layer_wse(shifted, g) == pytest.approx(base, rel=1e-9, abs=1e-12)
    scaled = LayerWeights(layer.keys * scale, layer.values * scale)
    assert layer_wse(scaled, g) == pytest.approx(scale**2 * base, rel=1e-9, abs=1e-12)


class TestModelWse:
    def test_all_mha(self, toy_archive):
        assert model_wse(toy_archive, ModelPlan.all_mha(4)) == 0.0

    def test_one_layer(self):
        hand = LayerWeights([[[2.0]], [[4.0]]], [[[0.0]], [[0.0]]])
        archive = WeightArchive([hand, hand, hand])
        plan = ModelPlan((None, LayerGrouping.single_group(2), None))
        assert model_wse(archive, plan) == 2.0

    def test_sum_of_layers(self, toy_archive):
        gs = [gqa_baseline(6, 2), gqa_baseline(6, 3), None, gqa_baseline(6, 1)]
        parts = [layer_wse(l, g) for l, g in zip(toy_archive.layers, gs) if g is not None]
        assert model_wse(toy_archive, ModelPlan(tuple(gs))) == pytest.approx(sum(parts), abs=1e-12)

    def test_length_mismatch(self, toy_archive):
        with pytest.raises(PlanError):
            model_wse(toy_archive, ModelPlan.all_mha(3))


class TestFeatureWse:
    def test_identical_features(self):
        K = np.ones((3, 5, 2))
        assert feature_wse(K, K, LayerGrouping.single_group(3)) == 0.0

    def test_singletons(self):
        rng = np.random.default_rng(0)
        assert feature_wse(rng.random((4, 3, 2)), rng.random((4, 3, 2)), LayerGrouping.singletons(4)) == 0.0

    def test_hand_example(self):
        K = [np.array([[1.0], [1.0]]), np.array([[3.0], [3.0]])]
        V = [np.zeros((2, 1)), np.zeros((2, 1))]
        assert feature_wse(K, V, LayerGrouping.single_group(2)) == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            feature_wse([np.zeros((2, 1)), np.zeros((3, 1))], [np.zeros((2, 1))] * 2, LayerGrouping.singletons(2))


def test_merge_sweep_monotone(layer6):
    levels = merge_sweep(layer6)
    assert [k for k, _, _ in levels] == list(range(1, 7))
    ws = [w for _, w, _ in levels]
    assert all(b <= a for a, b in zip(ws, ws[1:]))
    assert ws[-1] == 0.0
    assert levels[0][2] == LayerGrouping.single_group(6)
