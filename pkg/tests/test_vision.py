import numpy as np
import pytest

from vtcompress.numeric import softmax
from vtcompress.vision import (
    RegionSelection,
    ScaleMenu,
    ScaleSpec,
    SelectorParams,
    choose_scale,
    compress_inference,
    compress_training,
    default_menu,
    flatten_grid,
    init_selector_params,
    params_from_array,
    params_to_array,
    partition,
    retain_discard_menu,
    selection_heatmap,
    selector_logits,
    selector_score,
    seven_branch_menu,
)


def forcing_params(menu, index, num_global_tokens):
    """Zero weight plus a dominant bias: the selector always picks ``index``."""
    bias = np.zeros(len(menu))
    bias[index] = 100.0
    return SelectorParams(np.zeros((len(menu), num_global_tokens)), bias)


class TestMenus:
    def test_default_menu_token_counts(self):
        menu = default_menu(4)
        assert menu.token_counts == (1, 4, 16)

    def test_default_menu_small_window_drops_kernels(self):
        assert default_menu(2).token_counts == (1, 4)

    def test_default_menu_large_windows(self):
        assert default_menu(8).token_counts == (4, 16, 64)
        assert default_menu(12).token_counts == (9, 36, 144)

    def test_seven_branch_counts(self):
        menu = seven_branch_menu(4)
        assert menu.token_counts == (1, 2, 2, 4, 8, 8, 16)
        assert [s.kernel for s in menu.scales] == [
            (4, 4), (4, 2), (2, 4), (2, 2), (2, 1), (1, 2), (1, 1)
        ]

    def test_retain_discard_menu(self):
        menu = retain_discard_menu()
        assert menu.window == 1
        assert menu.token_counts == (0, 1)

    def test_single_scale_menu_rejected(self):
        with pytest.raises(ValueError, match="at least two"):
            ScaleMenu(4, (ScaleSpec((1, 1)),))

    def test_non_dividing_kernel_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            ScaleMenu(4, (ScaleSpec((3, 3)), ScaleSpec((1, 1))))

    def test_wrong_order_rejected(self):
        with pytest.raises(ValueError, match="coarsest first"):
            ScaleMenu(4, (ScaleSpec((1, 1)), ScaleSpec((4, 4))))


class TestSelectorParams:
    def test_init_bounds_and_seeding(self):
        p = init_selector_params(3, 16, seed=5)
        q = init_selector_params(3, 16, seed=5)
        limit = 1.0 / 4.0
        assert np.all(np.abs(p.weight) <= limit)
        np.testing.assert_array_equal(p.weight, q.weight)
        np.testing.assert_array_equal(p.bias, np.zeros(3))

    def test_selw_array_round_trip(self):
        p = init_selector_params(3, 7, seed=1)
        arr = params_to_array(p)
        assert arr.shape == (3, 8)
        back = params_from_array(arr)
        np.testing.assert_array_equal(back.weight, p.weight)
        np.testing.assert_array_equal(back.bias, p.bias)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="bias length"):
            SelectorParams(np.zeros((3, 4)), np.zeros(2))


class TestPartition:
    def test_counts(self):
        assert len(partition(np.zeros((8, 8, 2)), 4)) == 4
        assert len(partition(np.zeros((24, 24, 1)), 4)) == 36

    def test_identity_window(self):
        fm = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
        blocks = partition(fm, 4)
        assert len(blocks) == 1
        np.testing.assert_array_equal(blocks[0], fm)

    def test_reconstruction(self):
        rng = np.random.default_rng(0)
        fm = rng.random((8, 12, 2))
        blocks = partition(fm, 4)
        rebuilt = np.zeros_like(fm)
        cols = 12 // 4
        for r, block in enumerate(blocks):
            bi, bj = divmod(r, cols)
            rebuilt[bi * 4 : bi * 4 + 4, bj * 4 : bj * 4 + 4] = block
        np.testing.assert_array_equal(rebuilt, fm)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            partition(np.zeros((9, 8, 1)), 4)


class TestSelectorScore:
    def test_zero_block(self):
        g = np.random.default_rng(1).random((5, 3))
        np.testing.assert_array_equal(selector_score(np.zeros((4, 4, 3)), g), np.zeros(5))

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        block = rng.random((4, 4, 3))
        g = rng.random((6, 3))
        pooled = block.mean(axis=(0, 1))
        expected = np.array([sum(pooled[c] * g[k, c] for c in range(3)) for k in range(6)])
        np.testing.assert_allclose(selector_score(block, g), expected, atol=1e-12)

    def test_one_hot_global_row(self):
        rng = np.random.default_rng(3)
        block = rng.random((2, 2, 4))
        g = np.zeros((1, 4))
        g[0, 2] = 1.0
        np.testing.assert_allclose(
            selector_score(block, g), [block.mean(axis=(0, 1))[2]], atol=1e-15
        )

    def test_max_pool_mode(self):
        rng = np.random.default_rng(4)
        block = rng.random((4, 4, 2))
        g = rng.random((3, 2))
        pooled = block.max(axis=(0, 1))
        expected = g @ pooled
        np.testing.assert_allclose(selector_score(block, g, pool="max"), expected, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            selector_score(np.zeros((2, 2, 3)), np.zeros((4, 2)))


class TestSelectorLogits:
    def test_zero_weight_returns_bias(self):
        params = SelectorParams(np.zeros((3, 4)), np.array([0.1, 0.2, 0.3]))
        np.testing.assert_array_equal(
            selector_logits(np.ones(4), params), [0.1, 0.2, 0.3]
        )

    def test_identity_weight(self):
        params = SelectorParams(np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(selector_logits([1.0, 2.0], params), [1.0, 2.0])

    def test_random_case_matches_affine(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((3, 7))
        b = rng.standard_normal(3)
        s = rng.standard_normal(7)
        np.testing.assert_allclose(
            selector_logits(s, SelectorParams(w, b)), w @ s + b, atol=1e-12
        )


class TestChooseScale:
    def test_hand_softmax(self):
        j, probs = choose_scale([2.0, 1.0, 0.0])
        assert j == 0
        np.testing.assert_allclose(probs, [0.6652, 0.2447, 0.0900], atol=1e-4)

    def test_tie_breaks_to_lowest_index(self):
        j, _ = choose_scale([0.0, 0.0, 0.0])
        assert j == 0

    def test_shift_and_positive_scale_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            z = rng.standard_normal(4)
            j, _ = choose_scale(z)
            assert choose_scale(z + 3.7)[0] == j
            assert choose_scale(z * 2.5)[0] == j


class TestCompressInference:
    def test_coarsest_everywhere(self):
        rng = np.random.default_rng(7)
        fm = rng.random((24, 24, 2))
        g = rng.random((4, 2))
        menu = default_menu(4)
        params = forcing_params(menu, 0, 4)
        tokens, selections = compress_inference(fm, g, params, menu)
        assert tokens.shape == (36, 2)
        assert all(sel.scale == 0 for sel in selections)

    def test_identity_scale_reproduces_input(self):
        rng = np.random.default_rng(8)
        fm = rng.random((8, 8, 3))
        g = rng.random((4, 3))
        menu = default_menu(4)
        params = forcing_params(menu, 2, 4)
        tokens, _ = compress_inference(fm, g, params, menu)
        blocks = partition(fm, 4)
        expected = np.concatenate([b.reshape(-1, 3) for b in blocks])
        np.testing.assert_array_equal(tokens, expected)

    def test_constant_map_emits_constant_tokens(self):
        fm = np.full((8, 8, 2), 1.5)
        g = np.random.default_rng(9).random((4, 2))
        menu = default_menu(4)
        params = init_selector_params(3, 4, seed=0)
        tokens, _ = compress_inference(fm, g, params, menu)
        np.testing.assert_array_equal(tokens, np.full_like(tokens, 1.5))

    def test_token_count_matches_selection_sum(self):
        rng = np.random.default_rng(10)
        fm = rng.random((12, 12, 2))
        g = rng.random((9, 2))
        menu = default_menu(4)
        params = init_selector_params(3, 9, seed=3)
        tokens, selections = compress_inference(fm, g, params, menu)
        counts = menu.token_counts
        assert tokens.shape[0] == sum(counts[s.scale] for s in selections)
        assert len(selections) * min(counts) <= tokens.shape[0] <= len(selections) * max(counts)

    def test_emitted_values_come_from_source_region(self):
        rng = np.random.default_rng(11)
        fm = rng.random((8, 8, 2))
        g = rng.random((4, 2))
        menu = default_menu(4)
        params = init_selector_params(3, 4, seed=1)
        tokens, selections = compress_inference(fm, g, params, menu)
        blocks = partition(fm, 4)
        offset = 0
        for sel in selections:
            group = tokens[offset : offset + sel.token_count]
            offset += sel.token_count
            for tok in group:
                for c, value in enumerate(tok):
                    assert value in blocks[sel.region][:, :, c]

    def test_region_permutation_equivariance(self):
        rng = np.random.default_rng(12)
        fm = rng.random((8, 8, 2))
        g = rng.random((4, 2))
        menu = default_menu(4)
        params = init_selector_params(3, 4, seed=2)
        _, selections = compress_inference(fm, g, params, menu)

        # swap the two top regions in the map and recompute
        swapped = fm.copy()
        swapped[0:4, 0:4], swapped[0:4, 4:8] = fm[0:4, 4:8].copy(), fm[0:4, 0:4].copy()
        _, sel2 = compress_inference(swapped, g, params, menu)
        assert sel2[0].scale == selections[1].scale
        assert sel2[1].scale == selections[0].scale
        assert sel2[2].scale == selections[2].scale

    def test_forced_per_region_and_discard(self):
        rng = np.random.default_rng(13)
        fm = rng.random((8, 8, 2))
        g = rng.random((4, 2))
        menu = ScaleMenu(4, (ScaleSpec(None, discard=True), ScaleSpec((4, 4)), ScaleSpec((1, 1))))
        params = init_selector_params(3, 4, seed=4)
        tokens, selections = compress_inference(
            fm, g, params, menu, force_scales=[0, 1, 2, 0]
        )
        assert [s.token_count for s in selections] == [0, 1, 16, 0]
        assert tokens.shape == (17, 2)


class TestCompressTraining:
    def test_weighted_equals_prob_times_inference(self):
        rng = np.random.default_rng(14)
        fm = rng.random((8, 8, 3))
        g = rng.random((6, 3))
        menu = default_menu(4)
        params = init_selector_params(3, 6, seed=5)
        inf, sels = compress_inference(fm, g, params, menu)
        train, sels2 = compress_training(fm, g, params, menu)
        offset = 0
        for a, b in zip(sels, sels2):
            assert a.scale == b.scale
            group_inf = inf[offset : offset + a.token_count]
            group_train = train[offset : offset + a.token_count]
            np.testing.assert_array_equal(group_train, a.top1_prob * group_inf)
            offset += a.token_count

    def test_dominant_logit_limit(self):
        rng = np.random.default_rng(15)
        fm = rng.random((4, 4, 2))
        g = rng.random((2, 2))
        menu = default_menu(4)
        params = forcing_params(menu, 0, 2)  # bias 100 -> top-1 prob ~ 1
        inf, _ = compress_inference(fm, g, params, menu)
        train, _ = compress_training(fm, g, params, menu)
        np.testing.assert_allclose(train, inf, atol=1e-12)

    def test_uniform_logits_scale_by_third(self):
        fm = np.random.default_rng(16).random((4, 4, 2))
        g = np.zeros((2, 2))  # zero global -> zero scores -> logits = bias = 0
        menu = default_menu(4)
        params = SelectorParams(np.zeros((3, 2)), np.zeros(3))
        inf, _ = compress_inference(fm, g, params, menu)
        train, _ = compress_training(fm, g, params, menu)
        np.testing.assert_allclose(train, inf / 3.0, atol=1e-15)


class TestSelectionHeatmap:
    def test_fills_patches_with_kept_fraction(self):
        menu = default_menu(4)
        probs = softmax(np.zeros(3))
        selections = [
            RegionSelection(0, 0, probs, 1),
            RegionSelection(1, 2, probs, 16),
            RegionSelection(2, 1, probs, 4),
            RegionSelection(3, 0, probs, 1),
        ]
        grid = selection_heatmap(selections, menu, (2, 2))
        assert grid.shape == (8, 8)
        assert grid[0, 0] == 1 / 16
        assert grid[0, 4] == 1.0
        assert grid[4, 0] == 4 / 16
        assert grid[4, 4] == 1 / 16
