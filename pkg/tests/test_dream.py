import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from realm.dream import (DreamConfig, PatchGrid, ScaleMap, accumulate_scale, compute_realness_map,
                         extract_positions, fuse_scales, load_grid, normalize_map, patch_realness,
                         render_heatmap, save_grid)
from realm.embedding import EmbeddingVector
from realm.errors import InvalidInputError

import oracles


# positions ---------------------------------------------------------------

def test_positions_divisible():
    grid = extract_positions((64, 64), 32, 4)
    assert len(grid) == 81


def test_positions_full_frame():
    grid = extract_positions((10, 10), 10, 4)
    assert grid.positions.tolist() == [[0, 0]]


def test_positions_edge_aligned():
    grid = extract_positions((70, 70), 32, 4)
    xs = sorted(set(grid.positions[:, 0].tolist()))
    assert 38 in xs and 36 in xs
    # frozen from oracles.axis_starts: 11 starts per axis
    assert len(grid) == 121


def test_positions_row_major_unique():
    grid = extract_positions((50, 37), 8, 3)
    keys = [(y, x) for x, y in grid.positions.tolist()]
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)
    assert np.all(grid.boxes()[:, 2] <= 37) and np.all(grid.boxes()[:, 3] <= 50)


def test_window_too_big_skips():
    assert extract_positions((20, 40), 32, 4) is None


@settings(max_examples=80, deadline=None)
@given(h=st.integers(1, 60), w=st.integers(1, 60), window=st.integers(1, 60), stride=st.integers(1, 9))
def test_coverage_matches_oracle(h, w, window, stride):
    grid = extract_positions((h, w), window, stride)
    if window > min(h, w):
        assert grid is None
        return
    sm = accumulate_scale(grid, np.ones(len(grid)))
    assert sm.count_grid.min() >= 1
    np.testing.assert_array_equal(sm.count_grid, oracles.covering_counts(h, w, window, stride))


# patch realness ------------------------------------------------------------

@pytest.mark.parametrize("v, expected", [([1, 0], 0.0), ([0, 1], 1.0), ([-1, 0], 2.0)])
def test_patch_realness(v, expected):
    assert patch_realness(EmbeddingVector([1, 0]), EmbeddingVector(v)) == pytest.approx(expected, abs=1e-12)


def test_patch_realness_dim_mismatch():
    with pytest.raises(InvalidInputError):
        patch_realness(EmbeddingVector([1, 0]), EmbeddingVector([1, 0, 0]))


# accumulation ----------------------------------------------------------------

def test_two_patch_mean():
    grid = PatchGrid(2, 1, np.array([[0, 0], [1, 0]]), (2, 3))
    sm = accumulate_scale(grid, [0.2, 0.4])
    assert sm.mean_grid[0, 1] == pytest.approx(0.3)
    assert sm.mean_grid[0, 0] == pytest.approx(0.2)
    assert sm.mean_grid[1, 2] == pytest.approx(0.4)


def test_constant_scores_constant_map():
    grid = extract_positions((30, 30), 8, 4)
    sm = accumulate_scale(grid, np.full(len(grid), 0.7))
    np.testing.assert_allclose(sm.mean_grid, 0.7, atol=1e-12)


def test_accumulate_vs_brute_force():
    rng = np.random.default_rng(11)
    grid = extract_positions((48, 48), 16, 4)
    scores = rng.uniform(0, 2, len(grid))
    sm = accumulate_scale(grid, scores)
    ref = oracles.per_pixel_mean(48, 48, 16, grid.positions.tolist(), scores.tolist())
    np.testing.assert_allclose(sm.mean_grid, ref, atol=1e-6)
    np.testing.assert_array_equal(sm.mean_grid, sm.sum_grid / sm.count_grid)


def test_accumulate_length_mismatch():
    grid = extract_positions((16, 16), 8, 4)
    with pytest.raises(InvalidInputError):
        accumulate_scale(grid, [0.1])


def test_permutation_safety():
    rng = np.random.default_rng(5)
    grid = extract_positions((40, 33), 8, 4)
    scores = rng.uniform(0, 2, len(grid))
    perm = rng.permutation(len(grid))
    shuffled = PatchGrid(grid.window, grid.stride, grid.positions[perm], grid.image_size)
    a = accumulate_scale(grid, scores)
    b = accumulate_scale(shuffled, scores[perm])
    np.testing.assert_allclose(a.mean_grid, b.mean_grid, atol=1e-12)
    np.testing.assert_array_equal(a.count_grid, b.count_grid)


# fusion / normalization ----------------------------------------------------

def _const_map(window, value, shape=(4, 4)):
    g = np.full(shape, float(value))
    return ScaleMap(window, g, np.ones(shape, np.int64), g)


def test_fuse_max_and_min():
    maps = [_const_map(32, 0.2), _const_map(64, 0.5), _const_map(128, 0.4)]
    assert np.all(fuse_scales(maps) == 0.5)
    assert np.all(fuse_scales(maps, "min") == 0.2)
    assert np.array_equal(fuse_scales(maps[:1]), maps[0].mean_grid)


def test_fuse_errors():
    with pytest.raises(InvalidInputError):
        fuse_scales([])
    with pytest.raises(InvalidInputError):
        fuse_scales([_const_map(8, 0.1), _const_map(8, 0.1, (3, 3))])


def test_normalize_examples():
    np.testing.assert_allclose(normalize_map(np.array([0.5, 1.0, 1.5])), [0.0, 0.5, 1.0])
    assert np.all(normalize_map(np.full((3, 3), 0.8)) == 0.5)
    unit = np.array([[0.0, 0.25], [1.0, 0.5]])
    np.testing.assert_array_equal(normalize_map(unit), unit)


def test_normalize_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        normalize_map(np.array([0.0, np.inf]))


# pipeline ------------------------------------------------------------------

def test_defaults_use_all_scales(make_mock):
    rmap = compute_realness_map(np.zeros((256, 256, 3)), "x", make_mock(regions=[((0, 0, 64, 64), np.eye(8)[0])]))
    assert rmap.scales_used == [128, 64, 32]
    assert DreamConfig().stride == 4


def test_oversized_scales_skipped(make_mock):
    rmap = compute_realness_map(np.zeros((40, 50)), "x", make_mock(), DreamConfig(windows=(64, 32, 16)))
    assert rmap.scales_used == [32, 16]


def test_full_frame_fallback(make_mock):
    rmap = compute_realness_map(np.zeros((6, 9)), "x", make_mock(), DreamConfig(windows=(32,)))
    assert rmap.full_frame and rmap.scales_used == []
    assert rmap.final_grid.shape == (6, 9)
    assert np.all(rmap.final_grid == 0.5)


def test_empty_image_rejected(make_mock):
    with pytest.raises(InvalidInputError):
        compute_realness_map(np.zeros((0, 5)), "x", make_mock())


def test_text_equal_to_base_gives_uniform_half(make_mock):
    backend = make_mock(text_axis=1, base_axis=1)
    rmap = compute_realness_map(np.zeros((48, 48)), "x", backend, DreamConfig(windows=(16, 8)))
    assert np.all(rmap.fused_grid == 0.0)
    assert np.all(rmap.final_grid == 0.5)


def test_planted_region_lower_realness(make_mock):
    backend = make_mock(regions=[((16, 16, 40, 40), np.eye(8)[0])])
    rmap = compute_realness_map(np.zeros((64, 64)), "x", backend, DreamConfig(windows=(16, 8)))
    inside = np.zeros((64, 64), bool)
    inside[16:40, 16:40] = True
    assert rmap.final_grid[inside].mean() < rmap.final_grid[~inside].mean()
    assert rmap.final_grid.min() == 0.0 and rmap.final_grid.max() == 1.0


def test_workers_do_not_change_result(make_mock):
    backend = make_mock(regions=[((10, 5, 30, 25), np.eye(8)[0])])
    cfg = DreamConfig(windows=(16, 8, 4))
    a = compute_realness_map(np.zeros((40, 40)), "x", backend, cfg)
    b = compute_realness_map(np.zeros((40, 40)), "x", backend, cfg, workers=3)
    np.testing.assert_array_equal(a.fused_grid, b.fused_grid)


def test_stride_refinement_constant_field(make_mock):
    backend = make_mock()
    for stride in (4, 2):
        rmap = compute_realness_map(np.zeros((32, 32)), "x", backend, DreamConfig(windows=(8,), stride=stride))
        np.testing.assert_allclose(rmap.fused_grid, 1.0, atol=1e-12)


def test_stride_refinement_bounded(make_mock):
    backend = make_mock(regions=[((8, 8, 24, 20), np.eye(8)[0])])
    coarse = compute_realness_map(np.zeros((32, 32)), "x", backend, DreamConfig(windows=(8,), stride=4))
    fine = compute_realness_map(np.zeros((32, 32)), "x", backend, DreamConfig(windows=(8,), stride=2))
    grid = extract_positions((32, 32), 8, 2)
    vecs = backend.encode_patch_matrix(None, grid.boxes())
    scores = 1 - vecs @ backend.text_vector.values
    spread = scores.max() - scores.min()
    assert np.abs(coarse.fused_grid - fine.fused_grid).max() <= spread + 1e-12


def test_monotone_localization(make_mock):
    """Pulling the region vector toward the text never raises the region's relative realness."""
    inside = np.zeros((48, 48), bool)
    inside[12:30, 12:30] = True
    gaps = []
    for alpha in (0.2, 0.5, 0.8, 1.0):
        vec = alpha * np.eye(8)[0] + (1 - alpha) * np.eye(8)[1]
        backend = make_mock(regions=[((12, 12, 30, 30), vec)])
        fused = compute_realness_map(np.zeros((48, 48)), "x", backend, DreamConfig(windows=(16, 8))).fused_grid
        gaps.append(fused[~inside].mean() - fused[inside].mean())
    assert all(b >= a - 1e-12 for a, b in zip(gaps, gaps[1:]))


# rendering / export --------------------------------------------------------

def _rmap(final):
    from realm.dream import RealnessMap

    return RealnessMap(final, final, [8], "d")


def test_heatmap_uniform_for_half_map():
    from matplotlib import colormaps

    out = render_heatmap(_rmap(np.full((5, 6), 0.5)))
    expected = (np.array(colormaps["RdYlGn"](0.5)[:3]) * 255).round()
    assert np.all(out.heatmap == expected)
    overlay = render_heatmap(_rmap(np.full((5, 6), 0.5)), np.full((5, 6, 3), 100, np.uint8)).overlay
    assert len(np.unique(overlay.reshape(-1, 3), axis=0)) == 1


def test_heatmap_zero_is_colormap_minimum():
    from matplotlib import colormaps

    out = render_heatmap(_rmap(np.array([[0.0, 1.0]])))
    assert np.all(out.heatmap[0, 0] == (np.array(colormaps["RdYlGn"](0.0)[:3]) * 255).round())


def test_heatmap_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        render_heatmap(_rmap(np.zeros((4, 4))), np.zeros((5, 4, 3), np.uint8))


def test_grid_round_trip_bitwise(tmp_path):
    grid = np.random.default_rng(0).random((17, 23))
    save_grid(tmp_path / "g.grid", grid, [128, 64], "text")
    back, header = load_grid(tmp_path / "g.grid")
    assert back.tobytes() == grid.astype("<f8").tobytes()
    assert header["scales_used"] == [128, 64]
    assert (header["height"], header["width"]) == (17, 23)
    assert len(header["description_sha256"]) == 64
