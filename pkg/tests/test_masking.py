import numpy as np
import pytest

from melboot.masking import (
    DegenerateMaskError,
    PatchMask,
    clone_masks,
    interpolate_mask,
    inverse_block_mask,
)
from melboot.rng import make_rng
from melboot.tensor import DimensionError


def test_exact_count_16x16():
    for seed in range(50):
        mask = inverse_block_mask(make_rng(seed), 16, 16, ratio=0.8, block=4)
        assert mask.masked_count == 205  # round(0.8 * 256)


def test_single_block_case():
    # unmasked budget == block^2: the visible region is one contiguous square
    # 5x5 grid, ratio such that unmasked = 4, block = 2
    ratio = 21 / 25
    mask = inverse_block_mask(make_rng(0), 5, 5, ratio=ratio, block=2)
    assert mask.masked_count == 21
    vis = ~mask.grid
    rows, cols = np.nonzero(vis)
    assert vis.sum() == 4
    assert rows.max() - rows.min() == 1 and cols.max() - cols.min() == 1


def test_unmasked_region_is_blocks_plus_singletons():
    # every visible cell sits inside some fully visible block x block window,
    # except for fewer than block^2 singleton leftovers
    for seed in range(20):
        block = 2
        mask = inverse_block_mask(make_rng(seed), 8, 8, ratio=0.8, block=block)
        vis = ~mask.grid
        covered = np.zeros_like(vis)
        for i in range(8 - block + 1):
            for j in range(8 - block + 1):
                if vis[i : i + block, j : j + block].all():
                    covered[i : i + block, j : j + block] = True
        singles = vis & ~covered
        assert singles.sum() < block * block


def test_per_cell_frequency_matches_ratio():
    # Monte Carlo over seeds. Each draw masks exactly round(0.8 * 64) cells,
    # so the cell-averaged frequency is pinned; individual cells vary because
    # uniform block corners visit edges less often than the interior.
    n = 2000
    counts = np.zeros((8, 8))
    for seed in range(n):
        grid = inverse_block_mask(make_rng(seed), 8, 8, ratio=0.8, block=2).grid
        assert grid.sum() == round(0.8 * 64)
        counts += grid
    freq = counts / n
    assert abs(freq.mean() - round(0.8 * 64) / 64) < 1e-12
    sigma = np.sqrt(0.8 * 0.2 / n)
    assert np.all(freq > 0.8 - 12 * sigma) and np.all(freq < 0.8 + 16 * sigma)


def test_degenerate_ratios_rejected():
    with pytest.raises(DegenerateMaskError):
        inverse_block_mask(make_rng(0), 2, 2, ratio=0.01, block=1)
    with pytest.raises(DegenerateMaskError):
        inverse_block_mask(make_rng(0), 2, 2, ratio=0.99, block=1)
    with pytest.raises(ValueError, match="ratio"):
        inverse_block_mask(make_rng(0), 4, 4, ratio=1.5, block=2)
    with pytest.raises(ValueError, match="block"):
        inverse_block_mask(make_rng(0), 4, 4, ratio=0.5, block=5)


# ----------------------------------------------------------------------
# interpolation


def test_interpolate_identity():
    mask = inverse_block_mask(make_rng(1), 4, 4, ratio=0.75, block=2)
    np.testing.assert_array_equal(interpolate_mask(mask, 4, 4), mask.grid)


def test_interpolate_checkerboard():
    mask = PatchMask(grid=np.array([[True, False], [False, True]]), target_ratio=0.5, block_size=1)
    up = interpolate_mask(mask, 4, 4)
    expect = np.array(
        [
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [0, 0, 1, 1],
        ],
        dtype=bool,
    )
    np.testing.assert_array_equal(up, expect)


def test_interpolate_roundtrip_and_fraction():
    for seed in range(10):
        mask = inverse_block_mask(make_rng(seed, "interp"), 4, 4, ratio=0.75, block=2)
        up = interpolate_mask(mask, 8, 12)
        assert up.mean() == mask.grid.mean()
        down = up.reshape(4, 2, 4, 3).all(axis=(1, 3))
        np.testing.assert_array_equal(down, mask.grid)


def test_interpolate_rejects_non_integer_ratio():
    mask = PatchMask(grid=np.zeros((4, 4), dtype=bool), target_ratio=0.5, block_size=1)
    with pytest.raises(DimensionError):
        interpolate_mask(mask, 6, 8)


# ----------------------------------------------------------------------
# clone batches


def test_clone_single():
    batch = clone_masks(make_rng(0), "c", 8, 8, n_clones=1, ratio=0.8, block=2)
    assert len(batch.masks) == 1


def test_clones_distinct_on_large_grid():
    batch = clone_masks(make_rng(3), "c", 16, 16, n_clones=4, ratio=0.8, block=4)
    keys = {m.key() for m in batch.masks}
    assert len(keys) == 4
    assert all(m.masked_count == 205 for m in batch.masks)


def test_clones_deterministic_per_seed():
    a = clone_masks(make_rng(7), "c", 8, 8, n_clones=4, ratio=0.8, block=2)
    b = clone_masks(make_rng(7), "c", 8, 8, n_clones=4, ratio=0.8, block=2)
    for ma, mb in zip(a.masks, b.masks):
        np.testing.assert_array_equal(ma.grid, mb.grid)
