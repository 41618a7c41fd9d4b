"""Inverse block masking over the final patch grid.

Start fully masked, carve out random block x block windows until one more
block would overshoot the unmasked budget, then unmask random single patches
to land exactly on round(ratio * P) masked cells. The exact-count rule keeps
loss denominators constant across samples.

Convention: True = masked. Feature injection multiplies by (1 - mask).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError


class DegenerateMaskError(ValueError):
    """Requested ratio leaves nothing masked or nothing visible."""


@dataclass
class PatchMask:
    grid: np.ndarray  # bool [grid_h, grid_w], True = masked
    target_ratio: float
    block_size: int

    @property
    def masked_count(self) -> int:
        return int(self.grid.sum())

    @property
    def total(self) -> int:
        return self.grid.size

    def flat(self) -> np.ndarray:
        """Row-major boolean vector over flattened patch indices."""
        return self.grid.reshape(-1)

    def key(self) -> bytes:
        return self.grid.tobytes()


@dataclass
class CloneBatch:
    clip_id: str
    masks: list[PatchMask]


def inverse_block_mask(
    rng: np.random.Generator, grid_h: int, grid_w: int, ratio: float = 0.8, block: int = 2
) -> PatchMask:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    if block < 1 or block > min(grid_h, grid_w):
        raise ValueError(f"block {block} does not fit a {grid_h}x{grid_w} grid")
    total = grid_h * grid_w
    target_masked = int(round(ratio * total))
    if target_masked == 0 or target_masked == total:
        raise DegenerateMaskError(f"ratio {ratio} on {total} patches masks {target_masked} cells")
    target_unmasked = total - target_masked

    grid = np.ones((grid_h, grid_w), dtype=bool)
    unmasked = 0
    budget = 100 * total  # probabilistic loop; bound it for pathological grids
    while unmasked + block * block <= target_unmasked and budget > 0:
        top = int(rng.integers(0, grid_h - block + 1))
        left = int(rng.integers(0, grid_w - block + 1))
        grid[top : top + block, left : left + block] = False
        unmasked = total - int(grid.sum())
        budget -= 1

    # finish with random singletons for an exact count
    deficit = target_unmasked - unmasked
    if deficit > 0:
        masked_idx = np.flatnonzero(grid.reshape(-1))
        chosen = rng.choice(masked_idx, size=deficit, replace=False)
        grid.reshape(-1)[chosen] = False

    assert int(grid.sum()) == target_masked
    return PatchMask(grid=grid, target_ratio=ratio, block_size=block)


def interpolate_mask(mask: PatchMask, level_h: int, level_w: int) -> np.ndarray:
    """Nearest-neighbor upsampling of the mask grid to a finer level."""
    gh, gw = mask.grid.shape
    if level_h % gh or level_w % gw:
        raise DimensionError(
            f"level dims {level_h}x{level_w} are not integer multiples of mask grid {gh}x{gw}"
        )
    return np.kron(mask.grid, np.ones((level_h // gh, level_w // gw), dtype=bool))


def clone_masks(
    rng: np.random.Generator,
    clip_id: str,
    grid_h: int,
    grid_w: int,
    n_clones: int = 4,
    ratio: float = 0.8,
    block: int = 2,
    max_retries: int = 50,
) -> CloneBatch:
    """Independent mask draws for one clip; collisions are redrawn."""
    if n_clones < 1:
        raise ValueError("need at least one clone")
    masks: list[PatchMask] = []
    seen: set[bytes] = set()
    for _ in range(n_clones):
        mask = inverse_block_mask(rng, grid_h, grid_w, ratio, block)
        retries = 0
        while mask.key() in seen and retries < max_retries:
            mask = inverse_block_mask(rng, grid_h, grid_w, ratio, block)
            retries += 1
        # tiny grids can have fewer distinct configurations than clones;
        # after max_retries a duplicate is accepted
        seen.add(mask.key())
        masks.append(mask)
    return CloneBatch(clip_id=clip_id, masks=masks)
