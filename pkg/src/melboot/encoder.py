"""Multi-resolution convolutional stem.

A spectrogram is patchified through a chain of resolution blocks. Block k
embeds patches with a conv whose kernel and stride both equal the ratio of
consecutive resolutions, then runs a shape-preserving conv module (1x1,
5x5 pad 2, 1x1; GELU after the first two). Intermediate grids are projected
to the final grid shape by single-conv downsample blocks, summed, flattened
row-major into tokens, given positional terms, and prefixed with a CLS token.

Masked operation zeroes features at masked positions after the patch embed
and after every conv in the conv module, then drops masked tokens from the
output sequence, recording which flattened positions survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import PatchMask, interpolate_mask
from .tensor import DimensionError, ParamSet, Tensor


@dataclass(frozen=True)
class ResolutionSpec:
    """Patch sizes per level (strictly increasing, divisibility chain) and
    the feature channel width at each level."""

    resolutions: tuple[int, ...]
    channels: tuple[int, ...]

    def __post_init__(self):
        r, d = self.resolutions, self.channels
        if not r:
            raise ValueError("need at least one resolution level")
        if len(r) != len(d):
            raise ValueError(f"{len(r)} resolutions but {len(d)} channel widths")
        if any(x <= 0 for x in r) or any(x <= 0 for x in d):
            raise ValueError("resolutions and channels must be positive")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError(f"resolutions must be strictly increasing, got {r}")
        if any(b % a for a, b in zip(r, r[1:])):
            raise ValueError(f"each resolution must divide the next, got {r}")

    @property
    def n_levels(self) -> int:
        return len(self.resolutions)

    @property
    def final_resolution(self) -> int:
        return self.resolutions[-1]

    @property
    def final_channels(self) -> int:
        return self.channels[-1]

    def check_input(self, t: int, f: int):
        r = self.final_resolution
        if t % r or f % r:
            raise DimensionError(f"input {t}x{f} not divisible by final resolution {r}")

    def grid_shape(self, t: int, f: int) -> tuple[int, int]:
        self.check_input(t, f)
        return t // self.final_resolution, f // self.final_resolution

    def n_patches(self, t: int, f: int) -> int:
        gh, gw = self.grid_shape(t, f)
        return gh * gw


def default_channels(resolutions: tuple[int, ...], final_channels: int) -> tuple[int, ...]:
    """Width ramp: proportional to resolution, rounded to a multiple of 8,
    final level exact."""
    r_final = resolutions[-1]
    widths = []
    for r in resolutions[:-1]:
        w = int(round(final_channels * r / r_final / 8)) * 8
        widths.append(max(w, 8))
    return tuple(widths) + (final_channels,)


@dataclass
class FeatureGrid:
    data: Tensor  # [channels, T/r_k, F/r_k]
    level: int  # 0 = raw spectrogram


@dataclass
class TokenSequence:
    tokens: Tensor  # [L, D]; row 0 is CLS when has_cls
    has_cls: bool
    kept_positions: np.ndarray | None = None  # sorted flattened grid indices

    def __post_init__(self):
        if self.kept_positions is not None:
            self.kept_positions = np.asarray(self.kept_positions, dtype=np.intp)
            if np.any(np.diff(self.kept_positions) <= 0):
                raise ValueError("kept_positions must be sorted and unique")
            expected = len(self.kept_positions) + (1 if self.has_cls else 0)
            if self.tokens.shape[0] != expected:
                raise DimensionError(
                    f"{self.tokens.shape[0]} tokens but {expected} expected from kept_positions"
                )


def sinusoidal_positions(n_positions: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos embedding over the flattened patch index."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


# ----------------------------------------------------------------------
# parameters


def init_multires_params(
    res: ResolutionSpec,
    n_patches: int,
    rng: np.random.Generator,
    dtype=np.float32,
    learnable_pos: bool = False,
) -> ParamSet:
    ps = ParamSet()

    def conv_init(cout, cin, kh, kw):
        std = 1.0 / np.sqrt(cin * kh * kw)
        return Tensor(rng.normal(0.0, std, size=(cout, cin, kh, kw)), requires_grad=True, dtype=dtype)

    def bias(n):
        return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)

    r = (1,) + res.resolutions
    d = (1,) + res.channels
    for k in range(res.n_levels):
        stride = r[k + 1] // r[k]
        ps.add(f"l{k}.pe.w", conv_init(d[k + 1], d[k], stride, stride))
        ps.add(f"l{k}.pe.b", bias(d[k + 1]))
        ps.add(f"l{k}.conv1.w", conv_init(d[k + 1], d[k + 1], 1, 1))
        ps.add(f"l{k}.conv1.b", bias(d[k + 1]))
        ps.add(f"l{k}.conv2.w", conv_init(d[k + 1], d[k + 1], 5, 5))
        ps.add(f"l{k}.conv2.b", bias(d[k + 1]))
        ps.add(f"l{k}.conv3.w", conv_init(d[k + 1], d[k + 1], 1, 1))
        ps.add(f"l{k}.conv3.b", bias(d[k + 1]))
        if k < res.n_levels - 1:
            m = res.final_resolution // res.resolutions[k]
            ps.add(f"l{k}.down.w", conv_init(res.final_channels, d[k + 1], m, m))
            ps.add(f"l{k}.down.b", bias(res.final_channels))
    ps.add("cls", Tensor(rng.normal(0.0, 0.02, size=res.final_channels), requires_grad=True, dtype=dtype))
    if learnable_pos:
        ps.add(
            "pos",
            Tensor(rng.normal(0.0, 0.02, size=(n_patches, res.final_channels)), requires_grad=True, dtype=dtype),
        )
    return ps


def positional_embedding(params: ParamSet, n_patches: int, dim: int, dtype) -> Tensor:
    if "pos" in params:
        return params["pos"]
    return Tensor(sinusoidal_positions(n_patches, dim, dtype))


# ----------------------------------------------------------------------
# forward passes


def _apply_mask(x: Tensor, keep: Tensor | None) -> Tensor:
    return x if keep is None else x * keep


def resolution_block_forward(
    params: ParamSet, level: int, grid: FeatureGrid, mask_at_level: np.ndarray | None
) -> FeatureGrid:
    """One patch-embed + conv-module stage; `mask_at_level` is a boolean
    [T/r_k, F/r_k] grid (True = masked) already interpolated to this level."""
    x = grid.data
    if grid.level != level:
        raise DimensionError(f"expected level-{level} input, got level {grid.level}")
    pe_w = params[f"l{level}.pe.w"]
    stride = pe_w.shape[-1]
    out = T.conv2d(x, pe_w, params[f"l{level}.pe.b"], stride=stride, padding=0)

    keep = None
    if mask_at_level is not None:
        if mask_at_level.shape != out.shape[1:]:
            raise DimensionError(
                f"mask {mask_at_level.shape} does not match level features {out.shape[1:]}"
            )
        keep = Tensor((~mask_at_level).astype(x.dtype)[None, :, :])
    out = _apply_mask(out, keep)
    out = _apply_mask(T.gelu(T.conv2d(out, params[f"l{level}.conv1.w"], params[f"l{level}.conv1.b"])), keep)
    out = _apply_mask(
        T.gelu(T.conv2d(out, params[f"l{level}.conv2.w"], params[f"l{level}.conv2.b"], stride=1, padding=2)),
        keep,
    )
    out = _apply_mask(T.conv2d(out, params[f"l{level}.conv3.w"], params[f"l{level}.conv3.b"]), keep)
    return FeatureGrid(data=out, level=level + 1)


def multires_forward(
    params: ParamSet, res: ResolutionSpec, spec: Tensor, mask: PatchMask | None = None
) -> TokenSequence:
    """Full stem: all resolution blocks, downsample-and-sum, flatten, pos
    embedding, CLS prepend, and (when masked) unmasked-token gathering."""
    if spec.ndim != 2:
        raise DimensionError(f"spectrogram must be [T, F], got {spec.shape}")
    t, f = spec.shape
    gh, gw = res.grid_shape(t, f)
    n_patches = gh * gw
    if mask is not None and mask.grid.shape != (gh, gw):
        raise DimensionError(f"mask grid {mask.grid.shape} != patch grid {(gh, gw)}")

    grid = FeatureGrid(data=T.reshape(spec, (1, t, f)), level=0)
    level_outputs: list[Tensor] = []
    for k in range(res.n_levels):
        mask_k = None
        if mask is not None:
            mask_k = interpolate_mask(mask, t // res.resolutions[k], f // res.resolutions[k])
        grid = resolution_block_forward(params, k, grid, mask_k)
        level_outputs.append(grid.data)

    summed = level_outputs[-1]
    for k in range(res.n_levels - 1):
        m = res.final_resolution // res.resolutions[k]
        down = T.conv2d(level_outputs[k], params[f"l{k}.down.w"], params[f"l{k}.down.b"], stride=m, padding=0)
        summed = summed + down

    d = res.final_channels
    tokens = T.transpose(T.reshape(summed, (d, n_patches)), (1, 0))
    tokens = tokens + positional_embedding(params, n_patches, d, spec.dtype)

    kept = None
    if mask is not None:
        kept = np.flatnonzero(~mask.flat())
        tokens = T.take(tokens, kept)
    cls = T.reshape(params["cls"], (1, d))
    seq = T.concat([cls, tokens], axis=0)
    return TokenSequence(tokens=seq, has_cls=True, kept_positions=kept)
