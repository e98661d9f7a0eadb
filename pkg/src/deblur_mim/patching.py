"""Patch extraction, random patch masking and fixed positional embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size < 1 or height % patch_size or width % patch_size:
            raise PatchError(
                f"patch size {patch_size} does not divide image {height}x{width}")
        return cls(patch_size, height // patch_size, width // patch_size)

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """Split an image into flattened p x p patches in row-major grid order.

    Accepts [H, W] (returns [N, p*p]) or a batch [B, H, W] (returns
    [B, N, p*p]).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise PatchError(f"expected [H, W] or [B, H, W], got shape {img.shape}")
    h, w = img.shape[-2:]
    grid = PatchGrid.for_image(h, w, p)
    lead = img.shape[:-2]
    x = img.reshape(lead + (grid.rows, p, grid.cols, p))
    x = np.moveaxis(x, -3, -2)  # [..., rows, cols, p, p]
    return x.reshape(lead + (grid.num_patches, p * p))


def unpatchify(patches: np.ndarray, p: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    grid = PatchGrid.for_image(height, width, p)
    if patches.shape[-2:] != (grid.num_patches, p * p):
        raise PatchError(
            f"patch array {patches.shape} does not match a {height}x{width} image with p={p}")
    lead = patches.shape[:-2]
    x = patches.reshape(lead + (grid.rows, grid.cols, p, p))
    x = np.moveaxis(x, -2, -3)
    return x.reshape(lead + (height, width))


@dataclass(frozen=True)
class PatchMask:
    """Which patches of one sample are visible to the encoder."""

    visible: np.ndarray
    masked: np.ndarray
    ratio: float
    permutation: np.ndarray

    @property
    def num_patches(self) -> int:
        return len(self.visible) + len(self.masked)

    @property
    def restore_order(self) -> np.ndarray:
        """Index that maps [visible..., masked...] back to grid order."""
        return np.argsort(np.concatenate([self.visible, self.masked]), kind="stable")


def num_masked(n: int, ratio: float) -> int:
    """``floor(ratio * n)`` on the decimal value of ``ratio``.

    Plain float products land just below integers (0.29 * 100 = 28.999...),
    so the ratio is read back through its shortest repr first.
    """
    return math.floor(Fraction(repr(float(ratio))) * n)


def random_mask(n: int, ratio: float, rng: np.random.Generator) -> PatchMask:
    """Mask ``floor(ratio * n)`` patches chosen by a uniform random permutation."""
    if not 0.0 <= ratio < 1.0:
        raise PatchError(f"mask ratio must lie in [0, 1), got {ratio}")
    if n < 1:
        raise PatchError(f"need at least one patch, got {n}")
    perm = rng.permutation(n)
    k = num_masked(n, ratio)
    return PatchMask(
        visible=np.sort(perm[k:]),
        masked=np.sort(perm[:k]),
        ratio=float(ratio),
        permutation=perm,
    )


def full_mask(n: int) -> PatchMask:
    """Every patch visible."""
    idx = np.arange(n)
    return PatchMask(visible=idx, masked=idx[:0], ratio=0.0, permutation=idx)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(dim: int, grid_rows: int, grid_cols: int | None = None) -> np.ndarray:
    """Fixed 2-D sine-cosine embeddings, one row per patch in grid order.

    Half the channels encode the row coordinate, half the column.
    """
    if dim % 4:
        raise PatchError(f"embedding dim must be divisible by 4, got {dim}")
    if grid_cols is None:
        grid_cols = grid_rows
    rr, cc = np.meshgrid(np.arange(grid_rows, dtype=np.float64),
                         np.arange(grid_cols, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rr), _sincos_1d(dim // 2, cc)], axis=1)
