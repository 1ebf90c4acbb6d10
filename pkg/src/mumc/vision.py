"""Patchification, random patch masking, patch embedding, positional interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange HxWx3 pixels into (P, patch_size*patch_size*3) rows.

    Row-major patch order (top-left to bottom-right); lossless.
    """
    h, w = image.shape[:2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = image.reshape(rows, patch_size, cols, patch_size, 3)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * cols, patch_size * patch_size * 3)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """Inverse of patchify."""
    rows, cols = grid
    x = patches.reshape(rows, cols, patch_size, patch_size, 3)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * patch_size, cols * patch_size, 3)


def mask_patches(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Drop exactly floor(mask_ratio * P) uniformly chosen patches; return sorted survivors."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    n_drop = math.floor(mask_ratio * n_patches)
    if n_drop == 0:
        return np.arange(n_patches, dtype=np.int64)
    dropped = rng.choice(n_patches, size=n_drop, replace=False)
    keep = np.ones(n_patches, dtype=bool)
    keep[dropped] = False
    return np.nonzero(keep)[0].astype(np.int64)


def interpolate_positions(
    table: torch.Tensor, source_grid: tuple[int, int], target_grid: tuple[int, int]
) -> torch.Tensor:
    """Bilinearly resample the spatial rows of a (P+1, D) positional table.

    Row 0 ([CLS]) is copied unchanged; the remaining rows are treated as a
    source_grid map of D-vectors and interpolated to target_grid.
    """
    rows, cols = source_grid
    t_rows, t_cols = target_grid
    if rows < 1 or cols < 1 or t_rows < 1 or t_cols < 1:
        raise ValueError("grids must be at least 1x1")
    if table.shape[0] != rows * cols + 1:
        raise ValueError(f"table has {table.shape[0]} rows, expected {rows * cols + 1}")
    cls_row = table[:1]
    spatial = table[1:].reshape(rows, cols, -1).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(spatial, size=(t_rows, t_cols), mode="bilinear", align_corners=False)
    resized = resized.squeeze(0).permute(1, 2, 0).reshape(t_rows * t_cols, -1)
    return torch.cat([cls_row, resized], dim=0)


@dataclass
class PatchSequence:
    """Kept-patch embeddings with a prepended [CLS] row.

    embeddings: (B, K+1, D) with row 0 the [CLS] embedding;
    kept_indices: (B, K) sorted indices into the full patch grid.
    """

    embeddings: torch.Tensor
    kept_indices: torch.Tensor
    grid: tuple[int, int]


class PatchEmbed(nn.Module):
    """Linear patch projection + learned [CLS] row + learned 2D positional table."""

    def __init__(self, patch_dim: int, hidden: int, grid: tuple[int, int]):
        super().__init__()
        self.grid = grid
        n_patches = grid[0] * grid[1]
        self.proj = nn.Linear(patch_dim, hidden)
        self.cls = nn.Parameter(torch.zeros(hidden))
        self.pos = nn.Parameter(torch.zeros(n_patches + 1, hidden))

    def forward(self, patches: torch.Tensor, kept_indices: torch.Tensor) -> PatchSequence:
        """patches: (B, P, patch_dim); kept_indices: (B, K) sorted ints."""
        b, n_patches, _ = patches.shape
        if n_patches != self.grid[0] * self.grid[1]:
            raise ValueError(
                f"got {n_patches} patches for grid {self.grid[0]}x{self.grid[1]}"
            )
        if kept_indices.numel() and int(kept_indices.max()) >= n_patches:
            raise ValueError("kept index out of range")
        gather = kept_indices.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        x = self.proj(torch.gather(patches, 1, gather))
        x = x + self.pos[1:][kept_indices]
        cls = (self.cls + self.pos[0]).expand(b, 1, -1)
        emb = torch.cat([cls, x], dim=1)
        return PatchSequence(embeddings=emb, kept_indices=kept_indices, grid=self.grid)

    def interpolate_to(self, target_grid: tuple[int, int]) -> torch.Tensor:
        return interpolate_positions(self.pos, self.grid, target_grid)
