"""Blockwise patch masking with an anatomy-centred Gaussian prior.

Blocks follow the iBOT recipe (geometric area, log-uniform aspect). Only the
location of each block changes: in ``gaussian`` mode block centres are drawn
from a discrete Gaussian over the patch grid centred on the foreground of the
source image, corrected for where the global crop was taken.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .cropper import CropBox
from .dataio import SliceImage
from .errors import GeometryError, ValidationError


@dataclass
class GaussianPrior:
    center: tuple                 # (row, col) in patch units, clamped to the grid
    sigma: tuple                  # (row, col) in patch units; inf means uniform
    raw_center: tuple = None      # before clamping
    degenerate: bool = False

    @classmethod
    def uniform(cls, grid):
        c = (grid[0] / 2.0, grid[1] / 2.0)
        return cls(c, (math.inf, math.inf), c)

    @property
    def is_uniform(self):
        return math.isinf(self.sigma[0]) and math.isinf(self.sigma[1])

    def density(self, grid) -> np.ndarray:
        """Normalised prior mass of each patch cell (evaluated at cell centres)."""
        g_r, g_c = grid
        if self.is_uniform:
            return np.full((g_r, g_c), 1.0 / (g_r * g_c))
        r = (np.arange(g_r) + 0.5 - self.center[0]) / self.sigma[0]
        c = (np.arange(g_c) + 0.5 - self.center[1]) / self.sigma[1]
        d = np.exp(-0.5 * (r[:, None] ** 2 + c[None, :] ** 2))
        return d / d.sum()

    def distance(self, grid) -> np.ndarray:
        g_r, g_c = grid
        if self.is_uniform:
            return np.zeros((g_r, g_c))
        r = (np.arange(g_r) + 0.5 - self.center[0]) / self.sigma[0]
        c = (np.arange(g_c) + 0.5 - self.center[1]) / self.sigma[1]
        return np.sqrt(r[:, None] ** 2 + c[None, :] ** 2)


@dataclass
class PatchMask:
    grid: np.ndarray              # bool (g_r, g_c)
    target_ratio: float
    blocks: list = field(default_factory=list, repr=False)   # (top, left, h, w), clipped
    trimmed: int = 0
    greedy_filled: int = 0

    @property
    def realized_ratio(self) -> float:
        return float(self.grid.mean())

    @property
    def shape(self):
        return self.grid.shape


def prior_from_crop(img: SliceImage, crop: CropBox, grid, fixed_sigma=None) -> GaussianPrior:
    """Gaussian prior on the crop's patch grid, centred on the image's foreground centroid."""
    H, W = img.pixels.shape
    if crop.top < 0 or crop.left < 0 or crop.top + crop.height > H or crop.left + crop.width > W:
        raise GeometryError(f"crop {crop} does not lie inside a {H}x{W} image")
    g_r, g_c = grid
    fg = img.foreground
    sub = fg[crop.top:crop.top + crop.height, crop.left:crop.left + crop.width]
    if not sub.any():
        return GaussianPrior((g_r / 2.0, g_c / 2.0), (g_r / 4.0, g_c / 4.0), (g_r / 2.0, g_c / 2.0), degenerate=True)
    rows, cols = np.nonzero(fg)
    per_r = crop.height / g_r      # source pixels per patch
    per_c = crop.width / g_c
    raw = ((rows.mean() - crop.top) / per_r, (cols.mean() - crop.left) / per_c)
    center = (min(max(raw[0], 0.0), float(g_r)), min(max(raw[1], 0.0), float(g_c)))
    if fixed_sigma is not None:
        sigma = (float(fixed_sigma), float(fixed_sigma))
    else:
        srows, scols = np.nonzero(sub)
        half_r = (srows.max() - srows.min() + 1) / 2.0 / per_r
        half_c = (scols.max() - scols.min() + 1) / 2.0 / per_c
        sigma = (max(half_r, 1.0), max(half_c, 1.0))
    return GaussianPrior(center, sigma, raw)


def _block_shapes(n, mean_block_area, aspect_bounds, grid, rng):
    area = rng.geometric(1.0 / mean_block_area, size=n).astype(np.float64)
    log_ar = rng.uniform(math.log(aspect_bounds[0]), math.log(aspect_bounds[1]), size=n)
    ar = np.exp(log_ar)
    h = np.clip(np.rint(np.sqrt(area * ar)), 1, grid[0]).astype(np.int64)
    w = np.clip(np.rint(np.sqrt(area / ar)), 1, grid[1]).astype(np.int64)
    return h, w


def sample_mask(grid, target_ratio, prior: GaussianPrior, rng, mean_block_area=4.0,
                aspect_bounds=(0.3, 1 / 0.3)) -> PatchMask:
    """Blockwise mask with ``ceil(target_ratio * cells)`` masked patches.

    Blocks are OR-ed in until the target is reached (at most ``10 * cells``
    proposals, then the densest unmasked cells are filled); the overshoot is
    removed from the cells farthest from the prior centre.
    """
    if not 0.0 < target_ratio < 1.0:
        raise ValidationError("must lie in (0, 1)", field="target_ratio")
    g_r, g_c = int(grid[0]), int(grid[1])
    cells = g_r * g_c
    need = int(math.ceil(target_ratio * cells - 1e-9))
    cap = 10 * cells
    h, w = _block_shapes(cap, mean_block_area, aspect_bounds, (g_r, g_c), rng)
    if prior.is_uniform:
        # Tops range over every placement that touches the grid, so each cell
        # is covered by the same number of placements.
        tops = np.floor(rng.random(cap) * (g_r + h - 1)).astype(np.int64) - (h - 1)
        lefts = np.floor(rng.random(cap) * (g_c + w - 1)).astype(np.int64) - (w - 1)
    else:
        dens = prior.density((g_r, g_c)).ravel()
        cdf = np.cumsum(dens)
        idx = np.minimum(np.searchsorted(cdf, rng.random(cap) * cdf[-1], side="right"), cells - 1)
        tops = idx // g_c - h // 2
        lefts = idx % g_c - w // 2
    keys = rng.random(cells)

    m, used = kernels.rasterize_blocks(tops, lefts, h, w, g_r, g_c, need)
    mask = m.astype(bool)
    blocks = []
    for i in range(used):
        r0, r1 = max(tops[i], 0), min(tops[i] + h[i], g_r)
        c0, c1 = max(lefts[i], 0), min(lefts[i] + w[i], g_c)
        if r0 < r1 and c0 < c1:
            blocks.append((int(r0), int(c0), int(r1 - r0), int(c1 - c0)))

    flat = mask.ravel()
    greedy = 0
    count = int(flat.sum())
    if count < need:
        dens = prior.density((g_r, g_c)).ravel()
        order = np.lexsort((keys, -dens))
        for i in order:
            if count >= need:
                break
            if not flat[i]:
                flat[i] = True
                count += 1
                greedy += 1
    trimmed = 0
    if count > need:
        dist = prior.distance((g_r, g_c)).ravel()
        masked = np.flatnonzero(flat)
        order = masked[np.lexsort((keys[masked], -dist[masked]))]
        drop = order[: count - need]
        flat[drop] = False
        trimmed = len(drop)
    return PatchMask(flat.reshape(g_r, g_c), float(target_ratio), blocks, trimmed, greedy)


def apply_mask(tokens, mask, mask_token):
    """Replace masked rows of a ``(cells, dim)`` token matrix by ``mask_token``.

    Accepts a :class:`PatchMask` or a boolean array; batched ``(B, cells, dim)``
    tokens take a ``(B, cells)`` mask.
    """
    grid = mask.grid if isinstance(mask, PatchMask) else mask
    m = torch.as_tensor(np.asarray(grid) if not torch.is_tensor(grid) else grid, dtype=torch.bool)
    if tokens.dim() == 2:
        m = m.reshape(-1)
        if m.numel() != tokens.shape[0]:
            raise GeometryError(f"mask has {m.numel()} cells but there are {tokens.shape[0]} tokens")
        return torch.where(m[:, None], mask_token.to(tokens.dtype)[None, :], tokens)
    m = m.reshape(tokens.shape[0], -1)
    if m.shape[1] != tokens.shape[1]:
        raise GeometryError(f"mask has {m.shape[1]} cells but there are {tokens.shape[1]} tokens")
    return torch.where(m[..., None], mask_token.to(tokens.dtype), tokens)
