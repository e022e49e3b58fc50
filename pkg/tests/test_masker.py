import math

import numpy as np
import pytest
import torch
from scipy import stats

from radssl.cropper import CropBox, make_slice
from radssl.errors import GeometryError, ValidationError
from radssl.masker import GaussianPrior, PatchMask, apply_mask, prior_from_crop, sample_mask


def _blob_image(center=(40, 40), half=6, n=96):
    img = np.zeros((n, n), np.float32)
    img[center[0] - half:center[0] + half, center[1] - half:center[1] + half] = 0.8
    return make_slice(img)


def _frequency(prior, n=2000, grid=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    acc = np.zeros(grid)
    for _ in range(n):
        acc += sample_mask(grid, 0.4, prior, rng).grid
    return acc / n


def test_prior_center_offset_arithmetic():
    img = np.zeros((96, 96), np.float32)
    img[39:42, 39:42] = 0.9                      # centroid exactly (40, 40)
    s = make_slice(img)
    rows, cols = np.nonzero(s.foreground)
    assert rows.mean() == 40 and cols.mean() == 40
    crop = CropBox(20, 20, 64, 64, 0.0)
    p = prior_from_crop(s, crop, (8, 8))         # patch size 8 px
    assert p.center == (2.5, 2.5)


def test_full_crop_center_is_image_centroid():
    s = _blob_image((30, 50))
    p = prior_from_crop(s, CropBox(0, 0, 96, 96, 0.0), (12, 12))
    rows, cols = np.nonzero(s.foreground)
    assert p.center == pytest.approx((rows.mean() / 8, cols.mean() / 8))


def test_offset_correction_property(rng):
    s = _blob_image((50, 44), half=10)
    full = prior_from_crop(s, CropBox(0, 0, 96, 96, 0.0), (12, 12))
    for _ in range(50):
        top, left = rng.integers(0, 33, 2)
        crop = CropBox(int(top), int(left), 64, 64, 0.0)
        p = prior_from_crop(s, crop, (8, 8))
        # same pixel scale (8 px per patch): raw centre shifts by the offset in patch units
        assert p.raw_center == pytest.approx((full.raw_center[0] - top / 8, full.raw_center[1] - left / 8))


def test_zero_foreground_crop_is_degenerate():
    s = _blob_image((80, 80), half=4)
    p = prior_from_crop(s, CropBox(0, 0, 32, 32, 1.0), (4, 4))
    assert p.degenerate and p.center == (2.0, 2.0) and p.sigma == (1.0, 1.0)


def test_crop_outside_image():
    with pytest.raises(GeometryError):
        prior_from_crop(_blob_image(), CropBox(80, 0, 32, 32, 0.0), (4, 4))


def test_sigma_floor_and_fixed():
    s = _blob_image((40, 40), half=1)
    assert prior_from_crop(s, CropBox(0, 0, 96, 96, 0.0), (12, 12)).sigma == (1.0, 1.0)
    assert prior_from_crop(s, CropBox(0, 0, 96, 96, 0.0), (12, 12), fixed_sigma=3).sigma == (3.0, 3.0)


@pytest.mark.parametrize("mode", ["gaussian", "uniform"])
def test_ratio_within_tolerance(mode, rng):
    prior = GaussianPrior((8, 8), (3, 3)) if mode == "gaussian" else GaussianPrior.uniform((16, 16))
    for _ in range(200):
        m = sample_mask((16, 16), 0.4, prior, rng)
        assert abs(m.realized_ratio - 0.4) <= 2 / 256
        assert int(m.grid.sum()) in (102, 103)


def test_various_grids_and_ratios(rng):
    for g in [(4, 4), (5, 7), (16, 16), (2, 9)]:
        for r in (0.1, 0.5, 0.9):
            m = sample_mask(g, r, GaussianPrior((g[0] / 2, g[1] / 2), (1.5, 2.0)), rng)
            assert abs(m.realized_ratio - r) <= 2 / (g[0] * g[1])


def test_mask_is_union_of_blocks_before_trimming(rng):
    prior = GaussianPrior((8, 8), (3, 3))
    for _ in range(50):
        m = sample_mask((16, 16), 0.4, prior, rng)
        union = np.zeros((16, 16), bool)
        for t, l, h, w in m.blocks:
            union[t:t + h, l:l + w] = True
        # trimming only removes cells, greedy filling only adds
        assert not (m.grid & ~union).sum() > m.greedy_filled
        assert (union & ~m.grid).sum() == m.trimmed


def test_invalid_ratio(rng):
    for r in (0.0, 1.0, -0.1):
        with pytest.raises(ValidationError):
            sample_mask((4, 4), r, GaussianPrior.uniform((4, 4)), rng)


def test_deterministic():
    p = GaussianPrior((6, 9), (2, 3))
    a = sample_mask((16, 16), 0.4, p, np.random.default_rng(9))
    b = sample_mask((16, 16), 0.4, p, np.random.default_rng(9))
    assert np.array_equal(a.grid, b.grid)


def test_gaussian_prior_concentrates():
    prior = GaussianPrior((8, 8), (3, 3))
    f = _frequency(prior)
    corr = np.corrcoef(f.ravel(), prior.density((16, 16)).ravel())[0, 1]
    assert corr >= 0.6
    center = f[7:9, 7:9].mean()
    for c in (f[0, 0], f[0, -1], f[-1, 0], f[-1, -1]):
        assert center > c


def test_uniform_prior_flat():
    f = _frequency(GaussianPrior.uniform((16, 16)))
    counts = f.ravel() * 2000
    chi2, p = stats.chisquare(counts)
    assert p > 0.01
    sd = math.sqrt(0.4 * 0.6 / 2000)
    assert np.all(np.abs(f - 0.4) < 3 * sd + 0.01)


def test_apply_mask_cases():
    tok = torch.arange(16 * 3, dtype=torch.float64).reshape(16, 3)
    mt = torch.tensor([-1.0, -2.0, -3.0], dtype=torch.float64)
    empty = np.zeros((4, 4), bool)
    assert torch.equal(apply_mask(tok, empty, mt), tok)
    row = np.zeros((4, 4), bool)
    row[2] = True
    out = apply_mask(tok, PatchMask(row, 0.25), mt)
    changed = (out != tok).any(1)
    assert int(changed.sum()) == 4 and torch.equal(out[8:12], mt.expand(4, 3))
    assert torch.equal(out[~changed], tok[~changed])


def test_apply_mask_count_at_ratio(rng):
    tok = torch.randn(256, 8)
    m = sample_mask((16, 16), 0.4, GaussianPrior.uniform((16, 16)), rng)
    out = apply_mask(tok, m, torch.full((8,), 7.0))
    assert int((out == 7.0).all(1).sum()) in (102, 103)


def test_apply_mask_shape_mismatch():
    with pytest.raises(GeometryError):
        apply_mask(torch.zeros(10, 2), np.zeros((4, 4), bool), torch.zeros(2))


def test_apply_mask_batched():
    tok = torch.randn(3, 4, 2)
    m = torch.tensor([[1, 0, 0, 0], [0, 0, 0, 0], [1, 1, 1, 1]], dtype=torch.bool)
    out = apply_mask(tok, m, torch.zeros(2))
    assert torch.equal(out[1], tok[1]) and (out[2] == 0).all() and (out[0, 0] == 0).all()
