"""Background detection and content-aware multi-crop generation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import CropConfig
from .dataio import SliceImage
from .errors import GeometryError, ValidationError

MIN_IMAGE_SIDE = 8
MIN_CROP_SIDE = 2


@dataclass
class CropBox:
    top: int
    left: int
    height: int
    width: int
    bg_fraction: float
    kind: str = "global"
    fallback: bool = False

    @property
    def center(self):
        return (self.top + (self.height - 1) / 2.0, self.left + (self.width - 1) / 2.0)


@dataclass
class MultiCropSet:
    globals: np.ndarray          # (n_global, R_g, R_g)
    locals: np.ndarray           # (n_local, R_l, R_l)
    global_boxes: list
    local_boxes: list
    source: SliceImage = field(repr=False, default=None)

    @property
    def offsets(self):
        return [(b.top, b.left) for b in self.global_boxes]


def background_mask(pixels, tau_bg=0.05, tau_var=0.01, k=5) -> np.ndarray:
    """True where a pixel is dark and its ``k x k`` neighbourhood is flat."""
    x = np.asarray(pixels, dtype=np.float64)
    mean = ndimage.uniform_filter(x, size=k, mode="reflect")
    sq = ndimage.uniform_filter(x * x, size=k, mode="reflect")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return (x < tau_bg) & (std < tau_var)


def background_fraction(pixels, tau_bg=0.05, tau_var=0.01, k=5) -> float:
    return float(background_mask(pixels, tau_bg, tau_var, k).mean())


def make_slice(pixels, source=(None, None), cfg: CropConfig | None = None) -> SliceImage:
    cfg = cfg or CropConfig()
    pixels = np.clip(np.asarray(pixels, dtype=np.float32), 0.0, 1.0)
    bg = background_mask(pixels, cfg.tau_bg, cfg.tau_var, cfg.var_window)
    return SliceImage(pixels=pixels, foreground=~bg, source=source)


def admit_image(img: SliceImage, max_bg: float = 0.5) -> bool:
    """False iff more than ``max_bg`` of the image is uniform background."""
    return float((~img.foreground).mean()) <= max_bg


class _BgIntegral:
    # Summed-area table so each candidate box costs O(1).
    def __init__(self, foreground):
        bg = (~foreground).astype(np.int64)
        self.table = np.zeros((bg.shape[0] + 1, bg.shape[1] + 1), dtype=np.int64)
        self.table[1:, 1:] = bg.cumsum(0).cumsum(1)

    def fraction(self, top, left, h, w):
        t = self.table
        s = t[top + h, left + w] - t[top, left + w] - t[top + h, left] + t[top, left]
        return float(s) / (h * w)


def _propose(H, W, scale_range, aspect, rng):
    area = rng.uniform(*scale_range) * H * W
    ar = rng.uniform(*aspect)
    w = int(round(np.sqrt(area * ar)))
    h = int(round(np.sqrt(area / ar)))
    h = min(max(h, MIN_CROP_SIDE), H)
    w = min(max(w, MIN_CROP_SIDE), W)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return top, left, h, w


def sample_crop(img: SliceImage, kind, scale_range, rng, max_attempts=20, max_bg=0.7,
                aspect=(3 / 4, 4 / 3), content_aware=True, _integral=None) -> CropBox:
    """Rejection-sample a crop whose background fraction is at most ``max_bg``.

    After ``max_attempts`` misses the attempt with the least background is
    returned with ``fallback=True``. With ``content_aware=False`` the first
    proposal is returned as is.
    """
    H, W = img.pixels.shape
    if H < MIN_IMAGE_SIDE or W < MIN_IMAGE_SIDE:
        raise GeometryError(f"image {H}x{W} is smaller than the minimum {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    integral = _integral or _BgIntegral(img.foreground)
    best = None
    for _ in range(max_attempts if content_aware else 1):
        top, left, h, w = _propose(H, W, scale_range, aspect, rng)
        bg = integral.fraction(top, left, h, w)
        box = CropBox(top, left, h, w, bg, kind)
        if not content_aware or bg <= max_bg:
            return box
        if best is None or bg < best.bg_fraction:
            best = box
    best.fallback = True
    return best


def resize(x, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def _jitter(x, jcfg, rng):
    if jcfg.p_brightness_contrast > 0 and rng.random() < jcfg.p_brightness_contrast:
        c = rng.uniform(1.0 - jcfg.contrast, 1.0 + jcfg.contrast)
        b = rng.uniform(-jcfg.brightness, jcfg.brightness)
        m = float(x.mean())
        x = np.clip((x - m) * c + m + b, 0.0, 1.0).astype(np.float32)
    if jcfg.p_blur > 0 and rng.random() < jcfg.p_blur:
        sigma = rng.uniform(*jcfg.blur_sigma)
        x = ndimage.gaussian_filter(x, sigma=sigma, mode="reflect").astype(np.float32)
    return x


def make_multicrop(img: SliceImage, cfg: CropConfig, rng, R_g=None, R_l=None) -> MultiCropSet:
    """Two global and eight local crops (counts from ``cfg``), resized bilinearly."""
    R_g = R_g or cfg.R_g
    R_l = R_l or cfg.R_l
    if R_l >= R_g:
        raise GeometryError(f"local size {R_l} must be below global size {R_g}")
    if cfg.enabled and not admit_image(img, cfg.admit_max_bg):
        raise ValidationError("image is background-dominated and would be discarded", field="img")
    integral = _BgIntegral(img.foreground)
    kw = dict(max_attempts=cfg.max_attempts, max_bg=cfg.crop_max_bg, aspect=tuple(cfg.aspect),
              content_aware=cfg.enabled, _integral=integral)
    gboxes = [sample_crop(img, "global", cfg.global_scale, rng, **kw) for _ in range(cfg.n_global)]
    lboxes = [sample_crop(img, "local", cfg.local_scale, rng, **kw) for _ in range(cfg.n_local)]

    def render(box, size):
        sub = img.pixels[box.top:box.top + box.height, box.left:box.left + box.width]
        return _jitter(resize(sub, size), cfg.jitter, rng)

    g = np.stack([render(b, R_g) for b in gboxes]) if gboxes else np.zeros((0, R_g, R_g), np.float32)
    l = np.stack([render(b, R_l) for b in lboxes]) if lboxes else np.zeros((0, R_l, R_l), np.float32)
    return MultiCropSet(g, l, gboxes, lboxes, img)
