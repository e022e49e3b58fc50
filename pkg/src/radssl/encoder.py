"""Single-channel Vision Transformer, DINO/iBOT projection heads and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import functools
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ChecksumError, GeometryError, HeaderError, TruncatedPayloadError, ValidationError
from .masker import apply_mask

CKPT_MAGIC = b"RCKP0001"


@dataclass
class TokenEmbeddings:
    cls: torch.Tensor        # (dim,) or (B, dim)
    patches: torch.Tensor    # (cells, dim) or (B, cells, dim)


# --- bicubic resampling ---------------------------------------------------

def _cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def _point_row(k, n):
    # Sample k of a length-n signal as weights over the n real samples.
    # Out-of-range samples use the cubic-convolution boundary extrapolation
    # f(-1) = 3 f(0) - 3 f(1) + f(2), which reproduces quadratics.
    row = np.zeros(n)
    if 0 <= k < n:
        row[k] = 1.0
        return row
    if n == 1:
        row[0] = 1.0
        return row
    if k < 0:
        if n == 2:
            return 2 * _point_row(k + 1, n) - _point_row(k + 2, n)
        return 3 * _point_row(k + 1, n) - 3 * _point_row(k + 2, n) + _point_row(k + 3, n)
    if n == 2:
        return 2 * _point_row(k - 1, n) - _point_row(k - 2, n)
    return 3 * _point_row(k - 1, n) - 3 * _point_row(k - 2, n) + _point_row(k - 3, n)


@functools.lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` Keys cubic-convolution resampling matrix (half-pixel centres)."""
    if n_in == n_out:
        return np.eye(n_in)
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        j = math.floor(src)
        t = src - j
        for k, wk in zip(range(j - 1, j + 3), (_cubic(1 + t), _cubic(t), _cubic(1 - t), _cubic(2 - t))):
            if wk != 0.0:
                A[i] += wk * _point_row(k, n_in)
    A.setflags(write=False)
    return A


def resample_grid(grid: torch.Tensor, new_hw) -> torch.Tensor:
    """Bicubically resample a ``(g_r, g_c, dim)`` tensor to ``new_hw``."""
    g_r, g_c, _ = grid.shape
    n_r, n_c = new_hw
    if (g_r, g_c) == (n_r, n_c):
        return grid
    Ar = torch.tensor(bicubic_matrix(g_r, n_r), dtype=grid.dtype)
    Ac = torch.tensor(bicubic_matrix(g_c, n_c), dtype=grid.dtype)
    return torch.einsum("ri,ijd,cj->rcd", Ar, grid, Ac)


# --- network --------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.image_size % cfg.patch_size:
            raise GeometryError(f"image_size {cfg.image_size} is not divisible by patch_size {cfg.patch_size}")
        if cfg.dim % cfg.heads:
            raise ValidationError("must be divisible by heads", field="dim")
        self.cfg = cfg
        g = cfg.image_size // cfg.patch_size
        self.grid = (g, g)
        self.patch_embed = nn.Linear(cfg.patch_size**2, cfg.dim)
        self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(g * g + 1, cfg.dim))
        self.blocks = nn.ModuleList([Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_linear)

    def patchify(self, images):
        B, H, W = images.shape
        p = self.cfg.patch_size
        if H % p or W % p:
            raise GeometryError(f"image {H}x{W} is not divisible into {p}x{p} patches")
        x = images.reshape(B, H // p, p, W // p, p).permute(0, 1, 3, 2, 4)
        return x.reshape(B, (H // p) * (W // p), p * p)

    def pos_for(self, grid):
        if tuple(grid) == self.grid:
            return self.pos_embed
        patch = self.pos_embed[1:].reshape(self.grid[0], self.grid[1], -1)
        patch = resample_grid(patch, grid).reshape(grid[0] * grid[1], -1)
        return torch.cat([self.pos_embed[:1], patch], dim=0)

    def forward(self, images, masks=None, interpolate=False):
        """Return ``(cls (B, dim), patches (B, cells, dim))``.

        ``masks`` is a ``(B, cells)`` boolean tensor (or ``None``). Inputs
        whose patch grid differs from the positional grid raise unless
        ``interpolate`` is set, in which case positions are resampled.
        """
        if images.dim() == 2:
            images = images[None]
        grid = (images.shape[1] // self.cfg.patch_size, images.shape[2] // self.cfg.patch_size)
        if grid != self.grid and not interpolate:
            raise GeometryError(f"expected a {self.grid[0]}x{self.grid[1]} patch grid, got {grid[0]}x{grid[1]}")
        x = self.patch_embed(self.patchify(images))
        if masks is not None:
            x = apply_mask(x, masks, self.mask_token)
        pos = self.pos_for(grid)
        cls = (self.cls_token + pos[0]).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x + pos[1:]], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]


def _init_linear(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class ProjectionHead(nn.Module):
    """MLP to a bottleneck, L2 normalisation, then K unit-norm prototypes."""

    def __init__(self, dim, hidden, bottleneck, prototypes, layers=3):
        super().__init__()
        if layers == 1:
            mods = [nn.Linear(dim, bottleneck)]
        else:
            mods = [nn.Linear(dim, hidden), nn.GELU()]
            for _ in range(layers - 2):
                mods += [nn.Linear(hidden, hidden), nn.GELU()]
            mods.append(nn.Linear(hidden, bottleneck))
        self.mlp = nn.Sequential(*mods)
        self.prototypes = nn.Parameter(torch.empty(prototypes, bottleneck))
        self.apply(_init_linear)
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def forward(self, x):
        return prototype_logits(self.mlp(x), self.prototypes)


def prototype_logits(z, prototypes):
    return F.normalize(z, dim=-1) @ F.normalize(prototypes, dim=-1).t()


def head_logits(head: ProjectionHead, embedding):
    return head(embedding)


class SSLModel(nn.Module):
    """Backbone plus the DINO (class token) and iBOT (patch token) heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Encoder(cfg)
        hd = (cfg.dim, cfg.head_hidden, cfg.head_bottleneck, cfg.head_prototypes, cfg.head_layers)
        self.dino_head = ProjectionHead(*hd)
        self.ibot_head = ProjectionHead(*hd)


def forward(model, image, mask=None, interpolate=False) -> TokenEmbeddings:
    """Token embeddings of a single ``(H, W)`` image (inference mode)."""
    backbone = model.backbone if isinstance(model, SSLModel) else model
    img = torch.as_tensor(np.asarray(image), dtype=next(backbone.parameters()).dtype)
    m = None
    if mask is not None:
        grid = mask.grid if hasattr(mask, "grid") else mask
        m = torch.as_tensor(np.asarray(grid), dtype=torch.bool).reshape(1, -1)
    with torch.no_grad():
        cls, patches = backbone(img[None], m, interpolate=interpolate)
    return TokenEmbeddings(cls[0], patches[0])


def interpolate_pos_embed(model, new_image_size):
    """Copy of ``model`` whose positional grid fits ``new_image_size``."""
    cfg = model.cfg
    if new_image_size % cfg.patch_size:
        raise GeometryError(f"image size {new_image_size} is not divisible by patch size {cfg.patch_size}")
    new = copy.deepcopy(model)
    enc = new.backbone if isinstance(new, SSLModel) else new
    if new_image_size == cfg.image_size:
        return new
    g = new_image_size // cfg.patch_size
    with torch.no_grad():
        pos = enc.pos_for((g, g)).detach().clone()
    enc.pos_embed = nn.Parameter(pos)
    enc.grid = (g, g)
    new_cfg = dataclasses.replace(cfg, image_size=new_image_size)
    enc.cfg = new_cfg
    new.cfg = new_cfg
    return new


def parameter_count(cfg: ModelConfig, heads: bool = True) -> int:
    """Closed-form trainable-parameter count (one copy)."""
    d, p, g = cfg.dim, cfg.patch_size, cfg.image_size // cfg.patch_size
    hidden = int(d * cfg.mlp_ratio)
    block = 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    enc = (p * p * d + d) + 2 * d + (g * g + 1) * d + cfg.depth * block + 2 * d
    if not heads:
        return enc
    H, Bn, K, L = cfg.head_hidden, cfg.head_bottleneck, cfg.head_prototypes, cfg.head_layers
    if L == 1:
        mlp = d * Bn + Bn
    else:
        mlp = (d * H + H) + (L - 2) * (H * H + H) + (H * Bn + Bn)
    return enc + 2 * (mlp + K * Bn)


# --- checkpoint container -------------------------------------------------

@dataclass
class Checkpoint:
    """Student and teacher weights plus teacher centres.

    On disk (``RCKP0001``): 8-byte magic, 4-byte little-endian manifest
    length, UTF-8 JSON manifest, the tensors as little-endian float32 in
    manifest order, then a 4-byte CRC32 of the tensor bytes. The manifest holds
    ``config`` (run config), ``model`` (encoder config), ``step``, ``stage``
    and ``tensors`` (a list of ``{name, shape, offset, nbytes}``).
    """
    model_cfg: ModelConfig
    student: dict
    teacher: dict
    center: torch.Tensor
    center_patch: torch.Tensor
    step: int = 0
    stage: str = "pretrain"
    config: dict = dataclasses.field(default_factory=dict)

    def build(self, which="teacher", dtype=torch.float32) -> SSLModel:
        m = SSLModel(self.model_cfg)
        m.load_state_dict(self.student if which == "student" else self.teacher)
        return m.to(dtype)

    def tensors(self):
        out = {}
        for k, v in self.student.items():
            out["student." + k] = v
        for k, v in self.teacher.items():
            out["teacher." + k] = v
        out["center"] = self.center
        out["center_patch"] = self.center_patch
        return out


def checkpoint_from_models(student, teacher, center, center_patch, step, stage, config) -> Checkpoint:
    return Checkpoint(
        model_cfg=student.cfg,
        student={k: v.detach().to(torch.float32).clone() for k, v in student.state_dict().items()},
        teacher={k: v.detach().to(torch.float32).clone() for k, v in teacher.state_dict().items()},
        center=center.detach().to(torch.float32).clone(),
        center_patch=center_patch.detach().to(torch.float32).clone(),
        step=int(step), stage=stage, config=config,
    )


def save_checkpoint(ckpt: Checkpoint, path):
    entries, chunks, offset = [], [], 0
    for name, t in ckpt.tensors().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format": "RCKP", "version": 1,
        "config": ckpt.config, "model": dataclasses.asdict(ckpt.model_cfg),
        "step": ckpt.step, "stage": ckpt.stage, "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        fh.write(data)
        fh.write(struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:8] != CKPT_MAGIC:
        raise HeaderError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"{path}: unreadable manifest ({e})") from None
    data = blob[12 + mlen:]
    total = sum(e["nbytes"] for e in manifest["tensors"])
    if len(data) < total + 4:
        raise TruncatedPayloadError(f"{path}: expected {total} tensor bytes, found {max(len(data) - 4, 0)}")
    (crc,) = struct.unpack("<I", data[total:total + 4])
    if zlib.crc32(data[:total]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    student, teacher, extra = {}, {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.float32))
        name = e["name"]
        if name.startswith("student."):
            student[name[8:]] = t
        elif name.startswith("teacher."):
            teacher[name[8:]] = t
        else:
            extra[name] = t
    return Checkpoint(
        model_cfg=ModelConfig(**manifest["model"]), student=student, teacher=teacher,
        center=extra["center"], center_patch=extra["center_patch"],
        step=manifest["step"], stage=manifest["stage"], config=manifest["config"],
    )
