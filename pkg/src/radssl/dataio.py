"""Synthetic phantom volumes, intensity normalisation and the RVOL container.

A phantom is a single ellipsoidal "body" split into organ compartments: the
dominant organ fills the ellipsoid, and every other organ class sits inside it
as a smaller elliptic cylinder, so each class shows up as its own intensity
plateau. Air is exactly zero, which makes the background of every slice
exactly recoverable by :func:`radssl.cropper.background_mask`.
"""
from __future__ import annotations

import base64
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ChecksumError, HeaderError, TruncatedPayloadError, ValidationError

MAGIC = b"RVOL0001"

# Air sits at 0 and organs in [60, 340], so a [0, 400] CT window keeps air at 0.
PHANTOM_CT_WINDOW = (200.0, 400.0)
DEFAULT_CT_WINDOW = (0.0, 400.0)

_ORGAN_LO, _ORGAN_HI = 60.0, 340.0
# Depth semi-axis as a fraction of half the depth: keeps anatomy in a slab of
# slices so that volume-level and slice-level background differ.
_DEPTH_ASPECT = 0.44


class Modality(str, Enum):
    CT = "CT"
    MR = "MR"


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 2.0)
    modality: Modality = Modality.CT
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.modality = parse_modality(self.modality)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3:
            raise ValidationError(f"expected a 3D array, got shape {self.voxels.shape}", field="voxels")
        d, h, w = self.voxels.shape
        if d < 5:
            raise ValidationError(f"need at least 5 slices, got {d}", field="voxels")
        if h < 8 or w < 8:
            raise ValidationError(f"in-plane size must be >= 8, got {h}x{w}", field="voxels")
        if not np.all(np.isfinite(self.voxels)):
            raise ValidationError("non-finite intensities", field="voxels")
        if len(self.spacing) != 3:
            raise ValidationError("spacing must have 3 entries", field="spacing")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class SliceImage:
    pixels: np.ndarray
    foreground: np.ndarray
    source: tuple = (None, None)


@dataclass
class PhantomSpec:
    num_volumes: int = 16
    grid: tuple = (16, 64, 64)
    organ_count: int = 4
    background_fraction_range: tuple = (0.3, 0.6)
    noise_sigma: float = 8.0
    seed: int = 0
    modality: str = "CT"
    spacing: tuple = (1.0, 1.0, 2.0)

    def validate(self):
        if not isinstance(self.num_volumes, int) or self.num_volumes < 1:
            raise ValidationError("must be a positive integer", field="num_volumes")
        if len(self.grid) != 3:
            raise ValidationError("must be [D, H, W]", field="grid")
        d, h, w = self.grid
        if d < 5:
            raise ValidationError("depth must be >= 5", field="grid")
        if h < 8 or w < 8:
            raise ValidationError("height and width must be >= 8", field="grid")
        if not isinstance(self.organ_count, int) or self.organ_count < 2:
            raise ValidationError("must be an integer >= 2", field="organ_count")
        if self.organ_count > 8:
            raise ValidationError("at most 8 organ classes fit inside one body", field="organ_count")
        lo, hi = self.background_fraction_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValidationError("needs 0 <= lo <= hi <= 1", field="background_fraction_range")
        if not self.noise_sigma >= 0:
            raise ValidationError("must be >= 0", field="noise_sigma")
        if self.modality not in ("CT", "MR", "mixed"):
            raise ValidationError("must be 'CT', 'MR' or 'mixed'", field="modality")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        for k in d:
            if k not in known:
                raise ValidationError("unknown key", field=k)
        spec = cls(**d)
        spec.grid = tuple(spec.grid)
        spec.background_fraction_range = tuple(spec.background_fraction_range)
        spec.spacing = tuple(spec.spacing)
        return spec.validate()

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ValidationError(f"not valid JSON ({e})", field=str(path)) from None


def parse_modality(m) -> Modality:
    try:
        return Modality(m.value if isinstance(m, Modality) else m)
    except ValueError:
        raise ValidationError(f"unknown modality {m!r}", field="modality") from None


def window_normalize(raw, modality, window=DEFAULT_CT_WINDOW, percentiles=(1.0, 99.0)):
    """Map intensities to [0, 1].

    CT: clip to ``[level - width/2, level + width/2]`` then scale.
    MR: clip to the ``percentiles`` of the array then scale.
    A constant input maps to 0.5 everywhere.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValidationError("non-finite intensities", field="raw")
    modality = parse_modality(modality)
    if raw.size == 0 or raw.min() == raw.max():
        return np.full(raw.shape, 0.5)
    if modality is Modality.CT:
        level, width = window
        lo, hi = level - width / 2.0, level + width / 2.0
    else:
        lo, hi = np.percentile(raw, percentiles)
    if hi <= lo:
        return np.full(raw.shape, 0.5)
    return (np.clip(raw, lo, hi) - lo) / (hi - lo)


def normalize_volume(vol: Volume, ct_window=PHANTOM_CT_WINDOW, mr_percentiles=(1.0, 99.0)) -> np.ndarray:
    return window_normalize(vol.voxels, vol.modality, window=tuple(ct_window), percentiles=tuple(mr_percentiles))


def _background_from_foreground(fg: np.ndarray, k: int = 5) -> np.ndarray:
    # Exact stand-in for background_mask when air is 0 and tissue is far above
    # tau_bg: any k x k window touching tissue has std well above tau_var.
    return ~ndimage.maximum_filter(fg, size=(1, k, k), mode="reflect")


def _organ_bands(organ_count: int):
    width = (_ORGAN_HI - _ORGAN_LO) / organ_count
    centers = _ORGAN_LO + width * (np.arange(organ_count) + 0.5)
    return centers, 0.25 * width


def _phantom(spec: PhantomSpec, index: int) -> Volume:
    rng = np.random.default_rng([spec.seed, index])
    D, H, W = spec.grid
    K = spec.organ_count
    primary = int(rng.integers(K))
    target_bg = rng.uniform(*spec.background_fraction_range)
    centers, halfwidth = _organ_bands(K)
    intensity = centers + rng.uniform(-halfwidth, halfwidth, size=K)

    cz = (D - 1) / 2.0 + rng.uniform(-0.05, 0.05) * D
    cy = (H - 1) / 2.0 + rng.uniform(-0.08, 0.08) * H
    cx = (W - 1) / 2.0 + rng.uniform(-0.08, 0.08) * W
    u = rng.uniform(-0.25, 0.25)
    ay, ax = np.exp(u) * H / 2.0, np.exp(-u) * W / 2.0
    az = _DEPTH_ASPECT * D / 2.0
    z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    nz, ny, nx = (z - cz) / az, (y - cy) / ay, (x - cx) / ax
    q = nz**2 + ny**2 + nx**2

    # Background fraction decreases monotonically with the body scale.
    lo_k, hi_k = 0.0, 3.0
    for _ in range(16):
        mid = 0.5 * (lo_k + hi_k)
        if _background_from_foreground(q <= mid * mid).mean() > target_bg:
            lo_k = mid
        else:
            hi_k = mid
    scale = 0.5 * (lo_k + hi_k)
    body = q <= scale * scale

    organ_map = np.zeros((D, H, W), dtype=np.uint8)
    organ_map[body] = primary + 1
    radii = {primary: scale * 0.5 * (ay + ax)}
    others = [c for c in rng.permutation(K).tolist() if c != primary]
    n_sec = len(others)
    rho = 0.35 if n_sec == 1 else min(0.3, 0.5 * np.sin(np.pi / n_sec))
    theta0 = rng.uniform(0, 2 * np.pi)
    for j, c in enumerate(others):
        r = rho * rng.uniform(0.7, 1.0)
        th = theta0 + 2 * np.pi * j / n_sec
        oy, ox = 0.55 * np.sin(th), 0.55 * np.cos(th)
        if scale > 0:
            sec = body & (((ny / scale - oy) ** 2 + (nx / scale - ox) ** 2) <= r * r)
        else:
            sec = np.zeros_like(body)
        organ_map[sec] = c + 1
        radii[c] = r * scale * 0.5 * (ay + ax)

    voxels = np.zeros((D, H, W), dtype=np.float64)
    for c in range(K):
        voxels[organ_map == c + 1] = intensity[c]

    lesion = bool(rng.random() < 0.5)
    if lesion and scale > 0:
        la = rng.uniform(0, 2 * np.pi)
        ld = rng.uniform(0.0, 0.3)
        lr = 0.15
        blob = body & (((ny / scale - ld * np.sin(la)) ** 2 + (nx / scale - ld * np.cos(la)) ** 2) <= lr * lr) \
            & (np.abs(z - np.round(cz)) <= 1)
        voxels[blob] = 0.0
        organ_map[blob] = 0

    tissue = voxels > 0
    if spec.noise_sigma > 0:
        voxels[tissue] += rng.normal(0.0, spec.noise_sigma, size=int(tissue.sum()))

    if spec.modality == "mixed":
        modality = Modality.CT if index % 2 == 0 else Modality.MR
    else:
        modality = Modality(spec.modality)
    if modality is Modality.MR:
        voxels *= 3.0

    sy, sx, _ = spec.spacing
    mean_spacing = 0.5 * (sy + sx)
    primary_radius = radii[primary] * mean_spacing
    # Exponential survival: hazard grows with the dominant organ's radius.
    ref = 0.5 * (H * sy + W * sx) * 0.35
    rate = 0.1 * np.exp(2.0 * (primary_radius - ref) / ref)
    t = rng.exponential(1.0 / rate)
    event = 1
    if rng.random() < 0.3:
        t = t * rng.uniform(0.05, 1.0)
        event = 0

    fg_bg = _background_from_foreground(voxels != 0).mean()
    labels = {
        "organ_class": primary,
        "age": float(sum(radii.values()) * mean_spacing),
        "lesion": int(lesion),
        "survival_time": float(max(t, 1e-6)),
        "survival_event": event,
        "primary_radius": float(primary_radius),
        "background_fraction": float(fg_bg),
        "organ_map": organ_map,
    }
    return Volume(voxels.astype(np.float32), spacing=spec.spacing, modality=modality, labels=labels)


def generate_phantoms(spec: PhantomSpec) -> list[Volume]:
    """Deterministic phantom collection; volume ``i`` depends only on ``(seed, i)``."""
    spec.validate()
    return [_phantom(spec, i) for i in range(spec.num_volumes)]


# --- RVOL container -------------------------------------------------------

def _encode_label(v):
    if isinstance(v, np.ndarray):
        return {"__ndarray__": True, "dtype": v.dtype.str, "shape": list(v.shape),
                "data": base64.b64encode(np.ascontiguousarray(v).tobytes()).decode("ascii")}
    if isinstance(v, np.generic):
        return v.item()
    return v


def _decode_label(v):
    if isinstance(v, dict) and v.get("__ndarray__"):
        buf = base64.b64decode(v["data"])
        return np.frombuffer(buf, dtype=np.dtype(v["dtype"])).reshape(v["shape"]).copy()
    return v


def save_volume(v: Volume, path):
    header = {
        "shape": list(v.voxels.shape),
        "spacing": list(v.spacing),
        "modality": v.modality.value,
        "dtype": "f32",
        "labels": {k: _encode_label(x) for k, x in v.labels.items()},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_volume(path) -> Volume:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise HeaderError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise HeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"{path}: unreadable header ({e})") from None
    for key in ("shape", "spacing", "modality", "dtype", "labels"):
        if key not in header:
            raise HeaderError(f"{path}: header lacks '{key}'")
    if header["dtype"] != "f32":
        raise HeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape)):
        raise HeaderError(f"{path}: bad shape {shape!r}")
    modality = parse_modality(header["modality"])
    n = int(np.prod(shape)) * 4
    body = blob[12 + hlen:]
    if len(body) < n + 4:
        raise TruncatedPayloadError(f"{path}: expected {n} payload bytes plus checksum, found {len(body)}")
    payload = body[:n]
    (crc,) = struct.unpack("<I", body[n:n + 4])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    labels = {k: _decode_label(x) for k, x in header["labels"].items()}
    return Volume(voxels, spacing=tuple(header["spacing"]), modality=modality, labels=labels)


def write_dataset(volumes, out_dir, spec: PhantomSpec | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(volumes):
        name = f"vol_{i:05d}.rvol"
        save_volume(v, out / name)
        entries.append({"file": name, **{k: x for k, x in v.labels.items() if not isinstance(x, np.ndarray)}})
    index = {"volumes": entries}
    if spec is not None:
        index["spec"] = {k: list(x) if isinstance(x, tuple) else x for k, x in spec.__dict__.items()}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return out / "index.json"


def read_dataset(data_dir) -> list[Volume]:
    d = Path(data_dir)
    index_path = d / "index.json"
    if index_path.exists():
        files = [d / e["file"] for e in json.loads(index_path.read_text())["volumes"]]
    else:
        files = sorted(d.glob("*.rvol"))
    return [load_volume(f) for f in files]
