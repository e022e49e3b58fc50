"""Run configuration: one JSON file with one block per pipeline stage.

Every key carries a ``help`` string in its field metadata; the CLI renders
these into ``--help`` so the config surface documents itself.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError


def _f(default, help, **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: json.loads(json.dumps(default)), metadata={"help": help}, **kw)
    return field(default=default, metadata={"help": help}, **kw)


@dataclass
class DataConfig:
    ct_window: list = _f([200.0, 400.0], "CT window [level, width] in phantom raw units. Phantom air is 0, so the "
                         "window starts at 0 (the library default for window_normalize is [0, 400]).")
    mr_percentiles: list = _f([1.0, 99.0], "MR percentile clip [lo, hi].")
    eval_fraction: float = _f(0.2, "Fraction of volumes held out for the probe suite (taken from the end).")


@dataclass
class JitterConfig:
    p_brightness_contrast: float = _f(0.8, "Probability of brightness/contrast jitter per crop.")
    brightness: float = _f(0.2, "Max additive brightness shift.")
    contrast: float = _f(0.3, "Max relative contrast change.")
    p_blur: float = _f(0.5, "Probability of Gaussian blur per crop.")
    blur_sigma: list = _f([0.1, 1.0], "Blur sigma range, in output pixels.")


@dataclass
class CropConfig:
    enabled: bool = _f(True, "Content-aware cropping: admit filter plus background budget. False gives plain random crops.")
    tau_bg: float = _f(0.05, "Intensity below which a pixel may be background.")
    tau_var: float = _f(0.01, "Neighbourhood std below which a pixel may be background.")
    var_window: int = _f(5, "Side of the square neighbourhood used for the std test.")
    admit_max_bg: float = _f(0.5, "Images with background fraction strictly above this are discarded.")
    crop_max_bg: float = _f(0.7, "Crops are accepted when background fraction is at most this.")
    max_attempts: int = _f(20, "Rejection-sampling attempts per crop before falling back to the best one.")
    global_scale: list = _f([0.32, 1.0], "Area fraction range of global crops.")
    local_scale: list = _f([0.05, 0.32], "Area fraction range of local crops.")
    aspect: list = _f([0.75, 4.0 / 3.0], "Aspect ratio range of crops.")
    R_g: int = _f(32, "Global crop output size at pretraining; the trainer uses train.resolution and scales R_l by the same factor.")
    R_l: int = _f(16, "Local crop output size (pixels).")
    n_global: int = _f(2, "Global crops per image.")
    n_local: int = _f(8, "Local crops per image.")
    jitter: JitterConfig = field(default_factory=JitterConfig, metadata={"help": "Photometric jitter block."})


@dataclass
class PriorConfig:
    mode: str = _f("gaussian", "'gaussian' (anatomy-centred prior) or 'uniform' (blockwise baseline).")
    sigma: typing.Any = _f("adaptive", "'adaptive' (foreground half-extent) or a fixed sigma in patch units.")


@dataclass
class MaskConfig:
    mask_ratio: float = _f(0.4, "Target fraction of masked patches per global crop.")
    mean_block_area: float = _f(4.0, "Mean block area in patches (geometric distribution).")
    aspect_bounds: list = _f([0.3, 1.0 / 0.3], "Block aspect ratio bounds (log-uniform).")
    prior: PriorConfig = field(default_factory=PriorConfig, metadata={"help": "Block-centre prior."})


@dataclass
class ModelConfig:
    image_size: int = _f(64, "Image size the positional grid is built for.")
    patch_size: int = _f(8, "Patch side in pixels.")
    dim: int = _f(96, "Token width.")
    depth: int = _f(4, "Transformer blocks.")
    heads: int = _f(4, "Attention heads.")
    mlp_ratio: float = _f(4.0, "Hidden width multiplier of the block MLP.")
    head_prototypes: int = _f(1024, "K, output width of the DINO/iBOT heads.")
    head_hidden: int = _f(256, "Hidden width of the projection head MLP.")
    head_bottleneck: int = _f(256, "Bottleneck width before the prototype layer.")
    head_layers: int = _f(3, "Linear layers in the projection MLP (including the bottleneck layer).")


@dataclass
class SigRegConfig:
    M: int = _f(16, "Random projection directions per step.")
    T: int = _f(17, "Points of the characteristic-function grid.")
    range: float = _f(4.0, "Grid spans [-range, range].")


@dataclass
class ObjectiveConfig:
    reg: str = _f("sigreg", "'sigreg', 'koleo' or 'none'.")
    w_dino: float = _f(1.0, "DINO loss weight.")
    w_ibot: float = _f(1.0, "iBOT loss weight.")
    w_reg: float = _f(0.1, "Regulariser weight.")
    tau_s: float = _f(0.1, "Student temperature.")
    tau_t_warmup: list = _f([0.04, 0.07, 0.1], "[start, end, fraction of steps] of the teacher temperature warmup.")
    center_rate: float = _f(0.9, "Momentum of the teacher centre.")
    sigreg: SigRegConfig = field(default_factory=SigRegConfig, metadata={"help": "SigReg block."})


@dataclass
class TrainConfig:
    steps: int = _f(3000, "Optimisation steps. For highres_finetune, null means 10% of the checkpoint's steps.")
    batch_size: int = _f(32, "Images per step.")
    lr_peak: float = _f(1e-3, "Peak learning rate.")
    lr_schedule: str = _f("cosine", "Only 'cosine'.")
    warmup_steps: typing.Any = _f(None, "Linear warmup steps; null means 10% of steps.")
    min_lr: float = _f(1e-6, "Cosine floor.")
    weight_decay: float = _f(0.04, "Decoupled weight decay.")
    betas: list = _f([0.9, 0.999], "AdamW betas.")
    momentum_schedule: list = _f([0.992, 1.0], "Teacher EMA momentum [start, end], linear.")
    clip_grad: float = _f(3.0, "Gradient norm clip; 0 disables.")
    resolution: int = _f(32, "Global crop / evaluation resolution for this stage.")
    seed: int = _f(0, "Seed for initialisation, shuffling and augmentation.")
    stage: str = _f("pretrain", "'pretrain' or 'highres_finetune'.")
    checkpoint_every: int = _f(0, "Write an intermediate checkpoint every N steps (0: only final).")
    probe_every: int = _f(0, "Log the organ probe metric every N steps (0: only at the end).")


@dataclass
class ProbeConfig:
    seeds: int = _f(5, "Seeds per task.")
    reg_grid: list = _f([1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0], "L2 strengths searched on the val split.")
    max_iter: int = _f(10000, "Gradient-descent iteration cap for logistic and Cox heads.")
    tol: float = _f(1e-6, "Gradient-norm stopping tolerance.")
    pooling: str = _f("cls", "Token used for volume averaging: 'cls' or 'patch_mean'.")
    collapse_threshold: float = _f(1e-3, "Mean per-dimension std below which embeddings count as collapsed.")
    collapse_probe_size: int = _f(256, "Images used by the collapse detector.")
    log_seeds: int = _f(1, "Seeds used for the in-training probe metric.")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig, metadata={"help": "Data block."})
    crop: CropConfig = field(default_factory=CropConfig, metadata={"help": "Crop block."})
    mask: MaskConfig = field(default_factory=MaskConfig, metadata={"help": "Mask block."})
    model: ModelConfig = field(default_factory=ModelConfig, metadata={"help": "Encoder block."})
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig, metadata={"help": "Loss block."})
    train: TrainConfig = field(default_factory=TrainConfig, metadata={"help": "Optimisation block."})
    probe: ProbeConfig = field(default_factory=ProbeConfig, metadata={"help": "Evaluation block."})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d or {}, "")
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"not valid JSON ({e})", field=str(path)) from None
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ValidationError("expected an object", field=prefix.rstrip(".") or "<root>")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in d:
        if key not in known:
            raise ValidationError("unknown key", field=prefix + key)
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, f in known.items():
        if name not in d:
            continue
        t = hints[name]
        if dataclasses.is_dataclass(t):
            kwargs[name] = _build(t, d[name], prefix + name + ".")
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)


def _check(cond, field, msg):
    if not cond:
        raise ValidationError(msg, field=field)


def validate(cfg: RunConfig):
    c = cfg.crop
    _check(0 <= c.admit_max_bg <= 1, "crop.admit_max_bg", "must lie in [0, 1]")
    _check(0 <= c.crop_max_bg <= 1, "crop.crop_max_bg", "must lie in [0, 1]")
    _check(c.max_attempts >= 1, "crop.max_attempts", "must be >= 1")
    _check(c.R_l < c.R_g, "crop.R_l", "local resolution must be below global resolution")
    for name in ("global_scale", "local_scale", "aspect"):
        lo, hi = getattr(c, name)
        _check(0 < lo <= hi, f"crop.{name}", "needs 0 < lo <= hi")
    m = cfg.mask
    _check(0 < m.mask_ratio < 1, "mask.mask_ratio", "must lie in (0, 1)")
    _check(m.prior.mode in ("gaussian", "uniform"), "mask.prior.mode", "must be 'gaussian' or 'uniform'")
    _check(m.prior.sigma == "adaptive" or (isinstance(m.prior.sigma, (int, float)) and m.prior.sigma > 0),
           "mask.prior.sigma", "must be 'adaptive' or a positive number")
    md = cfg.model
    _check(md.image_size % md.patch_size == 0, "model.image_size", "must be divisible by patch_size")
    _check(md.dim % md.heads == 0, "model.dim", "must be divisible by heads")
    _check(md.depth >= 0, "model.depth", "must be >= 0")
    _check(md.head_layers >= 1, "model.head_layers", "must be >= 1")
    o = cfg.objective
    _check(o.reg in ("sigreg", "koleo", "none"), "objective.reg", "must be 'sigreg', 'koleo' or 'none'")
    _check(o.tau_s > 0, "objective.tau_s", "must be > 0")
    _check(0 < o.tau_t_warmup[0] <= 1 and 0 < o.tau_t_warmup[1] <= 1, "objective.tau_t_warmup", "temperatures must lie in (0, 1]")
    _check(0 <= o.center_rate <= 1, "objective.center_rate", "must lie in [0, 1]")
    t = cfg.train
    _check(t.lr_schedule == "cosine", "train.lr_schedule", "only 'cosine' is supported")
    _check(t.stage in ("pretrain", "highres_finetune"), "train.stage", "must be 'pretrain' or 'highres_finetune'")
    _check(t.steps is None or t.steps >= 0, "train.steps", "must be >= 0")
    _check(t.batch_size >= 2, "train.batch_size", "must be >= 2")
    if t.warmup_steps is not None and t.steps is not None:
        _check(0 <= t.warmup_steps <= t.steps, "train.warmup_steps", "must lie in [0, steps]")
    m0, m1 = t.momentum_schedule
    _check(0 <= m0 <= m1 <= 1, "train.momentum_schedule", "needs 0 <= m_start <= m_end <= 1")
    _check(t.resolution % md.patch_size == 0, "train.resolution", "must be divisible by model.patch_size")
    p = cfg.probe
    _check(p.seeds >= 1, "probe.seeds", "must be >= 1")
    _check(p.pooling in ("cls", "patch_mean"), "probe.pooling", "must be 'cls' or 'patch_mean'")


def describe_keys(cls=RunConfig, prefix="") -> list[str]:
    """Flat ``key: help (default)`` lines for every config key."""
    lines = []
    inst = cls()
    for f in dataclasses.fields(cls):
        t = typing.get_type_hints(cls)[f.name]
        if dataclasses.is_dataclass(t):
            lines.extend(describe_keys(t, prefix + f.name + "."))
        else:
            lines.append(f"{prefix}{f.name} = {json.dumps(getattr(inst, f.name))}: {f.metadata.get('help', '')}")
    return lines
