"""Self-supervised pretraining loop and the high-resolution fine-tuning stage."""
from __future__ import annotations

import copy
import csv
import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .cropper import admit_image, make_multicrop, make_slice
from .encoder import (Checkpoint, SSLModel, checkpoint_from_models, interpolate_pos_embed,
                      save_checkpoint)
from .errors import GeometryError, TrainingDiverged, ValidationError
from .masker import GaussianPrior, prior_from_crop, sample_mask
from .objectives import (LossBreakdown, TeacherState, dino_loss, ema_update, ibot_loss, koleo_loss,
                         sigreg_directions, sigreg_loss, sigreg_t_grid, update_center)
from .probe import ProbeConfig, TaskSuite, collapse_score, evaluate, fit_head

LOG_COLUMNS = ("step", "dino", "ibot", "reg", "total", "lr", "m", "probe_metric")


class CollapseWarning(UserWarning):
    pass


# --- schedules ------------------------------------------------------------

def warmup_steps_for(train_cfg, steps):
    w = train_cfg.warmup_steps
    return int(round(0.1 * steps)) if w is None else int(w)


def lr_at(step, steps, peak, warmup, min_lr):
    """Linear warmup from 0, then cosine from ``peak`` down to ``min_lr`` at ``steps``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if steps <= warmup:
        return peak
    prog = min((step - warmup) / (steps - warmup), 1.0)
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * prog))


def momentum_at(step, steps, m_start, m_end):
    if steps <= 0:
        return m_start
    return m_start + (m_end - m_start) * min(step / steps, 1.0)


def teacher_temp_at(step, steps, warmup):
    t0, t1, frac = warmup
    n = frac * steps
    if n <= 0:
        return t1
    return t0 + (t1 - t0) * min(step / n, 1.0)


# --- data -----------------------------------------------------------------

class SlicePool:
    """Normalised slices of the training volumes; background-dominated slices
    are dropped when content-aware cropping is on."""

    def __init__(self, volumes, cfg: RunConfig):
        from .dataio import normalize_volume
        c = cfg.crop
        self.images = []
        self.total = 0
        self._perm = None
        for vi, vol in enumerate(volumes):
            norm = normalize_volume(vol, tuple(cfg.data.ct_window), tuple(cfg.data.mr_percentiles))
            for si in range(norm.shape[0]):
                img = make_slice(norm[si], (vi, si), c)
                self.total += 1
                if c.enabled and not admit_image(img, c.admit_max_bg):
                    continue
                self.images.append(img)
        if not self.images:
            raise ValidationError("no admitted training slices", field="data")

    def __len__(self):
        return len(self.images)

    def indices(self, step, batch_size, seed):
        """Image indices of ``step``; each epoch is a fresh permutation from ``(seed, 0, epoch)``."""
        n = len(self.images)
        out = []
        for k in range(step * batch_size, (step + 1) * batch_size):
            epoch, pos = divmod(k, n)
            if self._perm is None or self._perm[0] != (seed, epoch):
                self._perm = ((seed, epoch), np.random.default_rng([seed, 0, epoch]).permutation(n))
            out.append(int(self._perm[1][pos]))
        return out


@dataclass
class Batch:
    globals: torch.Tensor      # (n_g, B, R_g, R_g)
    locals: torch.Tensor       # (n_l, B, R_l, R_l)
    masks: torch.Tensor        # (n_g, B, cells) bool
    crops: list = field(default_factory=list, repr=False)


def make_batch(images, cfg: RunConfig, rng, R_g, R_l, patch_size, dtype=torch.float32) -> Batch:
    g = R_g // patch_size
    mcfg = cfg.mask
    sigma = None if mcfg.prior.sigma == "adaptive" else float(mcfg.prior.sigma)
    crops, masks = [], []
    for img in images:
        mc = make_multicrop(img, cfg.crop, rng, R_g, R_l)
        crops.append(mc)
        row = []
        for box in mc.global_boxes:
            if mcfg.prior.mode == "uniform":
                prior = GaussianPrior.uniform((g, g))
            else:
                prior = prior_from_crop(img, box, (g, g), sigma)
            pm = sample_mask((g, g), mcfg.mask_ratio, prior, rng, mcfg.mean_block_area, tuple(mcfg.aspect_bounds))
            row.append(pm.grid.ravel())
        masks.append(row)
    G = torch.as_tensor(np.stack([m.globals for m in crops], axis=1), dtype=dtype)
    L = torch.as_tensor(np.stack([m.locals for m in crops], axis=1), dtype=dtype)
    M = torch.as_tensor(np.stack(masks, axis=1), dtype=torch.bool)
    return Batch(G, L, M, crops)


# --- optimisation ---------------------------------------------------------

def _param_groups(model, weight_decay):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim < 2 or name.endswith("_token") or "pos_embed" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(model, train_cfg):
    return torch.optim.AdamW(_param_groups(model, train_cfg.weight_decay), lr=0.0,
                             betas=tuple(train_cfg.betas), eps=1e-8)


def regularizer(name, emb, rng, scfg):
    if name == "none":
        return emb.new_zeros(())
    if name == "koleo":
        return koleo_loss(emb)
    dirs = sigreg_directions(emb.shape[1], scfg.M, rng)
    return sigreg_loss(emb, dirs, sigreg_t_grid(scfg.T, scfg.range))


def _assert_teacher_frozen(teacher: torch.nn.Module):
    for name, p in teacher.named_parameters():
        if p.requires_grad or p.grad is not None:
            raise AssertionError(f"teacher parameter {name} takes part in autograd")


def train_step(student: SSLModel, teacher: TeacherState, batch: Batch, opt, cfg: RunConfig, *,
               lr, m, tau_t, step=0, reg_rng=None):
    """One optimisation step; returns the :class:`LossBreakdown`.

    The student and teacher are updated in place.
    """
    o = cfg.objective
    n_g, B = batch.globals.shape[:2]
    n_l = batch.locals.shape[0]
    tmodel = teacher.model
    _assert_teacher_frozen(tmodel)

    with torch.no_grad():
        t_cls, t_patch = tmodel.backbone(batch.globals.reshape(n_g * B, *batch.globals.shape[2:]))
        t_logits = tmodel.dino_head(t_cls).reshape(n_g, B, -1)
        t_patch_logits = tmodel.ibot_head(t_patch)                          # (n_g*B, cells, K)

    masks = batch.masks.reshape(n_g * B, -1)
    s_cls_g, s_patch = student.backbone(batch.globals.reshape(n_g * B, *batch.globals.shape[2:]), masks)
    views = [s_cls_g.reshape(n_g, B, -1)]
    if n_l:
        s_cls_l, _ = student.backbone(batch.locals.reshape(n_l * B, *batch.locals.shape[2:]), interpolate=True)
        views.append(s_cls_l.reshape(n_l, B, -1))
    s_cls = torch.cat(views, dim=0)
    s_logits = student.dino_head(s_cls)

    l_dino = dino_loss(s_logits, t_logits, teacher.center, o.tau_s, tau_t)
    if bool(masks.any()):
        s_masked = student.ibot_head(s_patch[masks])
        l_ibot, _ = ibot_loss(s_masked[None], t_patch_logits[masks][None], torch.ones(1, s_masked.shape[0], dtype=torch.bool),
                              teacher.center_patch, o.tau_s, tau_t)
    else:
        l_ibot = s_logits.new_zeros(())
    rng = reg_rng if reg_rng is not None else np.random.default_rng([cfg.train.seed, 2, step])
    regs = [regularizer(o.reg, views[0][v], rng, o.sigreg) for v in range(n_g)]
    l_reg = torch.stack(regs).mean()
    total = o.w_dino * l_dino + o.w_ibot * l_ibot + o.w_reg * l_reg
    parts = LossBreakdown(l_dino.item(), l_ibot.item(), l_reg.item(), (o.w_dino, o.w_ibot, o.w_reg), o.reg)

    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss at step {step}",
                               {"step": step, "dino": parts.dino, "ibot": parts.ibot, "reg": parts.reg})
    opt.zero_grad(set_to_none=True)
    total.backward()
    params = [p for p in student.parameters() if p.grad is not None]
    max_norm = cfg.train.clip_grad if cfg.train.clip_grad > 0 else float("inf")
    gnorm = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
    if not math.isfinite(gnorm):
        norms = {n: float(p.grad.norm()) for n, p in student.named_parameters() if p.grad is not None}
        raise TrainingDiverged(f"non-finite gradient at step {step}",
                               {"step": step, "dino": parts.dino, "ibot": parts.ibot, "reg": parts.reg,
                                "grad_norms": norms})
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()

    ema_update(tmodel, student, m)
    teacher.momentum = m
    teacher.teacher_temp = tau_t
    teacher.center = update_center(teacher.center, t_logits, o.center_rate)
    teacher.center_patch = update_center(teacher.center_patch, t_patch_logits, o.center_rate)
    _assert_teacher_frozen(tmodel)
    return parts


# --- log ------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    collapsed: bool | None = None
    collapse_score: float | None = None

    def append(self, step, parts: LossBreakdown, lr, m, probe_metric=None):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValidationError("log steps must increase", field="step")
        self.rows.append({"step": step, "dino": parts.dino, "ibot": parts.ibot, "reg": parts.reg,
                          "total": parts.total, "lr": lr, "m": m, "probe_metric": probe_metric})

    def probe_points(self):
        return [(r["step"], r["probe_metric"]) for r in self.rows if r["probe_metric"] is not None]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + ["" if r[k] is None else repr(float(r[k])) for k in LOG_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "step" not in reader.fieldnames:
                raise ValidationError("not a training log", field=str(path))
            for r in reader:
                log.rows.append({k: (int(r[k]) if k == "step" else (float(r[k]) if r.get(k) not in ("", None) else None))
                                 for k in LOG_COLUMNS if k in r})
        return log


# --- loops ----------------------------------------------------------------

def _organ_probe(teacher_model, suite: TaskSuite | None, pcfg: ProbeConfig):
    if suite is None:
        return None
    task = suite.build(teacher_model, names={"organ"})[0]
    vals = []
    for seed in range(pcfg.log_seeds):
        vals.append(evaluate(task, fit_head(task, seed, pcfg)).get(task.metric))
    vals = [v for v in vals if v is not None]
    return 100.0 * float(np.mean(vals)) if vals else None


def _detect_collapse(teacher_model, pool: SlicePool, pcfg: ProbeConfig, seed):
    n = min(pcfg.collapse_probe_size, len(pool))
    idx = np.random.default_rng([seed, 3]).choice(len(pool), size=n, replace=False)
    imgs = np.stack([pool.images[i].pixels for i in sorted(idx)])
    score = collapse_score(teacher_model, imgs)
    return score, score < pcfg.collapse_threshold


def _loop(student, teacher, pool, cfg: RunConfig, steps, R_g, R_l, suite, log, step0=0, ckpt_dir=None, stage="pretrain"):
    t = cfg.train
    opt = make_optimizer(student, t)
    warm = warmup_steps_for(t, steps)
    p = cfg.model.patch_size
    for step in range(steps):
        lr = lr_at(step, steps, t.lr_peak, warm, t.min_lr)
        m = momentum_at(step, steps, *t.momentum_schedule)
        tau_t = teacher_temp_at(step, steps, cfg.objective.tau_t_warmup)
        rng = np.random.default_rng([t.seed, 1, step0 + step])
        images = [pool.images[i] for i in pool.indices(step0 + step, t.batch_size, t.seed)]
        batch = make_batch(images, cfg, rng, R_g, R_l, p)
        student.train()
        parts = train_step(student, teacher, batch, opt, cfg, lr=lr, m=m, tau_t=tau_t, step=step0 + step)
        probe = None
        last = step == steps - 1
        if suite is not None and ((t.probe_every and (step + 1) % t.probe_every == 0) or last):
            probe = _organ_probe(teacher.model, suite, cfg.probe)
        log.append(step0 + step + 1, parts, lr, m, probe)
        if ckpt_dir is not None and t.checkpoint_every and (step + 1) % t.checkpoint_every == 0 and not last:
            ck = checkpoint_from_models(student, teacher.model, teacher.center, teacher.center_patch,
                                        step0 + step + 1, stage, cfg.to_dict())
            save_checkpoint(ck, Path(ckpt_dir) / f"{stage}_step{step0 + step + 1:06d}.rckp")


def local_size(cfg: RunConfig, res, patch_size):
    """Local crop side scaled with the global one, rounded to whole patches."""
    return patch_size * max(1, int(round(cfg.crop.R_l * res / (cfg.crop.R_g * patch_size))))


def _teacher_from(student, cfg, center=None, center_patch=None):
    tmodel = copy.deepcopy(student)
    for q in tmodel.parameters():
        q.requires_grad_(False)
    K = cfg.model.head_prototypes
    return TeacherState(tmodel,
                        torch.zeros(K) if center is None else center.clone(),
                        torch.zeros(K) if center_patch is None else center_patch.clone(),
                        cfg.train.momentum_schedule[0], cfg.objective.center_rate, cfg.objective.tau_t_warmup[0])


def _check_threads():
    # Bitwise reproducibility relies on a fixed reduction order.
    torch.use_deterministic_algorithms(True, warn_only=True)


def run_pretrain(volumes, cfg: RunConfig, eval_volumes=None, ckpt_dir=None):
    """Pretrain from scratch on ``volumes``; returns ``(Checkpoint, TrainLog)``.

    The encoder grid is built for ``train.resolution``. When ``eval_volumes``
    is given, the organ probe is logged every ``probe_every`` steps and at the
    end; the collapse detector runs on the final teacher.
    """
    _check_threads()
    t = cfg.train
    res = t.resolution
    mcfg = dataclasses.replace(cfg.model, image_size=res)
    R_l = local_size(cfg, res, cfg.model.patch_size)
    pool = SlicePool(volumes, cfg)
    torch.manual_seed(t.seed)
    student = SSLModel(mcfg)
    teacher = _teacher_from(student, cfg)
    suite = TaskSuite.phantom(eval_volumes, cfg.data) if eval_volumes else None
    log = TrainLog()
    _loop(student, teacher, pool, cfg, t.steps, res, R_l, suite, log, 0, ckpt_dir, "pretrain")
    score, collapsed = _detect_collapse(teacher.model, pool, cfg.probe, t.seed)
    log.collapse_score, log.collapsed = score, bool(collapsed)
    if collapsed:
        warnings.warn(f"representation collapse: mean feature std {score:.3g} < {cfg.probe.collapse_threshold}",
                      CollapseWarning, stacklevel=2)
    ck = checkpoint_from_models(student, teacher.model, teacher.center, teacher.center_patch, t.steps,
                                "pretrain", cfg.to_dict())
    return ck, log


def run_highres_finetune(ckpt: Checkpoint, volumes, cfg: RunConfig, eval_volumes=None, ckpt_dir=None):
    """Interpolate positions to ``train.resolution`` and continue training briefly.

    ``train.steps = None`` means 10% of the checkpoint's step count. Returns
    ``(Checkpoint, TrainLog)`` tagged ``highres_finetune``.
    """
    _check_threads()
    t = cfg.train
    res = t.resolution
    base = ckpt.model_cfg.image_size
    if res % ckpt.model_cfg.patch_size:
        raise GeometryError(f"resolution {res} is not divisible by patch size {ckpt.model_cfg.patch_size}")
    if res <= base:
        raise ValidationError(f"fine-tune resolution {res} must exceed the checkpoint's {base}", field="train.resolution")
    steps = int(round(0.1 * ckpt.step)) if t.steps is None else int(t.steps)
    student = interpolate_pos_embed(ckpt.build("student"), res)
    tmodel = interpolate_pos_embed(ckpt.build("teacher"), res)
    student.train()
    for q in student.parameters():
        q.requires_grad_(True)
    teacher = _teacher_from(tmodel, cfg, ckpt.center, ckpt.center_patch)
    teacher.model = tmodel
    for q in tmodel.parameters():
        q.requires_grad_(False)
    log = TrainLog()
    if steps > 0:
        R_l = local_size(cfg, res, ckpt.model_cfg.patch_size)
        pool = SlicePool(volumes, cfg)
        suite = TaskSuite.phantom(eval_volumes, cfg.data) if eval_volumes else None
        torch.manual_seed(t.seed)
        _loop(student, teacher, pool, cfg, steps, res, R_l, suite, log, ckpt.step, ckpt_dir, "highres_finetune")
    out = checkpoint_from_models(student, teacher.model, teacher.center, teacher.center_patch, ckpt.step + steps,
                                 "highres_finetune", cfg.to_dict())
    return out, log


def split_volumes(volumes, eval_fraction):
    """Train / eval split: the last ``eval_fraction`` of the list is held out."""
    n_eval = int(round(eval_fraction * len(volumes)))
    n_eval = min(n_eval, len(volumes) - 1) if len(volumes) > 1 else 0
    return volumes[:len(volumes) - n_eval], volumes[len(volumes) - n_eval:]
