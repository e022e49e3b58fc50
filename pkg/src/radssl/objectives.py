"""Self-distillation losses, embedding regularisers, centering and EMA."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class LossBreakdown:
    dino: float
    ibot: float
    reg: float
    weights: tuple = (1.0, 1.0, 0.1)
    reg_name: str = "sigreg"

    @property
    def total(self) -> float:
        w_dino, w_ibot, w_reg = self.weights
        return w_dino * self.dino + w_ibot * self.ibot + w_reg * self.reg


@dataclass
class TeacherState:
    model: torch.nn.Module
    center: torch.Tensor
    center_patch: torch.Tensor
    momentum: float = 0.992
    center_rate: float = 0.9
    teacher_temp: float = 0.04

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError("must lie in [0, 1]", field="momentum")
        if not 0.0 <= self.center_rate <= 1.0:
            raise ValidationError("must lie in [0, 1]", field="center_rate")
        if not 0.0 < self.teacher_temp <= 1.0:
            raise ValidationError("must lie in (0, 1]", field="teacher_temp")


def teacher_probs(teacher_logits, center, tau_t):
    return F.softmax((teacher_logits - center) / tau_t, dim=-1).detach()


def _as_views(x):
    # (views, K) -> (views, 1, K)
    return x[:, None, :] if x.dim() == 2 else x


def dino_loss(student_logits, teacher_logits, center, tau_s, tau_t):
    """Cross-entropy between centred, sharpened teacher views and student views.

    ``student_logits`` is ``(n_student_views, B, K)``, ``teacher_logits``
    ``(n_teacher_views, B, K)``; the first teacher views are the same crops as
    the first student views and those pairs are skipped.
    """
    s = _as_views(student_logits)
    t = _as_views(teacher_logits)
    if s.shape[-1] != t.shape[-1]:
        raise ValidationError(f"student K={s.shape[-1]} but teacher K={t.shape[-1]}", field="logits")
    p_t = teacher_probs(t, center, tau_t)
    log_s = F.log_softmax(s / tau_s, dim=-1)
    total = s.new_zeros(())
    pairs = 0
    for i in range(t.shape[0]):
        for j in range(s.shape[0]):
            if i == j:
                continue
            total = total + (-(p_t[i] * log_s[j]).sum(-1)).mean()
            pairs += 1
    if pairs == 0:
        return total
    return total / pairs


def ibot_loss(student_patch_logits, teacher_patch_logits, mask, center_patch, tau_s, tau_t):
    """Masked-patch cross-entropy, averaged over masked positions.

    Returns ``(loss, has_masked)``; an empty mask gives ``(0, False)``.
    """
    s = student_patch_logits
    t = teacher_patch_logits
    m = torch.as_tensor(np.asarray(mask.grid if hasattr(mask, "grid") else mask) if not torch.is_tensor(mask) else mask,
                        dtype=torch.bool)
    if s.dim() == 2:
        s, t, m = s[None], t[None], m.reshape(1, -1)
    m = m.reshape(s.shape[0], s.shape[1])
    if not bool(m.any()):
        return s.new_zeros(()), False
    p_t = teacher_probs(t[m], center_patch, tau_t)
    log_s = F.log_softmax(s[m] / tau_s, dim=-1)
    return (-(p_t * log_s).sum(-1)).mean(), True


def sigreg_directions(dim, M, rng) -> np.ndarray:
    u = rng.standard_normal((dim, M))
    return u / np.linalg.norm(u, axis=0, keepdims=True)


def sigreg_t_grid(T=17, t_range=4.0) -> np.ndarray:
    return np.linspace(-t_range, t_range, T)


def sigreg_weights(t_grid):
    return np.exp(-0.5 * np.asarray(t_grid) ** 2)


def sigreg_loss(embeddings, directions, t_grid, eps=1e-6):
    """Sliced characteristic-function distance to a standard normal.

    Projections are standardised with the batch mean and (population) std,
    floored at ``eps``; the weighted squared gap between the empirical
    characteristic function and ``exp(-t^2/2)`` is averaged over directions.
    """
    x = embeddings
    if x.dim() != 2 or x.shape[0] < 2:
        raise ValidationError("need a (B, d) batch with B >= 2", field="embeddings")
    u = torch.as_tensor(directions, dtype=x.dtype)
    t = torch.as_tensor(t_grid, dtype=x.dtype)
    w = torch.exp(-0.5 * t * t)
    p = x @ u                                             # (B, M)
    mu = p.mean(0)
    var = ((p - mu) ** 2).mean(0)
    sd = torch.sqrt(var.clamp_min(eps * eps))
    z = (p - mu) / sd
    tz = t[:, None, None] * z[None]                       # (T, B, M)
    re = torch.cos(tz).mean(1)
    im = torch.sin(tz).mean(1)
    gap = (re - w[:, None]) ** 2 + im**2                  # target cf equals the weight
    return (w[:, None] * gap).sum(0).mean()


def koleo_loss(embeddings, eps=1e-8):
    """``-mean_i log(min_j ||x_i - x_j|| + eps)`` on L2-normalised rows."""
    x = embeddings
    if x.dim() != 2 or x.shape[0] < 2:
        raise ValidationError("need a (B, d) batch with B >= 2", field="embeddings")
    x = F.normalize(x, dim=-1)
    B = x.shape[0]
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    sq = sq.masked_fill(torch.eye(B, dtype=torch.bool), float("inf"))
    nn_sq = sq.min(dim=1).values
    # Duplicates give distance exactly 0 (value -ln eps) and a zero gradient;
    # sqrt only ever sees positive inputs so its backward stays finite.
    pos = nn_sq > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, nn_sq, torch.ones_like(nn_sq))), torch.zeros_like(nn_sq))
    # Per-row terms are exact; summing them in sorted order makes the mean
    # independent of row order down to the last bit.
    return -torch.sort(torch.log(dist + eps)).values.mean()


def _pairs(teacher, student):
    if isinstance(teacher, torch.nn.Module):
        t = dict(teacher.named_parameters())
        t.update(dict(teacher.named_buffers()))
        s = dict(student.named_parameters())
        s.update(dict(student.named_buffers()))
    else:
        t, s = teacher, student
    if set(t) != set(s):
        raise ValidationError(f"parameter names differ: {sorted(set(t) ^ set(s))[:4]}", field="student_params")
    for k in t:
        if t[k].shape != s[k].shape:
            raise ValidationError(f"{k}: teacher {tuple(t[k].shape)} vs student {tuple(s[k].shape)}",
                                  field="student_params")
    return [(t[k], s[k]) for k in t]


@torch.no_grad()
def ema_update(teacher, student, m):
    """In place ``teacher <- m * teacher + (1 - m) * student`` for every tensor."""
    if not 0.0 <= m <= 1.0:
        raise ValidationError("must lie in [0, 1]", field="m")
    for tp, sp in _pairs(teacher, student):
        if m == 1.0:
            continue
        if m == 0.0:
            tp.copy_(sp)
            continue
        tp.mul_(m).add_(sp.detach(), alpha=1.0 - m)
    return teacher


@torch.no_grad()
def update_center(center, batch_teacher_logits, rate):
    """``rate * center + (1 - rate) * batch mean`` (mean over all leading axes)."""
    if not 0.0 <= rate <= 1.0:
        raise ValidationError("must lie in [0, 1]", field="rate")
    flat = batch_teacher_logits.reshape(-1, batch_teacher_logits.shape[-1])
    return rate * center + (1.0 - rate) * flat.mean(0)
