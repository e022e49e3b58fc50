"""Frozen-feature evaluation: feature extraction, simple heads, multi-seed reports."""
from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .config import DataConfig, ProbeConfig
from .dataio import Volume, load_volume, normalize_volume
from .encoder import Checkpoint, Encoder, SSLModel
from .errors import ValidationError

KINDS = ("classification", "multilabel", "regression", "survival")
DEFAULT_METRIC = {"classification": "acc", "multilabel": "auc", "regression": "r2", "survival": "cindex"}


@dataclass
class ProbeTask:
    name: str
    kind: str
    features: np.ndarray
    targets: object
    splits: dict
    track: str = "2D"
    metric: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown task kind {self.kind!r}", field=f"{self.name}.kind")
        if self.track not in ("2D", "3D", "both"):
            raise ValidationError(f"unknown track {self.track!r}", field=f"{self.name}.track")
        self.metric = self.metric or DEFAULT_METRIC[self.kind]
        self.features = np.asarray(self.features, dtype=np.float64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        for k in ("train", "val", "test"):
            if k not in self.splits:
                raise ValidationError(f"missing '{k}' split", field=f"{self.name}.splits")
        s = [set(self.splits[k].tolist()) for k in ("train", "val", "test")]
        if s[0] & s[1] or s[0] & s[2] or s[1] & s[2]:
            raise ValidationError("splits overlap", field=f"{self.name}.splits")
        if self.kind == "survival":
            t, e = self.targets
            self.targets = (np.asarray(t, dtype=np.float64), np.asarray(e).astype(bool))
            if np.any(self.targets[0] <= 0):
                raise ValidationError("survival times must be positive", field=f"{self.name}.targets")
        elif self.kind == "multilabel":
            self.targets = np.asarray(self.targets).astype(np.int64)
        elif self.kind == "regression":
            self.targets = np.asarray(self.targets, dtype=np.float64)
        else:
            self.targets = np.asarray(self.targets).astype(np.int64)

    def subset_targets(self, idx):
        if self.kind == "survival":
            return self.targets[0][idx], self.targets[1][idx]
        return self.targets[idx]


@dataclass
class MetricReport:
    task: str
    metric: str
    values: list
    flags: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        v = np.asarray(self.values, dtype=np.float64)
        return float(np.nanmean(v)) if np.any(np.isfinite(v)) else float("nan")

    @property
    def std(self) -> float:
        v = np.asarray(self.values, dtype=np.float64)
        v = v[np.isfinite(v)]
        return float(np.std(v, ddof=1)) if v.size > 1 else 0.0


@dataclass
class FittedHead:
    kind: str
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    reg: float
    classes: np.ndarray | None = None
    iterations: int = 0
    converged: bool = True

    def scores(self, X):
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return Z @ self.weights + self.bias

    def predict(self, X):
        s = self.scores(X)
        if self.kind == "classification":
            return self.classes[np.argmax(s, axis=1)]
        if self.kind == "multilabel":
            return (s > 0).astype(np.int64)
        if self.kind == "regression":
            return s[:, 0]
        return s[:, 0]

    def proba(self, X):
        s = self.scores(X)
        if self.kind == "classification":
            s = s - s.max(axis=1, keepdims=True)
            e = np.exp(s)
            return e / e.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-s))


# --- optimisation ---------------------------------------------------------

def _minimize(fun, w0, L0, max_iter, tol):
    """Accelerated full-batch gradient descent with backtracking.

    Momentum restarts whenever it points uphill (gradient restart scheme).
    Stops when the gradient norm drops below ``tol`` or after ``max_iter``
    iterations. Returns ``(w, iterations, converged)``.
    """
    x = w0.copy()
    fx, gx = fun(x)
    y, fy, gy = x, fx, gx
    t, L = 1.0, max(L0, 1e-12)
    for it in range(max_iter):
        if np.linalg.norm(gx) < tol:
            return x, it, True
        gg = float(np.sum(gy * gy))
        while True:
            xn = y - gy / L
            fn, gn = fun(xn)
            if fn <= fy - 0.5 * gg / L + 1e-13 * abs(fy) or L > 1e16:
                break
            L *= 2.0
        if np.dot(gy, xn - x) > 0:
            t, y, fy, gy = 1.0, xn, fn, gn
        else:
            tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = xn + ((t - 1.0) / tn) * (xn - x)
            t = tn
            fy, gy = fun(y)
        x, fx, gx = xn, fn, gn
        L *= 0.9
    return x, max_iter, bool(np.linalg.norm(gx) < tol)


def _softmax_obj(Xb, Y, lam, d):
    N = Xb.shape[0]

    def fun(w):
        W = w.reshape(Xb.shape[1], -1)
        S = Xb @ W
        S = S - S.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(S).sum(axis=1, keepdims=True))
        P = np.exp(S - logZ)
        f = -np.sum(Y * (S - logZ)) / N + 0.5 * lam * np.sum(W[:d] ** 2)
        G = Xb.T @ (P - Y) / N
        G[:d] += lam * W[:d]
        return f, G.ravel()
    return fun


def _sigmoid_obj(Xb, Y, lam, d):
    N, C = Xb.shape[0], Y.shape[1]

    def fun(w):
        W = w.reshape(Xb.shape[1], C)
        S = Xb @ W
        f = np.sum(np.logaddexp(0.0, S) - Y * S) / (N * C) + 0.5 * lam * np.sum(W[:d] ** 2)
        P = 0.5 * (1.0 + np.tanh(0.5 * S))
        G = Xb.T @ (P - Y) / (N * C)
        G[:d] += lam * W[:d]
        return f, G.ravel()
    return fun


def _cox_obj(X, time, event, lam):
    """Negative Breslow partial log-likelihood / N plus an L2 penalty."""
    order = np.argsort(time, kind="stable")
    Xs, ts, es = X[order], time[order], event[order]
    first = np.searchsorted(ts, ts, side="left")   # risk set of i starts at its first tied time
    N = X.shape[0]

    def fun(beta):
        eta = Xs @ beta
        shift = eta.max()
        e = np.exp(eta - shift)
        S0 = np.cumsum(e[::-1])[::-1][first]
        S1 = np.cumsum((e[:, None] * Xs)[::-1], axis=0)[::-1][first]
        f = np.sum((np.log(S0) + shift - eta)[es]) / N + 0.5 * lam * np.dot(beta, beta)
        g = np.sum((S1 / S0[:, None] - Xs)[es], axis=0) / N + lam * beta
        return f, g
    return fun


def _standardize(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def _fit_fixed(task: ProbeTask, idx, lam, cfg: ProbeConfig, warm: FittedHead | None = None) -> FittedHead:
    X = task.features[idx]
    mean, scale = _standardize(X)
    Z = (X - mean) / scale
    N, d = Z.shape
    if task.kind == "regression":
        y = task.targets[idx]
        ym = y.mean()
        w = np.linalg.solve(Z.T @ Z / N + lam * np.eye(d), Z.T @ (y - ym) / N)
        return FittedHead("regression", w[:, None], np.array([ym]), mean, scale, lam)
    if task.kind == "survival":
        t, e = task.subset_targets(idx)
        fun = _cox_obj(Z, t, e, lam)
        L0 = np.linalg.norm(Z, 2) ** 2 / N + lam
        w0 = warm.weights[:, 0].copy() if warm is not None else np.zeros(d)
        w, it, ok = _minimize(fun, w0, L0, cfg.max_iter, cfg.tol)
        return FittedHead("survival", w[:, None], np.zeros(1), mean, scale, lam, iterations=it, converged=ok)
    Xb = np.hstack([Z, np.ones((N, 1))])
    if task.kind == "classification":
        y = task.targets[idx]
        classes = np.unique(y)
        Y = (y[:, None] == classes[None, :]).astype(np.float64)
        fun = _softmax_obj(Xb, Y, lam, d)
        L0 = 0.5 * np.linalg.norm(Xb, 2) ** 2 / N + lam
        w, it, ok = _minimize(fun, _warm_vector(warm, d, len(classes)), L0, cfg.max_iter, cfg.tol)
        W = w.reshape(d + 1, -1)
        return FittedHead("classification", W[:d], W[d], mean, scale, lam, classes, it, ok)
    Y = task.targets[idx].astype(np.float64)
    fun = _sigmoid_obj(Xb, Y, lam, d)
    L0 = 0.25 * np.linalg.norm(Xb, 2) ** 2 / (N * Y.shape[1]) + lam
    w, it, ok = _minimize(fun, _warm_vector(warm, d, Y.shape[1]), L0, cfg.max_iter, cfg.tol)
    W = w.reshape(d + 1, -1)
    return FittedHead("multilabel", W[:d], W[d], mean, scale, lam, None, it, ok)


def _warm_vector(warm, d, C):
    if warm is None or warm.weights.shape != (d, C):
        return np.zeros((d + 1) * C)
    return np.vstack([warm.weights, warm.bias[None, :]]).ravel()


def _check_trainable(task, idx):
    if len(idx) == 0:
        raise ValidationError("empty train split", field=task.name)
    if task.kind == "classification" and np.unique(task.targets[idx]).size < 2:
        raise ValidationError("train split holds a single class", field=task.name)
    if task.kind == "multilabel":
        Y = task.targets[idx]
        if np.any(Y.min(axis=0) == Y.max(axis=0)):
            raise ValidationError("a label is constant over the train split", field=task.name)
    if task.kind == "survival" and not np.any(task.targets[1][idx]):
        raise ValidationError("no observed events in the train split", field=task.name)


def _seed_splits(task: ProbeTask, seed):
    """Re-partition train+val for ``seed`` (stratified for classification); test is fixed."""
    pool = np.sort(np.concatenate([task.splits["train"], task.splits["val"]]))
    n_val = len(task.splits["val"])
    rng = np.random.default_rng([int(seed), 7919])
    if task.kind != "classification" or n_val == 0:
        perm = rng.permutation(pool)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    y = task.targets[pool]
    frac = n_val / len(pool)
    train, val = [], []
    for c in np.unique(y):
        members = rng.permutation(pool[y == c])
        k = int(round(frac * len(members)))
        if len(members) > 1:
            k = min(max(k, 1), len(members) - 1)
        val.extend(members[:k].tolist())
        train.extend(members[k:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def fit_head(task: ProbeTask, seed=0, cfg: ProbeConfig | None = None, train_idx=None, val_idx=None) -> FittedHead:
    """Fit the task's head on a seed-specific train split; L2 strength picked on val.

    The grid is swept from the strongest penalty down, each fit warm-started
    from the previous one; on equal val scores the stronger penalty wins.
    Without a val split the weakest penalty is used.
    """
    cfg = cfg or ProbeConfig()
    if train_idx is None:
        train_idx, val_idx = _seed_splits(task, seed)
    _check_trainable(task, train_idx)
    if val_idx is None or len(val_idx) == 0:
        return _fit_fixed(task, train_idx, float(min(cfg.reg_grid)), cfg)
    best, best_score, head = None, -np.inf, None
    for lam in sorted(cfg.reg_grid, reverse=True):
        head = _fit_fixed(task, train_idx, float(lam), cfg, warm=head)
        score = evaluate(task, head, val_idx).get(task.metric)
        score = -np.inf if score is None else score
        if score > best_score:
            best, best_score = head, score
    return best if best is not None else head


def evaluate(task: ProbeTask, head: FittedHead, idx=None) -> dict:
    """All metrics applicable to the task kind on ``idx`` (default: test split)."""
    idx = task.splits["test"] if idx is None else np.asarray(idx)
    X = task.features[idx]
    out = {}
    if task.kind == "classification":
        y = task.targets[idx]
        pred = head.predict(X)
        out["acc"] = metrics.accuracy(y, pred) if len(np.unique(y)) > 1 else None
        out["bacc"] = metrics.balanced_accuracy(y, pred) if len(np.unique(y)) > 1 else None
        if head.classes is not None and len(head.classes) == 2:
            out["auc"] = metrics.roc_auc(y == head.classes[1], head.proba(X)[:, 1])
        else:
            out["auc"] = None
    elif task.kind == "multilabel":
        Y = task.targets[idx]
        out["auc"] = metrics.macro_auc(Y, head.scores(X))
        out["acc"] = float(np.mean(head.predict(X) == Y)) if len(idx) else None
    elif task.kind == "regression":
        out["r2"] = metrics.r2_score(task.targets[idx], head.predict(X))
    else:
        t, e = task.subset_targets(idx)
        out["cindex"] = metrics.concordance_index(t, e, head.predict(X))
    return out


# --- benchmark ------------------------------------------------------------

@dataclass
class BenchmarkReport:
    reports: dict
    failures: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        means = [r.mean for r in self.reports.values() if np.isfinite(r.mean)]
        return float(np.mean(means)) if means else float("nan")

    def rows(self):
        for name, rep in self.reports.items():
            for seed, v in enumerate(rep.values):
                yield name, seed, rep.metric, v
        yield "aggregate", "", "mean", self.aggregate

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "seed", "metric", "value"])
            for name, seed, metric, v in self.rows():
                w.writerow([name, seed, metric, _fmt(v)])


def _fmt(v):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "nan"
    return repr(float(v))


def _points(v):
    return float("nan") if v is None else 100.0 * float(v)


def run_benchmark(tasks, seeds=5, cfg: ProbeConfig | None = None) -> BenchmarkReport:
    """Fit and evaluate every task for ``seeds`` seeds; values are on a 0-100 scale."""
    cfg = cfg or ProbeConfig()
    reports, failures = {}, {}
    for task in tasks:
        try:
            vals = []
            for seed in range(seeds):
                head = fit_head(task, seed, cfg)
                vals.append(_points(evaluate(task, head).get(task.metric)))
            reports[task.name] = MetricReport(task.name, task.metric, vals)
        except Exception as e:  # recorded per task, the rest of the suite still runs
            failures[task.name] = f"{type(e).__name__}: {e}"
    if failures:
        warnings.warn(f"aggregate computed over completed tasks only; failed: {sorted(failures)}", stacklevel=2)
    return BenchmarkReport(reports, failures)


@dataclass
class FewShotPoint:
    shots: int
    report: MetricReport | None
    skipped: bool = False
    degenerate: bool = False


def _subsample(task, train_idx, k, rng):
    if task.kind in ("classification",):
        y = task.targets[train_idx]
        counts = {c: int(np.sum(y == c)) for c in np.unique(y)}
        if k > max(counts.values()):
            return None
        pick = []
        for c in sorted(counts):
            members = train_idx[y == c]
            pick.extend(rng.permutation(members)[: min(k, len(members))].tolist())
        return np.sort(np.array(pick, dtype=np.int64))
    if k > len(train_idx):
        return None
    return np.sort(rng.permutation(train_idx)[:k])


def _is_degenerate(task, idx):
    if task.kind != "classification":
        return False
    X = task.features[idx]
    y = task.targets[idx]
    _, inv = np.unique(X, axis=0, return_inverse=True)
    inv = inv.ravel()
    for g in np.unique(inv):
        if np.unique(y[inv == g]).size > 1:
            return True
    return False


def few_shot_sweep(task: ProbeTask, shots, seeds=5, cfg: ProbeConfig | None = None):
    """Metric vs. training shots (per class for classification, total otherwise)."""
    cfg = cfg or ProbeConfig()
    curve = []
    for k in shots:
        vals, skipped, degenerate = [], False, False
        for seed in range(seeds):
            tr, va = _seed_splits(task, seed)
            sub = _subsample(task, tr, int(k), np.random.default_rng([seed, 104729, int(k)]))
            if sub is None:
                skipped = True
                break
            degenerate |= _is_degenerate(task, sub)
            try:
                head = fit_head(task, seed, cfg, train_idx=sub, val_idx=va)
            except ValidationError:
                degenerate = True
                vals.append(float("nan"))
                continue
            vals.append(_points(evaluate(task, head).get(task.metric)))
        if skipped:
            curve.append(FewShotPoint(int(k), None, skipped=True))
        else:
            flags = ["degenerate"] if degenerate else []
            curve.append(FewShotPoint(int(k), MetricReport(task.name, task.metric, vals, flags), degenerate=degenerate))
    return curve


# --- feature extraction ---------------------------------------------------

def _backbone(model) -> Encoder:
    if isinstance(model, Checkpoint):
        model = model.build("teacher")
    if isinstance(model, SSLModel):
        return model.backbone
    return model


def _resize_batch(x: torch.Tensor, size) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x[:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]


@torch.no_grad()
def _embed(enc: Encoder, images, pooling="cls", batch=256):
    dtype = next(enc.parameters()).dtype
    size = enc.cfg.image_size
    out = []
    for i in range(0, len(images), batch):
        x = torch.as_tensor(np.asarray(images[i:i + batch]), dtype=dtype)
        x = _resize_batch(x, size)
        cls, patches = enc(x)
        out.append((cls if pooling == "cls" else patches.mean(1)).double().numpy())
    if not out:
        return np.zeros((0, enc.cfg.dim))
    return np.concatenate(out)


def volume_slices(vol, data_cfg: DataConfig | None = None) -> np.ndarray:
    data_cfg = data_cfg or DataConfig()
    if isinstance(vol, Volume):
        return normalize_volume(vol, data_cfg.ct_window, data_cfg.mr_percentiles).astype(np.float32)
    return np.asarray(vol, dtype=np.float32)


def extract_features(model, inputs, track="2D", pooling="cls", data_cfg: DataConfig | None = None) -> np.ndarray:
    """Frozen features: one row per image (2D) or the slice mean per volume (3D).

    Volume slices are embedded in a content-defined order, so the 3D feature
    does not depend on slice order at all (bitwise).
    """
    enc = _backbone(model)
    enc.eval()
    if track == "2D":
        imgs = np.asarray(inputs, dtype=np.float32)
        if imgs.ndim == 2:
            imgs = imgs[None]
        return _embed(enc, imgs, pooling)
    if track != "3D":
        raise ValidationError(f"unknown track {track!r}", field="track")
    feats = []
    for vol in inputs:
        slices = volume_slices(vol, data_cfg)
        if slices.ndim != 3 or slices.shape[0] == 0:
            raise ValidationError("volume has no slices", field="inputs")
        keys = [s.tobytes() for s in slices]
        order = sorted(range(len(keys)), key=keys.__getitem__)
        f = _embed(enc, slices[order], pooling)
        feats.append(f.mean(axis=0))
    return np.stack(feats)


def collapse_score(model, images) -> float:
    """Mean per-dimension std of class embeddings over ``images``."""
    f = extract_features(model, images, "2D")
    return float(f.std(axis=0).mean())


def similarity_map(model, query_image, patch_index, targets):
    """Cosine-similarity heatmaps of one query patch token against every target patch.

    Returns one ``(g_r, g_c)`` array per target, or ``None`` where a norm is
    zero (similarity undefined).
    """
    enc = _backbone(model)
    enc.eval()
    dtype = next(enc.parameters()).dtype
    g = enc.grid
    if not 0 <= int(patch_index) < g[0] * g[1]:
        raise ValidationError(f"patch index {patch_index} outside a {g[0]}x{g[1]} grid", field="patch_index")
    with torch.no_grad():
        q = torch.as_tensor(np.asarray(query_image)[None], dtype=dtype)
        _, qp = enc(_resize_batch(q, enc.cfg.image_size))
        qv = qp[0, int(patch_index)].double()
        out = []
        for t in targets:
            x = torch.as_tensor(np.asarray(t)[None], dtype=dtype)
            _, tp = enc(_resize_batch(x, enc.cfg.image_size))
            tp = tp[0].double()
            qn, tn = qv.norm(), tp.norm(dim=1)
            if qn == 0 or torch.any(tn == 0):
                out.append(None)
                continue
            sim = (tp @ qv) / (tn * qn)
            out.append(sim.clamp(-1.0, 1.0).reshape(g).numpy())
    return out


# --- phantom task suite ---------------------------------------------------

def best_slice(vol_norm: np.ndarray, tau_bg=0.05, tau_var=0.01, k=5) -> int:
    from .cropper import background_fraction
    return int(np.argmin([background_fraction(s, tau_bg, tau_var, k) for s in vol_norm]))


def phantom_task_defs(n, organ_count=None):
    """Task definitions of the shipped phantom suite over ``n`` volumes (60/20/20 split)."""
    idx = np.arange(n)
    n_tr, n_va = int(round(0.6 * n)), int(round(0.2 * n))
    splits = {"train": idx[:n_tr].tolist(), "val": idx[n_tr:n_tr + n_va].tolist(), "test": idx[n_tr + n_va:].tolist()}
    return [
        {"name": "organ", "kind": "classification", "track": "2D", "metric": "acc", "target": "organ_class", "splits": splits},
        {"name": "organ_3d", "kind": "classification", "track": "3D", "metric": "bacc", "target": "organ_class", "splits": splits},
        {"name": "lesion", "kind": "classification", "track": "2D", "metric": "auc", "target": "lesion", "splits": splits},
        {"name": "findings", "kind": "multilabel", "track": "2D", "metric": "auc", "target": ["lesion", "enlarged"], "splits": splits},
        {"name": "age", "kind": "regression", "track": "3D", "metric": "r2", "target": "age", "splits": splits},
        {"name": "survival", "kind": "survival", "track": "3D", "metric": "cindex",
         "target": ["survival_time", "survival_event"], "splits": splits},
    ]


def _label_table(volumes):
    rows = [dict(v.labels) for v in volumes]
    radii = np.array([r.get("primary_radius", 0.0) for r in rows])
    med = float(np.median(radii)) if len(radii) else 0.0
    for r, rad in zip(rows, radii):
        r.setdefault("enlarged", int(rad > med))
    return rows


def _targets(defn, rows):
    tgt = defn["target"]
    if defn["kind"] == "survival":
        return (np.array([r[tgt[0]] for r in rows], dtype=np.float64), np.array([r[tgt[1]] for r in rows]))
    if isinstance(tgt, list):
        return np.array([[r[k] for k in tgt] for r in rows])
    return np.array([r[tgt] for r in rows])


class TaskSuite:
    """Task definitions bound to volumes; features are computed per model."""

    def __init__(self, defs, volumes, data_cfg: DataConfig | None = None):
        self.defs = defs
        self.volumes = volumes
        self.data_cfg = data_cfg or DataConfig()
        self.rows = _label_table(volumes)
        self._norm = [volume_slices(v, self.data_cfg) for v in volumes]
        self._best = [self._norm[i][best_slice(self._norm[i])] for i in range(len(volumes))]

    @classmethod
    def phantom(cls, volumes, data_cfg=None):
        return cls(phantom_task_defs(len(volumes)), volumes, data_cfg)

    @classmethod
    def from_manifest(cls, path, data_cfg=None):
        """Load ``{"tasks": [{name, kind, track, metric, target, paths, splits}]}``.

        Every task lists the same RVOL ``paths`` (relative to the manifest)
        as the samples its split indices refer to.
        """
        path = Path(path)
        man = json.loads(path.read_text())
        tasks = man["tasks"]
        if not tasks:
            raise ValidationError("no tasks", field=str(path))
        paths = tasks[0]["paths"]
        for t in tasks:
            for key in ("name", "kind", "track", "paths", "splits", "target"):
                if key not in t:
                    raise ValidationError(f"task lacks '{key}'", field=t.get("name", "?"))
            if t["paths"] != paths:
                raise ValidationError("all tasks of a manifest must share one volume list", field=t["name"])
        vols = [load_volume(path.parent / p) for p in paths]
        return cls(tasks, vols, data_cfg)

    def slice_images(self):
        return np.stack(self._best)

    def build(self, model, pooling="cls", names=None):
        feats2d = feats3d = None
        out = []
        for d in self.defs:
            if names is not None and d["name"] not in names:
                continue
            if d["track"] == "3D":
                if feats3d is None:
                    feats3d = extract_features(model, self._norm, "3D", pooling)
                F_ = feats3d
            else:
                if feats2d is None:
                    feats2d = extract_features(model, self.slice_images(), "2D", pooling)
                F_ = feats2d
            out.append(ProbeTask(d["name"], d["kind"], F_, _targets(d, self.rows), d["splits"],
                                 track=d["track"], metric=d.get("metric")))
        return out


def write_manifest(path, volume_files, n=None):
    n = len(volume_files) if n is None else n
    defs = phantom_task_defs(n)
    for d in defs:
        d["paths"] = list(volume_files)
    Path(path).write_text(json.dumps({"tasks": defs}, indent=1))


def load_features_csv(path, name, kind, target_columns, splits, track="2D", metric=None) -> ProbeTask:
    """Generic loader: CSV with feature columns ``f0, f1, ...`` plus the named target columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fcols = [c for c in rows[0] if re.fullmatch(r"f\d+", c)]
    if not fcols:
        raise ValidationError("no feature columns f0, f1, ...", field=str(path))
    X = np.array([[float(r[c]) for c in fcols] for r in rows])
    if kind == "survival":
        y = (np.array([float(r[target_columns[0]]) for r in rows]), np.array([int(float(r[target_columns[1]])) for r in rows]))
    elif kind == "multilabel":
        y = np.array([[int(float(r[c])) for c in target_columns] for r in rows])
    elif kind == "regression":
        y = np.array([float(r[target_columns[0]]) for r in rows])
    else:
        y = np.array([int(float(r[target_columns[0]])) for r in rows])
    return ProbeTask(name, kind, X, y, splits, track=track, metric=metric)
