"""Evaluation metrics. Undefined values (e.g. AUC with one class) are ``None``."""
from __future__ import annotations

import numpy as np

from . import kernels


def accuracy(y_true, y_pred):
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        return None
    return float(np.mean(y_true == np.asarray(y_pred)))


def balanced_accuracy(y_true, y_pred):
    """Mean recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    classes = np.unique(y_true)
    if classes.size == 0:
        return None
    return float(np.mean([np.mean(y_pred[y_true == c] == c) for c in classes]))


def roc_auc(y_true, scores):
    """Mann-Whitney AUC by pair counting; ties count one half."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    wins, ties = kernels.auc_pair_counts(pos, neg)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def macro_auc(Y_true, scores):
    """Mean AUC over label columns; columns with one class are skipped."""
    Y = np.asarray(Y_true)
    S = np.asarray(scores, dtype=np.float64)
    vals = [roc_auc(Y[:, j], S[:, j]) for j in range(Y.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def r2_score(y_true, y_pred):
    y = np.asarray(y_true, dtype=np.float64)
    f = np.asarray(y_pred, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if y.size < 2 or ss_tot == 0.0:
        return None
    return 1.0 - float(np.sum((y - f) ** 2)) / ss_tot


def concordance_index(time, event, risk):
    """Harrell's c-index: higher risk should mean earlier event; ties count one half."""
    conc, tied, comp = kernels.concordance_counts(time, event, risk)
    if comp == 0:
        return None
    return (conc + 0.5 * tied) / comp
