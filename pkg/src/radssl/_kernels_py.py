"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same results; the package
picks the compiled one at import when it is available.
"""
import numpy as np


def rasterize_blocks(tops, lefts, heights, widths, g_r, g_c, need):
    """OR rectangles into a ``g_r x g_c`` grid until ``need`` cells are set.

    Rectangles may hang over the border and are clipped. Returns the uint8
    mask and the number of rectangles consumed.
    """
    mask = np.zeros((g_r, g_c), dtype=np.uint8)
    count = 0
    used = 0
    for t, l, h, w in zip(tops, lefts, heights, widths):
        if count >= need:
            break
        used += 1
        r0, r1 = max(int(t), 0), min(int(t) + int(h), g_r)
        c0, c1 = max(int(l), 0), min(int(l) + int(w), g_c)
        if r0 >= r1 or c0 >= c1:
            continue
        block = mask[r0:r1, c0:c1]
        count += int(block.size - np.count_nonzero(block))
        block[...] = 1
    return mask, used


def auc_pair_counts(pos, neg):
    """(wins, ties) over all positive/negative score pairs."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    wins = 0
    ties = 0
    for p in pos:
        wins += int(np.count_nonzero(p > neg))
        ties += int(np.count_nonzero(p == neg))
    return wins, ties


def concordance_counts(time, event, risk):
    """(concordant, tied, comparable) for Harrell's c-index.

    A pair (i, j) is comparable when subject i has an observed event and
    ``time[i] < time[j]``; it is concordant when ``risk[i] > risk[j]``.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    risk = np.asarray(risk, dtype=np.float64)
    conc = tied = comp = 0
    for i in np.flatnonzero(event):
        later = time > time[i]
        comp += int(np.count_nonzero(later))
        conc += int(np.count_nonzero(risk[i] > risk[later]))
        tied += int(np.count_nonzero(risk[i] == risk[later]))
    return conc, tied, comp
