"""Independent reference computations used by the tests.

Nothing here imports the code under test except where a function needs a
model forward pass to differentiate numerically.
"""

import itertools
import math

import numpy as np

FD_STEP = 1e-5


def central_difference(f, x, h=FD_STEP):
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Max absolute deviation relative to the larger gradient magnitude."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def brute_confusion(y_true, y_pred, c):
    m = [[0] * c for _ in range(c)]
    for t, p in zip(y_true, y_pred):
        m[t][p] += 1
    return np.array(m)


def brute_class_metrics(y_true, y_pred, c):
    """Per-class (precision, recall, f1, accuracy) by counting pairs one at a time."""
    rows = []
    n = len(y_true)
    for k in range(c):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == k and p == k)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != k and p == k)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == k and p != k)
        tn = n - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append((prec, rec, f1, (tp + tn) / n))
    return rows


def pair_count_auc(positive, scores):
    """P(score_pos > score_neg) + 0.5 P(tie), over all pos/neg pairs."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def brute_soft_vote(members):
    """Plain-python averaging and lowest-index arg-max."""
    n, c = len(members), len(members[0])
    avg = [math.fsum(m[i] for m in members) / n for i in range(c)]
    best = max(avg)
    winners = [i for i, v in enumerate(avg) if v >= best - 1e-12]
    return winners[0], avg, len(winners) > 1


def hand_bilinear_2x2_to_4x4(src):
    """Half-pixel-centre bilinear upsampling of a 2x2 grid, coordinates worked out by hand.

    Output centres map to source coordinates -0.25, 0.25, 0.75, 1.25, which
    clamp to 0, 0.25, 0.75, 1.
    """
    coords = [0.0, 0.25, 0.75, 1.0]
    out = np.zeros((4, 4))
    for i, y in enumerate(coords):
        for j, x in enumerate(coords):
            out[i, j] = (src[0][0] * (1 - y) * (1 - x) + src[0][1] * (1 - y) * x
                         + src[1][0] * y * (1 - x) + src[1][1] * y * x)
    return out


def adamw_scalar_trace(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Step a scalar parameter by hand, one line per formula."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * wd * p
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(p)
    return trace
