"""Independent reference implementations used only by the test suite.

Each oracle favors obviousness over speed: per-threshold recounts, per-pixel
loops, and permutation enumeration. They share no code with the package
beyond formula contracts, so agreement is evidence, not tautology.
"""

from __future__ import annotations

import itertools

import numpy as np


def naive_threshold_metrics(scores, labels):
    """AUROC / AP / FPR95 by recounting at every distinct threshold.

    AUROC is accumulated in exact integer arithmetic (trapezoid over tie
    plateaus, numerator doubled) with a single final division.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    p_total = int(y.sum())
    n_total = int(y.size - p_total)
    assert p_total > 0 and n_total > 0

    auroc_num = 0  # doubled area in units of 1/(2 P N)
    ap_val = 0.0
    fpr95 = None
    tp_prev = fp_prev = 0
    for thr in sorted(set(s.tolist()), reverse=True):
        kept = s >= thr
        tp = int((y[kept] == 1).sum())
        fp = int((y[kept] == 0).sum())
        auroc_num += (fp - fp_prev) * (tp + tp_prev)
        if tp > tp_prev:
            ap_val += (tp - tp_prev) / p_total * (tp / (tp + fp))
        if fpr95 is None and 20 * tp >= 19 * p_total:
            fpr95 = fp / n_total
        tp_prev, fp_prev = tp, fp
    # Rank AUROC counts positives above negatives; the threshold sweep walks
    # the same plateaus, so the doubled trapezoid equals the doubled rank sum.
    auroc = auroc_num / (2 * p_total * n_total)
    return auroc, ap_val, fpr95


def reference_histograms(scores, mask, bins, value_range):
    """Per-pixel reimplementation of the dual-histogram binning rule."""
    lo, hi = value_range
    pos = np.zeros(bins, dtype=np.int64)
    neg = np.zeros(bins, dtype=np.int64)
    for s, m in zip(
        np.asarray(scores, dtype=np.float64).ravel().tolist(),
        np.asarray(mask).ravel().tolist(),
    ):
        if m == 128:
            continue
        idx = int((s - lo) * (bins / (hi - lo)))
        idx = min(max(idx, 0), bins - 1)
        if m == 255:
            pos[idx] += 1
        else:
            neg[idx] += 1
    return pos, neg


def brute_force_assignment(costs):
    """Minimum-cost assignment by enumerating every permutation.

    Row-major sum order matches the package's total recomputation, so equal
    assignments produce bit-equal totals. Only sane for k <= 8.
    """
    costs = np.asarray(costs, dtype=np.float64)
    rows, cols = costs.shape
    assert rows <= cols
    best_total = None
    best_perm = None
    for perm in itertools.permutations(range(cols), rows):
        total = 0.0
        for i, j in enumerate(perm):
            total += float(costs[i, j])
        if best_total is None or total < best_total:
            best_total = total
            best_perm = perm
    return {i: j for i, j in enumerate(best_perm)}, best_total


def brute_force_min_cost(costs):
    """Vectorized permutation minimum for speed at sizes up to 7.

    Sums each permutation row-by-row in index order, reproducing the same
    float addition sequence as the scalar loop.
    """
    costs = np.asarray(costs, dtype=np.float64)
    rows, cols = costs.shape
    assert rows <= cols
    perms = np.array(list(itertools.permutations(range(cols), rows)), dtype=np.intp)
    totals = np.zeros(len(perms), dtype=np.float64)
    for i in range(rows):
        totals = totals + costs[i, perms[:, i]]
    return float(totals.min())


def naive_median(binary, radius):
    """Majority vote over a (2r+1)^2 window with edge replication."""
    if radius == 0:
        return binary.copy()
    h, w = binary.shape
    out = np.zeros_like(binary)
    for y in range(h):
        for x in range(w):
            y0, y1 = y - radius, y + radius + 1
            x0, x1 = x - radius, x + radius + 1
            votes = 0
            for yy in range(y0, y1):
                for xx in range(x0, x1):
                    cy = min(max(yy, 0), h - 1)
                    cx = min(max(xx, 0), w - 1)
                    votes += int(binary[cy, cx])
            size = 2 * radius + 1
            out[y, x] = votes * 2 > size * size
    return out


def naive_erosion(binary, kernel, outside=True):
    """All-ones square kernel erosion; `outside` sets the border fill."""
    h, w = binary.shape
    r = kernel // 2
    out = np.zeros_like(binary)
    for y in range(h):
        for x in range(w):
            keep = True
            for yy in range(y - r, y + r + 1):
                for xx in range(x - r, x + r + 1):
                    if 0 <= yy < h and 0 <= xx < w:
                        value = binary[yy, xx]
                    else:
                        value = outside
                    if not value:
                        keep = False
                        break
                if not keep:
                    break
            out[y, x] = keep
    return out


def naive_dilation(binary, kernel, outside=False):
    h, w = binary.shape
    r = kernel // 2
    out = np.zeros_like(binary)
    for y in range(h):
        for x in range(w):
            hit = False
            for yy in range(y - r, y + r + 1):
                for xx in range(x - r, x + r + 1):
                    if 0 <= yy < h and 0 <= xx < w:
                        value = binary[yy, xx]
                    else:
                        value = outside
                    if value:
                        hit = True
                        break
                if hit:
                    break
            out[y, x] = hit
    return out


def naive_pearson(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    return float((xc * yc).sum() / np.sqrt((xc * xc).sum() * (yc * yc).sum()))
