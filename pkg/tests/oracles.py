"""Brute-force reference implementations shared by the test modules.

Everything here is written from first principles in plain numpy/python,
independent of the package's computation paths.
"""

import numpy as np


def conv1d_loops(x, kernels, stride, padding):
    c_in, length = x.shape
    c_out, _, k = kernels.shape
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding : padding + length] = x
    l_out = (length + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, l_out))
    for o in range(c_out):
        for pos in range(l_out):
            acc = 0.0
            for ci in range(c_in):
                for t in range(k):
                    acc += kernels[o, ci, t] * xp[ci, pos * stride + t]
            out[o, pos] = acc
    return out


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def iou_by_counting(a, b):
    """Interval IoU by literally counting snippet indices."""
    sa = set(range(a[0], a[1] + 1))
    sb = set(range(b[0], b[1] + 1))
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


def nms_consistent_subsets(candidates, thresh):
    """All subsets of sorted candidates consistent with greedy class-wise
    suppression: a candidate belongs iff no earlier member of the subset
    with the same class overlaps it at IoU ≥ thresh. Exactly one subset
    should exist."""
    n = len(candidates)
    consistent = []
    for bits in range(2**n):
        subset = [i for i in range(n) if bits >> i & 1]
        ok = True
        for i in range(n):
            blocked = any(
                j in subset
                and candidates[j][2] == candidates[i][2]
                and iou_by_counting(candidates[j][3:5], candidates[i][3:5]) >= thresh
                for j in range(i)
            )
            if (i in subset) == blocked:
                ok = False
                break
        if ok:
            consistent.append(subset)
    return consistent


def greedy_ap(matches):
    """All-points interpolated AP from an ordered hit/miss list and the
    total number of ground-truth instances, via explicit PR-curve
    integration."""
    flags, num_gt = matches
    if num_gt == 0:
        return None
    tp = fp = 0
    precision, recall = [], []
    for hit in flags:
        if hit:
            tp += 1
        else:
            fp += 1
        precision.append(tp / (tp + fp))
        recall.append(tp / num_gt)
    mprec = [0.0] + precision + [0.0]
    mrec = [0.0] + recall + [1.0]
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    area = 0.0
    for i in range(1, len(mrec)):
        area += (mrec[i] - mrec[i - 1]) * mprec[i]
    return area
