"""Independent brute-force reference computations used by the tests.

Everything here is written with plain loops over pairs/thresholds and does not
call into the package's own metric or loss code.
"""
import math

import numpy as np


def ms_loss_by_pairs(emb, labels, alpha, beta, base, eps):
    """Multi-similarity loss by explicit enumeration of every (anchor, other) pair."""
    n = len(emb)
    unit = [np.asarray(e, float) / math.sqrt(sum(v * v for v in e)) for e in emb]

    def sim(i, j):
        return float(sum(a * b for a, b in zip(unit[i], unit[j])))

    total = 0.0
    for i in range(n):
        pos = [sim(i, j) for j in range(n) if j != i and labels[j] == labels[i]]
        neg = [sim(i, j) for j in range(n) if labels[j] != labels[i]]
        if neg:
            hardest_neg = max(neg)
            kept_pos = [s for s in pos if s < hardest_neg + eps]
        else:
            kept_pos = pos
        if pos:
            hardest_pos = min(pos)
            kept_neg = [s for s in neg if s > hardest_pos - eps]
        else:
            kept_neg = neg
        pos_term = math.log(1 + sum(math.exp(-alpha * (s - base)) for s in kept_pos)) / alpha
        neg_term = math.log(1 + sum(math.exp(beta * (s - base)) for s in kept_neg)) / beta
        total += pos_term + neg_term
    return total / n


def central_difference(fn, x, h):
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def sweep_rates(genuine, imposter):
    """(thresholds, FAR, FRR) by recounting every score at every threshold."""
    values = sorted(set(list(genuine) + list(imposter)))
    thresholds = [-math.inf] + values + [math.inf]
    far, frr = [], []
    for t in thresholds:
        far.append(sum(1 for s in imposter if s >= t) / len(imposter))
        frr.append(sum(1 for s in genuine if s < t) / len(genuine))
    return thresholds, far, frr


def sweep_eer(genuine, imposter):
    _, far, frr = sweep_rates(genuine, imposter)
    for i in range(len(far)):
        d = far[i] - frr[i]
        if d == 0:
            return far[i]
        if d < 0:
            d0 = far[i - 1] - frr[i - 1]
            w = d0 / (d0 - d)
            return far[i - 1] + w * (far[i] - far[i - 1])
    raise AssertionError("curves never cross")


def sweep_frr_at_far(genuine, imposter, target):
    _, far, frr = sweep_rates(genuine, imposter)
    for a, r in zip(far, frr):
        if a <= target:
            return r
    raise AssertionError("no threshold reaches the FAR target")


def greedy_loads(counts, k):
    """Re-simulate the greedy rule: descending count (ties by id) onto the lightest fold."""
    loads = [0] * k
    for sid, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        lightest = 0
        for f in range(1, k):
            if loads[f] < loads[lightest]:
                lightest = f
        loads[lightest] += c
    return loads
