"""Independent reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def partitions(n, K):
    """All labelings of n items onto exactly K labels, canonical form only."""
    for lab in itertools.product(range(K), repeat=n):
        if len(set(lab)) != K:
            continue
        # canonical: first occurrences appear in increasing label order
        seen = []
        for x in lab:
            if x not in seen:
                seen.append(x)
        if seen == list(range(K)):
            yield np.array(lab)


def expected_loss_bruteforce(draws, K):
    """Minimum over partitions and centres of the Monte Carlo expected K-means loss.

    For a fixed partition the optimal centre of a cluster is the average of all
    draws of all its members, which is computed directly from the draws.
    """
    m, n, _ = draws.shape
    best = (math.inf, None)
    for lab in partitions(n, K):
        loss = 0.0
        for k in range(K):
            pts = draws[:, lab == k, :].reshape(-1, draws.shape[2])
            b = pts.mean(axis=0)
            loss += ((draws[:, lab == k, :] - b) ** 2).sum() / m
        if loss < best[0]:
            best = (loss, lab)
    return best


def kmeans_bruteforce(x, K):
    """Global minimum of the K-means loss on points x."""
    best = (math.inf, None)
    for lab in partitions(x.shape[0], K):
        loss = sum(((x[lab == k] - x[lab == k].mean(axis=0)) ** 2).sum() for k in range(K))
        if loss < best[0]:
            best = (loss, lab)
    return best


def ari_hand(a, b):
    """Adjusted Rand index from the contingency table."""
    a = np.asarray(a)
    b = np.asarray(b)
    la, lb = np.unique(a), np.unique(b)
    table = np.array([[np.sum((a == x) & (b == y)) for y in lb] for x in la])

    def c2(v):
        return v * (v - 1) / 2.0

    idx = c2(table).sum()
    ra = c2(table.sum(axis=1)).sum()
    rb = c2(table.sum(axis=0)).sum()
    total = c2(len(a))
    expected = ra * rb / total
    mx = 0.5 * (ra + rb)
    if mx == expected:
        return 1.0
    return (idx - expected) / (mx - expected)


def naive_stats(stages, events, L=30.0):
    """Per-epoch loop: transition counts, event counts and exposure."""
    m = len(stages)
    ind = np.zeros(m, int)
    overlap = np.zeros(m)
    for j in range(m):
        lo, hi = j * L, (j + 1) * L
        for start, dur, _ in events:
            ov = min(hi, start + dur) - max(lo, start)
            if ov > 0:
                overlap[j] += ov
                if stages[j] != 0:
                    ind[j] = 1
    c = np.zeros((2, 2, 3))
    for j in range(m - 1):
        if stages[j] in (1, 2):
            c[ind[j], stages[j] - 1, stages[j + 1]] += 1
    v = np.zeros(2)
    for _, _, k in events:
        v[k - 1] += 1
    t = np.zeros(2)
    for j in range(m):
        if stages[j] in (1, 2):
            t[stages[j] - 1] += L - overlap[j]
    return c, v, t


def central_difference(f, x, h=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g
