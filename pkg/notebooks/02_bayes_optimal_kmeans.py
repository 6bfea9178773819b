"""
Why K-means on posterior means is Bayes optimal
===============================================

A numerical look at the decomposition behind the clustering rule. For any
centre b, the expected squared distance from an uncertain point splits into
its posterior variance plus the distance from its posterior mean, so the
clustering that minimizes posterior expected loss only ever sees the means.

Run with ``python3 notebooks/02_bayes_optimal_kmeans.py``.
"""

from itertools import product

import numpy as np

from somnus.clustering import assignment_probabilities, expected_loss

rng = np.random.default_rng(0)

# six patients, two dimensions, 50 posterior draws each
means = rng.normal(scale=2.0, size=(6, 2))
draws = means + rng.normal(size=(50, 6, 2))

# the identity, for one patient and an arbitrary centre
b = np.array([1.0, -1.0])
x = draws[:, 0]
lhs = ((x - b) ** 2).sum(axis=1).mean()
m = x.mean(axis=0)
rhs = ((x - m) ** 2).sum(axis=1).mean() + ((m - b) ** 2).sum()
print("E|x - b|^2 =", lhs, " variance + |mean - b|^2 =", rhs)


def best_partition(points, K, score):
    best = (np.inf, None)
    for lab in product(range(K), repeat=len(points)):
        lab = np.array(lab)
        if len(set(lab)) < K:
            continue
        centres = np.stack([points[lab == k].mean(axis=0) for k in range(K)])
        best = min(best, (score(lab, centres), tuple(lab)), key=lambda t: t[0])
    return best


# brute force over all two-cluster partitions, scoring the full posterior loss
post_mean = draws.mean(axis=0)
full = best_partition(post_mean, 2, lambda lab, c: expected_loss(draws, lab, c))
# the same search, but scoring only the posterior means
plain = best_partition(post_mean, 2, lambda lab, c: ((post_mean - c[lab]) ** 2).sum())
print("best partition under posterior loss:   ", [int(c) for c in full[1]])
print("best partition of the posterior means: ", [int(c) for c in plain[1]])

# the uncertainty that remains: how often each patient is nearest each centre
lab = np.array(plain[1])
centres = np.stack([post_mean[lab == k].mean(axis=0) for k in range(2)])
probs = assignment_probabilities(draws, centres)
for i, p in enumerate(probs):
    print(f"patient {i}: cluster {lab[i] + 1}, P(nearest centre) = {np.round(p, 2)}")
