"""Bayes-optimal K-means clustering of patient random effects.

K-means applied to posterior means minimizes the posterior expected K-means
loss, because for any centre ``b``

    E||theta_i - b||^2 = E||theta_i - E theta_i||^2 + ||E theta_i - b||^2

and the first term does not depend on the clustering. The helpers below work
on either a :class:`~somnus.sampler.PosteriorDraws` or a plain array of
pooled draws shaped ``(m, n, d)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import adjusted_rand_score
from threadpoolctl import threadpool_limits

#: Probability margin below which a hard assignment counts as a tie.
TIE_TOL = 1e-12
#: Default cap on ``n * d * m`` for concatenated K-means.
CONCAT_CAP = 50_000_000


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterSolution:
    """A hard clustering with centres and per-patient assignment probabilities.

    ``assignments`` are 0-based internally; :meth:`to_json` writes 1-based
    labels. ``boundary`` marks patients whose hard label is not the
    (strict) most probable cluster.
    """

    K: int
    centers: np.ndarray
    assignments: np.ndarray
    assign_probs: np.ndarray
    expected_loss: float
    boundary: np.ndarray = field(default=None)
    method: str = "posterior_mean"

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        self.assign_probs = np.asarray(self.assign_probs, dtype=float)
        if self.boundary is None:
            self.boundary = boundary_flags(self.assignments, self.assign_probs)

    @property
    def n(self) -> int:
        return len(self.assignments)

    def to_json(self, column_names: Optional[Sequence[str]] = None, patient_ids=None) -> dict:
        d = self.centers.shape[1]
        cols = list(column_names) if column_names is not None else [f"x{j}" for j in range(d)]
        ids = list(patient_ids) if patient_ids is not None else [str(i) for i in range(self.n)]
        return {
            "method": self.method,
            "K": int(self.K),
            "columns": cols,
            "centers": [dict(zip(cols, map(float, row))) for row in self.centers],
            "patients": [
                {
                    "patient_id": pid,
                    "cluster": int(c) + 1,
                    "assign_probs": [float(p) for p in probs],
                    "boundary": bool(b),
                }
                for pid, c, probs, b in zip(ids, self.assignments, self.assign_probs, self.boundary)
            ],
            "expected_loss": float(self.expected_loss),
        }


def _theta(draws) -> np.ndarray:
    """Pooled draws as an ``(m, n, d)`` float array."""
    if hasattr(draws, "theta_draws"):
        x = draws.theta_draws()
    else:
        x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ClusteringError("draws must be non-empty and shaped (m, n, d)")
    return x


def boundary_flags(assignments, probs, tol: float = TIE_TOL) -> np.ndarray:
    p = np.asarray(probs)
    own = p[np.arange(len(assignments)), assignments]
    return own < p.max(axis=1) - tol


def nearest_center(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest centre (squared Euclidean) along the last axis.

    Ties go to the smallest index.
    """
    d2 = ((x[..., None, :] - centers) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)


def kmeans(x: np.ndarray, K: int, restarts: int = 100, seed: int = 0):
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` starts.

    Returns ``(centers, labels, loss)`` where labels are the nearest-centre
    indices and centres the means of their members. Raises if a cluster is
    left empty, which happens when ``x`` has fewer than ``K`` distinct rows.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if K < 1:
        raise ClusteringError("K must be at least 1")
    if K > n:
        raise ClusteringError(f"K={K} exceeds the number of patients ({n})")
    with threadpool_limits(limits=1), warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=K, init="k-means++", n_init=int(restarts), algorithm="lloyd",
                    tol=0.0, max_iter=500, random_state=np.random.RandomState(seed % (2**32)))
        km.fit(x)
    labels = nearest_center(x, km.cluster_centers_)
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise ClusteringError(f"K-means left {int(np.sum(counts == 0))} empty cluster(s); "
                              "fewer distinct points than clusters")
    centers = np.stack([x[labels == k].mean(axis=0) for k in range(K)])
    loss = float(((x - centers[labels]) ** 2).sum())
    return centers, labels, loss


def expected_loss(draws, assignments, centers) -> float:
    """Monte Carlo posterior expected K-means loss of a fixed clustering."""
    th = _theta(draws)
    b = np.asarray(centers)[np.asarray(assignments)]
    return float(((th - b) ** 2).sum(axis=(1, 2)).mean())


def assignment_probabilities(draws, centers) -> np.ndarray:
    """Per-patient probability that each fixed centre is the nearest one.

    Entry ``(i, k)`` is the fraction of draws in which centre ``k`` is
    closest to ``theta_i``. Ties go to the smallest index.
    """
    th = _theta(draws)
    centers = np.asarray(centers, dtype=float)
    if centers.ndim != 2 or centers.shape[0] < 1 or not np.all(np.isfinite(centers)):
        raise ClusteringError("centers must be a finite (K, d) array")
    m, n, _ = th.shape
    K = centers.shape[0]
    counts = np.zeros((n, K))
    # chunk over draws to bound memory
    step = max(1, 2_000_000 // max(1, n * K * th.shape[2]))
    for s in range(0, m, step):
        lab = nearest_center(th[s:s + step], centers)
        for k in range(K):
            counts[:, k] += (lab == k).sum(axis=0)
    return counts / m


def posterior_mean_kmeans(draws, K: int, restarts: int = 100, seed: int = 0) -> ClusterSolution:
    """K-means on posterior means of the random effects."""
    th = _theta(draws)
    means = th.mean(axis=0)
    centers, labels, _ = kmeans(means, K, restarts, seed)
    probs = assignment_probabilities(th, centers)
    return ClusterSolution(K, centers, labels, probs, expected_loss(th, labels, centers),
                           method="posterior_mean")


def concatenated_kmeans(draws, K: int, restarts: int = 100, seed: int = 0,
                        cap: int = CONCAT_CAP, override: bool = False) -> ClusterSolution:
    """K-means on every patient's draws concatenated into one long vector.

    Reported centres are the per-cluster averages of posterior means.
    """
    th = _theta(draws)
    m, n, d = th.shape
    if n * d * m > cap and not override:
        raise ClusteringError(f"concatenated matrix has {n * d * m} entries, above the cap {cap}; "
                              "pass override=True or thin the draws")
    flat = np.ascontiguousarray(th.transpose(1, 0, 2).reshape(n, m * d))
    _, labels, _ = kmeans(flat, K, restarts, seed)
    means = th.mean(axis=0)
    centers = np.stack([means[labels == k].mean(axis=0) for k in range(K)])
    probs = assignment_probabilities(th, centers)
    return ClusterSolution(K, centers, labels, probs, expected_loss(th, labels, centers),
                           method="concatenated")


def coclustering_matrix(partitions) -> np.ndarray:
    """Fraction of partitions in which each pair of items shares a cluster."""
    P = np.asarray(partitions)
    if P.ndim == 1:
        P = P[None]
    n = P.shape[1]
    out = np.zeros((n, n))
    for row in P:
        out += row[:, None] == row[None, :]
    return out / P.shape[0]


@dataclass
class CoclusteringResult:
    matrix: np.ndarray
    partitions: np.ndarray
    ari_to_reference: Optional[np.ndarray]

    @property
    def mean_ari(self) -> float:
        if self.ari_to_reference is None:
            return float("nan")
        return float(np.mean(self.ari_to_reference))


def per_sample_kmeans_coclustering(draws, K: int, seed: int = 0, reference=None,
                                   restarts: int = 10) -> CoclusteringResult:
    """K-means run separately on each posterior draw of the random effects."""
    th = _theta(draws)
    m = th.shape[0]
    seeds = np.random.SeedSequence(seed).generate_state(m)
    parts = np.empty((m, th.shape[1]), dtype=np.int64)
    for j in range(m):
        parts[j] = kmeans(th[j], K, restarts, int(seeds[j]))[1]
    ari = None
    if reference is not None:
        ari = np.array([adjusted_rand_index(reference, p) for p in parts])
    return CoclusteringResult(coclustering_matrix(parts), parts, ari)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Pair-counting adjusted Rand index; 1 for identical partitions."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ClusteringError("label vectors must be 1-d and of equal length")
    if len(a) < 2:
        raise ClusteringError("need at least two items")
    return float(adjusted_rand_score(a, b))


def kmeans_sweep(draws, Ks: Sequence[int], restarts: int = 100, seed: int = 0) -> list[dict]:
    """Within-cluster loss of posterior-mean K-means over a range of K."""
    th = _theta(draws)
    means = th.mean(axis=0)
    rows = []
    for K in Ks:
        if K > means.shape[0]:
            continue
        centers, labels, loss = kmeans(means, K, restarts, seed)
        rows.append({"K": int(K), "within_loss": loss,
                     "expected_loss": expected_loss(th, labels, centers)})
    return rows


#: JSON Schema of the ``clusters.json`` report written by ``somnus cluster``.
CLUSTERS_SCHEMA = {
    "type": "object",
    "required": ["method", "K", "columns", "centers", "patients", "expected_loss", "k_sweep"],
    "properties": {
        "method": {"enum": ["posterior_mean", "concatenated", "summary_statistics"]},
        "K": {"type": "integer", "minimum": 1},
        "columns": {"type": "array", "items": {"type": "string"}},
        "centers": {"type": "array", "items": {"type": "object",
                                                "additionalProperties": {"type": "number"}}},
        "patients": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["patient_id", "cluster", "assign_probs", "boundary"],
                "properties": {
                    "patient_id": {"type": "string"},
                    "cluster": {"type": "integer", "minimum": 1},
                    "assign_probs": {"type": "array",
                                     "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "boundary": {"type": "boolean"},
                },
            },
        },
        "expected_loss": {"type": "number", "minimum": 0},
        "k_sweep": {
            "type": "array",
            "items": {"type": "object", "required": ["K", "within_loss", "expected_loss"]},
        },
    },
}
