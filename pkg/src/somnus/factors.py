"""Factor-loading alignment across draws and the scree pre-fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import THETA_NAMES


@dataclass
class AlignedLoadings:
    """Loadings after removing column permutation and sign switching.

    ``draws`` is ``(m, 10, k)``; ``flagged`` marks entries whose 95%
    credible interval contains zero and ``zeroed`` is the posterior mean with
    those entries set to zero.
    """

    draws: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    flagged: np.ndarray
    pivot: int
    permutations: np.ndarray
    signs: np.ndarray

    @property
    def zeroed(self) -> np.ndarray:
        return np.where(self.flagged, 0.0, self.mean)

    def rows(self) -> list[dict]:
        out = []
        for r, name in enumerate(THETA_NAMES[: self.mean.shape[0]]):
            for c in range(self.mean.shape[1]):
                out.append({
                    "effect": name, "factor": c + 1,
                    "mean": float(self.mean[r, c]), "q025": float(self.lower[r, c]),
                    "q975": float(self.upper[r, c]), "ci_contains_zero": bool(self.flagged[r, c]),
                    "zeroed": float(self.zeroed[r, c]),
                })
        return out

    def to_json(self) -> dict:
        return {"n_factors": int(self.mean.shape[1]), "pivot_draw": int(self.pivot), "loadings": self.rows()}


def _abs_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Signed Pearson correlations between the columns of ``a`` and ``b``."""
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.linalg.norm(ac, axis=0)
    nb = np.linalg.norm(bc, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (ac.T @ bc) / np.outer(na, nb)
    return np.nan_to_num(r)


def _match(draw: np.ndarray, pivot: np.ndarray):
    """Greedy column matching of ``draw`` to ``pivot`` by absolute correlation."""
    k = pivot.shape[1]
    r = _abs_corr(draw, pivot)
    perm = np.empty(k, np.int64)
    sign = np.ones(k)
    free_d = np.ones(k, bool)
    free_p = np.ones(k, bool)
    for _ in range(k):
        score = np.where(free_d[:, None] & free_p[None, :], np.abs(r), -1.0)
        i, j = np.unravel_index(np.argmax(score), score.shape)
        perm[j] = i
        # sign from correlation, or from the raw inner product when uninformative
        s = r[i, j] if r[i, j] != 0 else draw[:, i] @ pivot[:, j]
        sign[j] = -1.0 if s < 0 else 1.0
        free_d[i] = free_p[j] = False
    return perm, sign


def align_factors(loadings) -> AlignedLoadings:
    """Align loading draws to a pivot draw, then fix column signs.

    The pivot is the draw whose loading matrix has the median Frobenius norm.
    Each draw's columns are greedily permuted and sign-flipped to match the
    pivot's columns by absolute Pearson correlation. Finally every column is
    flipped so that its largest-magnitude mean entry is positive.

    Parameters
    ----------
    loadings : PosteriorDraws or array of shape (m, 10, k) or (chains, samples, 10, k)
    """
    L = loadings.loadings if hasattr(loadings, "loadings") else np.asarray(loadings, float)
    if L.ndim == 4:
        L = L.reshape((-1,) + L.shape[2:])
    if L.ndim != 3 or L.shape[2] < 1:
        raise ValueError("need loading draws shaped (m, p, k) with k >= 1")
    m, p, k = L.shape
    norms = np.linalg.norm(L, axis=(1, 2))
    pivot = int(np.argsort(norms, kind="stable")[(m - 1) // 2])
    P = L[pivot]
    perms = np.empty((m, k), np.int64)
    signs = np.empty((m, k))
    out = np.empty_like(L)
    for s in range(m):
        perm, sign = _match(L[s], P)
        perms[s], signs[s] = perm, sign
        out[s] = L[s][:, perm] * sign
    mean = out.mean(axis=0)
    flip = np.where(mean[np.argmax(np.abs(mean), axis=0), np.arange(k)] < 0, -1.0, 1.0)
    out *= flip
    signs *= flip
    mean = out.mean(axis=0)
    lo, hi = np.quantile(out, [0.025, 0.975], axis=0)
    flagged = (lo <= 0) & (hi >= 0)
    return AlignedLoadings(out, mean, lo, hi, flagged, pivot, perms, signs)


@dataclass
class Scree:
    eigenvalues: np.ndarray

    @property
    def explained(self) -> np.ndarray:
        tot = self.eigenvalues.sum()
        return self.eigenvalues / tot if tot > 0 else np.zeros_like(self.eigenvalues)

    def rows(self) -> list[dict]:
        cum = np.cumsum(self.explained)
        return [{"component": i + 1, "eigenvalue": float(v), "fraction": float(f), "cumulative": float(c)}
                for i, (v, f, c) in enumerate(zip(self.eigenvalues, self.explained, cum))]


def scree_spectrum(theta_means) -> Scree:
    """Descending eigenvalues of the sample covariance of posterior-mean effects."""
    x = np.asarray(theta_means, float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two patients")
    ev = np.linalg.eigvalsh(np.cov(x, rowvar=False))[::-1]
    return Scree(np.clip(ev, 0.0, None))


def diagonal_prefit_scree(stats, priors, cfg, return_draws: bool = False):
    """Fit with diagonal random-effect covariance and return its scree spectrum."""
    from .sampler import sample

    draws = sample(stats, priors, cfg, n_factors=0)
    scree = scree_spectrum(draws.theta_draws().mean(axis=0))
    return (scree, draws) if return_draws else scree
