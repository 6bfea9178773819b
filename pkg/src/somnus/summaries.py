"""Cluster-conditional summaries, PCA projection and second-stage regression."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.special import betainc

from .clustering import ClusterSolution, kmeans
from .data import SleepRecord, sleep_summaries
from .model import THETA_NAMES

SUMMARY_FEATURES = ("ahi_rem", "ahi_nrem", "hours_rem", "hours_nrem")
DYNAMICS_COLUMNS = tuple(range(8))


class AnalysisError(ValueError):
    pass


# -- weighted summaries -----------------------------------------------------

def cluster_weighted_summary(values, weights) -> list[dict]:
    """Per-cluster weighted mean and SD of a per-patient quantity.

    Weights are typically assignment probabilities, ``(n, K)``. Missing values
    (NaN) are dropped and the remaining weights used as they are. The SD uses
    frequency weights, ``sqrt(sum w (x - m)^2 / (sum w - 1))``, so one-hot
    weights give the ordinary sample SD. A cluster with no weight is reported
    with ``present=False``.
    """
    x = np.asarray(values, float)
    w = np.asarray(weights, float)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] != x.shape[0]:
        raise AnalysisError("values and weights must have one row per patient")
    ok = np.isfinite(x)
    x, w = x[ok], w[ok]
    out = []
    for k in range(w.shape[1]):
        wk = w[:, k]
        tot = float(wk.sum())
        if tot <= 0:
            out.append({"cluster": k + 1, "present": False, "weight": 0.0,
                        "mean": math.nan, "sd": math.nan, "n": int(ok.sum())})
            continue
        mean = float(wk @ x / tot)
        sd = math.sqrt(float(wk @ (x - mean) ** 2) / (tot - 1.0)) if tot > 1 else math.nan
        out.append({"cluster": k + 1, "present": True, "weight": tot, "mean": mean, "sd": sd,
                    "n": int(ok.sum())})
    return out


# -- regression ---------------------------------------------------------------

def t_cdf(t, df):
    """Student-t CDF through the regularized incomplete beta function.

    Near zero the central probability ``P(|T| < |t|)`` is used instead of the
    tail so that ``0.5 +/- small`` keeps full precision.
    """
    t = np.asarray(t, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = t * t
        x = df / (df + t2)
        tail = 0.5 * betainc(0.5 * df, 0.5, x)
        central = betainc(0.5, 0.5 * df, t2 / (df + t2))
    tail = np.where(np.isinf(t), 0.0, tail)
    upper = np.where(x < 0.5, 1.0 - tail, 0.5 + 0.5 * central)
    lower = np.where(x < 0.5, tail, 0.5 - 0.5 * central)
    return np.where(t >= 0, upper, lower)


@dataclass
class RegressionFit:
    names: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    n: int
    weight_mode: str = "hard"
    degenerate: bool = False
    residuals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def df(self) -> int:
        return self.n - len(self.names)

    def rows(self) -> list[dict]:
        return [{"term": nm, "estimate": float(e), "std_error": float(s), "t": float(t), "p": float(p)}
                for nm, e, s, t, p in zip(self.names, self.estimates, self.std_errors, self.t_values,
                                          self.p_values)]

    def to_json(self) -> dict:
        return {"n": self.n, "df": self.df, "weight_mode": self.weight_mode,
                "degenerate": self.degenerate, "coefficients": self.rows()}


def ols_regress(y, X, names: Optional[Sequence[str]] = None, weight_mode: str = "hard",
                rtol: float = 1e-10) -> RegressionFit:
    """Ordinary least squares with classical standard errors.

    Solved by column-pivoted QR. A rank-deficient design raises
    :class:`AnalysisError` naming the columns that are linear combinations of
    the others. A (numerically) exact fit yields zero standard errors and
    ``degenerate=True``.
    """
    y = np.asarray(y, float)
    X = np.asarray(X, float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if len(y) != n:
        raise AnalysisError("y and X have different numbers of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise AnalysisError("design and response must be finite")
    if n < p:
        raise AnalysisError(f"{n} observations cannot identify {p} coefficients")
    Q, R, piv = qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * max(d[0] if p else 0.0, 1e-300)))
    if rank < p:
        # columns entering a linear dependency: the dropped ones plus those that express them
        coefs = solve_triangular(R[:rank, :rank], R[:rank, rank:])
        involved = set(piv[rank:].tolist())
        involved |= {int(piv[i]) for i in np.nonzero(np.any(np.abs(coefs) > 1e-8, axis=1))[0]}
        bad = [names[j] for j in sorted(involved)]
        raise AnalysisError(f"design is rank deficient; collinear column(s): {', '.join(bad)}")
    coef_p = solve_triangular(R, Q.T @ y)
    beta = np.empty(p)
    beta[piv] = coef_p
    resid = y - X @ beta
    df = n - p
    rss = float(resid @ resid)
    scale = float(y @ y) or 1.0
    degenerate = df == 0 or rss <= 1e-24 * scale
    if degenerate:
        rss = 0.0
    Rinv = solve_triangular(R, np.eye(p))
    var_p = (Rinv ** 2).sum(axis=1) * (rss / df if df > 0 else 0.0)
    se = np.empty(p)
    se[piv] = np.sqrt(var_p)
    with np.errstate(divide="ignore", invalid="ignore"):
        tval = beta / se
    if degenerate:
        tval = np.where(beta == 0, np.nan, tval)
        pval = np.where(np.isnan(tval), np.nan, 0.0)
    else:
        pval = 2.0 * t_cdf(-np.abs(tval), df)
    return RegressionFit(names, beta, se, tval, np.clip(pval, 0.0, 1.0), n, weight_mode, bool(degenerate),
                         resid)


# -- design construction ------------------------------------------------------

def cluster_design(solution_or_labels, K: Optional[int] = None, reference_cluster: int = 1,
                   mode: str = "hard", probs=None) -> tuple[np.ndarray, list[str]]:
    """Cluster indicator columns against a reference cluster (1-based).

    ``mode="hard"`` uses 0/1 dummies of the hard labels; ``mode="probability"``
    uses the assignment probabilities instead.
    """
    if isinstance(solution_or_labels, ClusterSolution):
        labels = solution_or_labels.assignments
        K = solution_or_labels.K
        probs = solution_or_labels.assign_probs if probs is None else probs
    else:
        labels = np.asarray(solution_or_labels, np.int64)
        K = int(K if K is not None else labels.max() + 1)
    if not 1 <= reference_cluster <= K:
        raise AnalysisError(f"reference cluster must be in 1..{K}")
    if mode == "hard":
        W = np.eye(K)[labels]
    elif mode == "probability":
        if probs is None:
            raise AnalysisError("probability mode needs assignment probabilities")
        W = np.asarray(probs, float)
    else:
        raise AnalysisError(f"unknown weight mode {mode!r}")
    keep = [k for k in range(K) if k != reference_cluster - 1]
    return W[:, keep], [f"cluster_{k + 1}" for k in keep]


@dataclass
class Covariates:
    """Per-patient covariates read from ``patient_id,<name>=<type>,...`` CSV."""

    patient_ids: list[str]
    columns: dict  # name -> (kind, list of raw strings)

    @classmethod
    def parse(cls, text: str) -> "Covariates":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise AnalysisError("covariate file is empty") from None
        if not header or header[0].strip() != "patient_id":
            raise AnalysisError("covariate header must start with patient_id")
        specs = []
        for h in header[1:]:
            name, _, kind = h.strip().partition("=")
            if kind not in ("numeric", "categorical") or not name:
                raise AnalysisError(f"covariate column {h!r} must be <name>=numeric|categorical")
            specs.append((name, kind))
        ids, cols = [], {name: (kind, []) for name, kind in specs}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise AnalysisError(f"line {lineno}: expected {len(header)} fields")
            ids.append(row[0].strip())
            for (name, kind), raw in zip(specs, row[1:]):
                raw = raw.strip()
                if kind == "numeric" and raw:
                    try:
                        float(raw)
                    except ValueError:
                        raise AnalysisError(f"line {lineno}: {name} is not numeric: {raw!r}") from None
                cols[name][1].append(raw)
        if len(set(ids)) != len(ids):
            raise AnalysisError("duplicate patient_id in covariates")
        return cls(ids, cols)

    @classmethod
    def read(cls, path) -> "Covariates":
        with open(path, newline="") as fh:
            return cls.parse(fh.read())

    def values(self, name: str, patient_ids: Sequence[str]) -> np.ndarray:
        """Numeric column aligned to ``patient_ids``; missing entries are NaN."""
        kind, raw = self.columns[name]
        if kind != "numeric":
            raise AnalysisError(f"{name} is categorical")
        idx = {p: i for i, p in enumerate(self.patient_ids)}
        return np.array([float(raw[idx[p]]) if p in idx and raw[idx[p]] else math.nan for p in patient_ids])

    def design(self, names: Sequence[str], patient_ids: Sequence[str]) -> tuple[np.ndarray, list[str]]:
        """Columns for ``names``; categorical ones become dummies against their first sorted level."""
        idx = {p: i for i, p in enumerate(self.patient_ids)}
        blocks, labels = [], []
        for name in names:
            if name not in self.columns:
                raise AnalysisError(f"unknown covariate {name!r}")
            kind, raw = self.columns[name]
            if kind == "numeric":
                blocks.append(self.values(name, patient_ids)[:, None])
                labels.append(name)
                continue
            vals = [raw[idx[p]] if p in idx else "" for p in patient_ids]
            levels = sorted({v for v in vals if v})
            for lev in levels[1:]:
                col = np.array([math.nan if not v else float(v == lev) for v in vals])
                blocks.append(col[:, None])
                labels.append(f"{name}[{lev}]")
        if not blocks:
            return np.zeros((len(patient_ids), 0)), []
        return np.hstack(blocks), labels


def regress_on_clusters(y, solution: ClusterSolution, covariates: Optional[np.ndarray] = None,
                        covariate_names: Sequence[str] = (), reference_cluster: int = 1,
                        mode: str = "hard") -> RegressionFit:
    """Outcome on intercept, cluster indicators and optional covariates.

    Patients with a missing outcome or covariate are dropped.
    """
    D, dn = cluster_design(solution, reference_cluster=reference_cluster, mode=mode)
    parts = [np.ones((len(D), 1)), D]
    names = ["intercept"] + dn
    if covariates is not None and np.size(covariates):
        parts.append(np.asarray(covariates, float).reshape(len(D), -1))
        names += list(covariate_names)
    X = np.hstack(parts)
    y = np.asarray(y, float)
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    return ols_regress(y[ok], X[ok], names, weight_mode=mode)


# -- PCA -------------------------------------------------------------------------

@dataclass
class PCAProjection:
    scores: np.ndarray
    loading: np.ndarray
    columns: list[str]
    explained: float


def pca_projection(theta_means, dynamics_columns: Sequence[int] = DYNAMICS_COLUMNS) -> PCAProjection:
    """First principal component of the chosen columns of posterior-mean effects.

    The loading vector has unit norm, with its largest-magnitude entry positive.
    """
    x = np.asarray(theta_means, float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise AnalysisError("need at least two patients")
    cols = list(dynamics_columns)
    x = x[:, cols]
    xc = x - x.mean(axis=0)
    if not np.any(np.abs(xc) > 0):
        raise AnalysisError("zero-variance input has no principal component")
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    v = vt[0]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    names = [THETA_NAMES[c] if x.shape[1] <= len(THETA_NAMES) and c < len(THETA_NAMES) else f"x{c}"
             for c in cols]
    return PCAProjection(xc @ v, v, names, float(s[0] ** 2 / np.sum(s ** 2)))


# -- summary-statistic clustering -------------------------------------------------

def summary_features(records: Sequence[SleepRecord]) -> np.ndarray:
    """REM AHI, NonREM AHI, hours in REM and hours in NonREM per patient."""
    return np.array([[sleep_summaries(r)[k] for k in SUMMARY_FEATURES] for r in records]).reshape(-1, 4)


def standardize(x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column z-scores (sample SD); raises on a zero-variance column."""
    x = np.asarray(x, float)
    m = x.mean(axis=0)
    s = x.std(axis=0, ddof=1)
    if np.any(~(s > 0)):
        raise AnalysisError("cannot standardize a zero-variance column")
    return (x - m) / s, m, s


def summary_stat_clustering(records: Sequence[SleepRecord], K: int, seed: int = 0,
                            restarts: int = 100) -> ClusterSolution:
    """K-means on standardized summary statistics; centres in original units."""
    x = summary_features(records)
    if not np.all(np.isfinite(x)):
        raise AnalysisError("every patient needs REM and NonREM sleep for stage-specific AHI")
    z, m, s = standardize(x)
    centers, labels, loss = kmeans(z, K, restarts, seed)
    probs = np.eye(K)[labels]
    return ClusterSolution(K, centers * s + m, labels, probs, loss, method="summary_statistics")
