"""Simulation-study drivers: estimation accuracy and clustering accuracy tables."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .clustering import adjusted_rand_index, posterior_mean_kmeans
from .data import derive_sufficient_stats
from .model import PriorSpec
from .sampler import SamplerConfig, sample
from .simulate import ScenarioConfig, generate_outcomes, generate_scenario
from .summaries import summary_stat_clustering


def _covers(draws: np.ndarray, truth: np.ndarray, level: float = 0.95) -> np.ndarray:
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    return (lo <= truth) & (truth <= hi)


@dataclass
class ReplicateResult:
    """Accuracy of one simulated fit; ``None`` where the truth is not comparable."""

    replicate: int
    seed: int
    fixed_mse: Optional[float]
    fixed_coverage: Optional[float]
    cov_mse: Optional[float]
    cov_coverage: Optional[float]
    re_mse: float
    re_coverage: float
    max_rhat: float
    min_ess: float
    divergences: int
    seconds: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def score_fit(draws, truth, scenario: str) -> dict:
    """Coverage and MSE of fixed effects, covariance entries and random effects."""
    out = {}
    th = draws.theta_draws()
    out["re_mse"] = float(((th.mean(axis=0) - truth.theta) ** 2).mean())
    out["re_coverage"] = float(_covers(th, truth.theta).mean())
    if scenario == "S2":
        out["fixed_mse"] = out["fixed_coverage"] = None
    else:
        fx = np.stack([a.reshape(-1) for a in draws.fixed_effects().values()], axis=1)
        tv = np.concatenate([truth.mu, truth.tau, truth.lam])
        out["fixed_mse"] = float(((fx.mean(axis=0) - tv) ** 2).mean())
        out["fixed_coverage"] = float(_covers(fx, tv).mean())
    if scenario == "S3" or truth.covariance is None:
        out["cov_mse"] = out["cov_coverage"] = None
    else:
        iu = np.triu_indices(truth.theta.shape[1])
        cov = draws.covariance.reshape((-1,) + draws.covariance.shape[2:])[:, iu[0], iu[1]]
        tc = truth.covariance[iu]
        out["cov_mse"] = float(((cov.mean(axis=0) - tc) ** 2).mean())
        out["cov_coverage"] = float(_covers(cov, tc).mean())
    return out


def _mixing(draws) -> tuple[float, float]:
    from .diagnostics import effective_sample_size, gelman_rubin

    rh, es = [], []
    for arr in draws.fixed_effects().values():
        rh.append(gelman_rubin(arr))
        es.append(effective_sample_size(arr))
    return float(max(rh)), float(min(es))


def fit_replicate(scenario: str, rep: int, n_patients: int, n_epochs: int, sampler: SamplerConfig,
                  seed: int, priors: Optional[PriorSpec] = None, n_factors: int = 3):
    """Simulate and fit one replicate; returns ``(records, truth, draws, config, seconds)``."""
    cfg = ScenarioConfig(scenario=scenario, n_patients=n_patients, n_epochs=n_epochs, rng_seed=seed + rep)
    records, truth = generate_scenario(cfg)
    t0 = time.perf_counter()
    draws = sample(derive_sufficient_stats(records), priors, replace(sampler, rng_seed=seed + rep), n_factors)
    return records, truth, draws, cfg, time.perf_counter() - t0


def table1(scenario: str = "S1", reps: int = 20, n_patients: int = 150, n_epochs: int = 400,
           sampler: Optional[SamplerConfig] = None, seed: int = 0, priors: Optional[PriorSpec] = None,
           n_factors: int = 3, callback: Optional[Callable] = None) -> dict:
    """Replicated estimation-accuracy study for one scenario.

    ``callback(rep, records, truth, draws, result)`` is invoked after each
    replicate, which lets callers keep fits for further checks.
    """
    sampler = sampler or SamplerConfig(n_chains=2, n_warmup=500, n_samples=500)
    rows = []
    for r in range(reps):
        records, truth, draws, _, secs = fit_replicate(scenario, r, n_patients, n_epochs, sampler, seed,
                                                       priors, n_factors)
        sc = score_fit(draws, truth, scenario)
        rhat, ess = _mixing(draws)
        res = ReplicateResult(r, seed + r, sc["fixed_mse"], sc["fixed_coverage"], sc["cov_mse"],
                              sc["cov_coverage"], sc["re_mse"], sc["re_coverage"], rhat, ess,
                              int(np.sum(draws.sample_stats.get("divergent", 0))), secs)
        rows.append(res)
        if callback is not None:
            callback(r, records, truth, draws, res)

    def avg(key):
        vals = [getattr(x, key) for x in rows if getattr(x, key) is not None]
        return float(np.mean(vals)) if vals else None

    summary = {k: avg(k) for k in ("fixed_mse", "fixed_coverage", "cov_mse", "cov_coverage", "re_mse",
                                   "re_coverage")}
    return {
        "scenario": scenario, "replicates": reps, "n_patients": n_patients, "n_epochs": n_epochs,
        "n_chains": sampler.n_chains, "n_warmup": sampler.n_warmup, "n_samples": sampler.n_samples,
        "seed": seed, "summary": summary, "rows": [x.to_json() for x in rows],
    }


def within_cluster_variance(y, labels) -> float:
    """Mean over clusters of the sample variance of ``y`` inside each cluster.

    Clusters with fewer than two members are skipped.
    """
    y = np.asarray(y, float)
    labels = np.asarray(labels)
    v = [np.var(y[labels == k], ddof=1) for k in np.unique(labels) if np.sum(labels == k) > 1]
    return float(np.mean(v)) if v else float("nan")


def table2(reps: int = 20, n_patients: int = 200, n_epochs: int = 400, sampler: Optional[SamplerConfig] = None,
           seed: int = 0, K: int = 4, restarts: int = 100, priors: Optional[PriorSpec] = None,
           n_factors: int = 3, callback: Optional[Callable] = None) -> dict:
    """Clustering on posterior-mean effects versus clustering on summary statistics."""
    sampler = sampler or SamplerConfig(n_chains=2, n_warmup=500, n_samples=500)
    rows = []
    for r in range(reps):
        records, truth, draws, cfg, secs = fit_replicate("S3", r, n_patients, n_epochs, sampler, seed,
                                                         priors, n_factors)
        y = np.array([v for _, v in generate_outcomes(truth, cfg)])
        theta_sol = posterior_mean_kmeans(draws, K, restarts, seed + r)
        summ_sol = summary_stat_clustering(records, K, seed + r, restarts)
        row = {
            "replicate": r, "seed": seed + r, "seconds": secs,
            "ari_theta": adjusted_rand_index(truth.assignments, theta_sol.assignments),
            "ari_summary": adjusted_rand_index(truth.assignments, summ_sol.assignments),
            "var_theta": within_cluster_variance(y, theta_sol.assignments),
            "var_summary": within_cluster_variance(y, summ_sol.assignments),
        }
        rows.append(row)
        if callback is not None:
            callback(r, records, truth, draws, row)
    keys = ("ari_theta", "ari_summary", "var_theta", "var_summary")
    summary = {k: float(np.mean([x[k] for x in rows])) for k in keys}
    summary["theta_ari_wins"] = int(sum(x["ari_theta"] > x["ari_summary"] for x in rows))
    summary["theta_variance_wins"] = int(sum(x["var_theta"] < x["var_summary"] for x in rows))
    return {
        "replicates": reps, "n_patients": n_patients, "n_epochs": n_epochs, "K": K,
        "n_chains": sampler.n_chains, "n_warmup": sampler.n_warmup, "n_samples": sampler.n_samples,
        "seed": seed, "summary": summary, "rows": rows,
    }
