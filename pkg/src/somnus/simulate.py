"""Synthetic patient-nights for the three simulation scenarios.

* ``S1``: data generated from the fitted model itself.
* ``S2``: baseline transition logits and event rates drift linearly with the
  epoch index (the fitted model stays stationary, so it is misspecified).
* ``S3``: random effects from a centred Gaussian mixture instead of the
  factor model; comes with a clustered outcome variable.

Event timing: within each sleep epoch a Poisson clock with rate
``lambda_k * exp(phi_k)`` runs over non-event time only. Events last
``Uniform(event_duration_range)`` seconds, may run on past the end of their
epoch (also across a stage change, keeping the stage of their start), and are
truncated at the end of the recording. An event that would start in the last
``MIN_EVENT_SEC`` seconds of the recording is not emitted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import AWAKE, EPOCH_SEC, MIN_EVENT_SEC, NREM, REM, Event, SleepRecord
from .model import N_RE, OFF_DEST, THETA_NAMES, TRANSITIONS

SCENARIOS = ("S1", "S2", "S3")


@dataclass
class ScenarioConfig:
    scenario: str = "S1"
    n_patients: int = 1000
    n_epochs: int = 1000
    n_factors: int = 3
    rng_seed: int = 0
    mu_range: tuple[float, float] = (-4.0, -2.0)
    tau_range: tuple[float, float] = (0.0, 1.0)
    lambda_range: tuple[float, float] = (0.01, 0.03)
    awake_mu_range: tuple[float, float] = (-3.0, -1.0)
    loading_variance: float = 0.2
    idiosyncratic_variance: float = 0.2
    s2_mu_intercept_range: tuple[float, float] = (-4.0, -3.0)
    s2_mu_slope_range: tuple[float, float] = (-0.001, 0.001)
    s2_lambda_slope_range: tuple[float, float] = (-0.00001, 0.00001)
    s3_components: int = 4
    s3_center_variance: float = 0.25
    s3_component_variance: float = 0.25
    event_duration_range: tuple[float, float] = (10.0, 40.0)
    outcome_sd: float = 0.2
    initial_stage: int = NREM

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        for name in ("mu_range", "tau_range", "lambda_range", "awake_mu_range", "s2_mu_intercept_range",
                     "s2_mu_slope_range", "s2_lambda_slope_range", "event_duration_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.n_patients < 1 or self.n_epochs < 1:
            raise ValueError("n_patients and n_epochs must be at least 1")
        if self.s3_components < 2:
            raise ValueError("S3 needs at least two mixture components")
        if self.event_duration_range[0] < MIN_EVENT_SEC:
            raise ValueError(f"event durations must be at least {MIN_EVENT_SEC:g}s")
        if self.lambda_range[0] < 0:
            raise ValueError("event rates must be non-negative")
        if self.initial_stage not in (REM, NREM):
            raise ValueError("initial stage must be REM or NonREM")

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        obj = dict(obj)
        for k, v in obj.items():
            if isinstance(v, list):
                obj[k] = tuple(v)
        return cls(**obj)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class GroundTruth:
    patient_ids: list[str]
    mu: np.ndarray  # S2: intercepts
    tau: np.ndarray
    lam: np.ndarray  # per second; S2: intercepts
    awake_mu: np.ndarray  # (Awake->REM, Awake->NonREM)
    theta: np.ndarray  # (n, 10)
    loadings: Optional[np.ndarray] = None  # (10, k); None for S3
    omega2: Optional[np.ndarray] = None
    mu_slope: Optional[np.ndarray] = None
    lam_slope: Optional[np.ndarray] = None
    assignments: Optional[np.ndarray] = None  # S3 component index per patient
    component_means: Optional[np.ndarray] = None

    @property
    def covariance(self) -> Optional[np.ndarray]:
        if self.loadings is None:
            return None
        return self.loadings @ self.loadings.T + np.diag(self.omega2)

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        fixed = {f"mu_{t}": float(m) for t, m in zip(TRANSITIONS, self.mu)}
        fixed.update({f"tau_{t}": float(x) for t, x in zip(TRANSITIONS, self.tau)})
        fixed.update({"lambda_R": float(self.lam[0]), "lambda_N": float(self.lam[1]),
                      "mu_AR": float(self.awake_mu[0]), "mu_AN": float(self.awake_mu[1])})
        if self.mu_slope is not None:
            fixed.update({f"mu_{t}_slope": float(s) for t, s in zip(TRANSITIONS, self.mu_slope)})
            fixed.update({"lambda_R_slope": float(self.lam_slope[0]), "lambda_N_slope": float(self.lam_slope[1])})
        return {
            "fixed_effects": fixed,
            "loadings": None if self.loadings is None else {
                "shape": list(self.loadings.shape), "row_major": self.loadings.reshape(-1).tolist()},
            "omega2": arr(self.omega2),
            "theta_columns": list(THETA_NAMES),
            "theta": {pid: row.tolist() for pid, row in zip(self.patient_ids, self.theta)},
            "assignments": None if self.assignments is None else {
                pid: int(a) for pid, a in zip(self.patient_ids, self.assignments)},
            "component_means": arr(self.component_means),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        fx = obj["fixed_effects"]
        pids = list(obj["theta"])
        slope = "mu_RA_slope" in fx
        load = obj.get("loadings")
        return cls(
            patient_ids=pids,
            mu=np.array([fx[f"mu_{t}"] for t in TRANSITIONS]),
            tau=np.array([fx[f"tau_{t}"] for t in TRANSITIONS]),
            lam=np.array([fx["lambda_R"], fx["lambda_N"]]),
            awake_mu=np.array([fx["mu_AR"], fx["mu_AN"]]),
            theta=np.array([obj["theta"][p] for p in pids]),
            loadings=None if load is None else np.array(load["row_major"]).reshape(load["shape"]),
            omega2=None if obj.get("omega2") is None else np.array(obj["omega2"]),
            mu_slope=np.array([fx[f"mu_{t}_slope"] for t in TRANSITIONS]) if slope else None,
            lam_slope=np.array([fx["lambda_R_slope"], fx["lambda_N_slope"]]) if slope else None,
            assignments=None if obj.get("assignments") is None else np.array([obj["assignments"][p] for p in pids]),
            component_means=None if obj.get("component_means") is None else np.array(obj["component_means"]),
        )


def patient_ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"P{i:0{width}d}" for i in range(n)]


def _uniform(rng, lo_hi, size):
    lo, hi = lo_hi
    return rng.uniform(lo, hi, size)


def transition_cdf(mu, tau, theta_i) -> np.ndarray:
    """Cumulative next-stage probabilities, shape ``mu.shape[:-1] + (2 h, 2 origin, 3)``."""
    mu = np.asarray(mu, float)
    lead = mu.shape[:-1]
    mu = mu.reshape(lead + (1, 2, 2))
    tau = np.asarray(tau, float).reshape((1,) * len(lead) + (1, 2, 2))
    gamma = theta_i[0:4].reshape(2, 2)
    alpha = theta_i[4:8].reshape(2, 2)
    h = np.array([0.0, 1.0]).reshape(2, 1, 1)
    off = mu + gamma + h * (tau + alpha)
    logits = np.zeros(lead + (2, 2, 3))
    logits[..., 0, OFF_DEST[0]] = off[..., 0, :]
    logits[..., 1, OFF_DEST[1]] = off[..., 1, :]
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return np.cumsum(p, axis=-1)


def _draw(cdf_row, u) -> int:
    if u < cdf_row[0]:
        return 0
    if u < cdf_row[1]:
        return 1
    return 2


def simulate_night(
    rng: np.random.Generator,
    n_epochs: int,
    trans_cdf: np.ndarray,
    awake_cdf: np.ndarray,
    rates: np.ndarray,
    duration_range: tuple[float, float],
    initial_stage: int = NREM,
    patient_id: str = "P0",
) -> SleepRecord:
    """Simulate one night.

    ``trans_cdf`` has shape (2, 2, 3) or (n_epochs, 2, 2, 3); ``rates`` (events
    per second, REM then NonREM) has shape (2,) or (n_epochs, 2).
    """
    trans_cdf = np.broadcast_to(trans_cdf, (n_epochs, 2, 2, 3)) if trans_cdf.ndim == 3 else trans_cdf
    rates = np.broadcast_to(rates, (n_epochs, 2)) if rates.ndim == 1 else rates
    stages = np.empty(n_epochs, dtype=np.int8)
    events: list[Event] = []
    span = n_epochs * EPOCH_SEC
    dlo, dhi = duration_range
    stage = initial_stage
    event_end = -math.inf
    for j in range(n_epochs):
        stages[j] = stage
        t0 = j * EPOCH_SEC
        t1 = t0 + EPOCH_SEC
        v = 0
        if stage != AWAKE:
            t = t0
            if event_end > t0:
                v = 1
                t = min(event_end, t1)
            rate = rates[j, stage - 1]
            while t < t1 and rate > 0:
                start = t + rng.exponential(1.0 / rate)
                if start >= t1:
                    break
                if span - start < MIN_EVENT_SEC:
                    break
                end = min(start + rng.uniform(dlo, dhi), span)
                events.append(Event(start, end - start, stage))
                v = 1
                event_end = end
                t = min(end, t1)
        if j == n_epochs - 1:
            break
        u = rng.random()
        if stage == AWAKE:
            stage = _draw(awake_cdf, u)
        else:
            stage = _draw(trans_cdf[j, v, stage - 1], u)
    return SleepRecord(patient_id, stages, events)


def _awake_cdf(awake_mu) -> np.ndarray:
    logits = np.array([0.0, awake_mu[0], awake_mu[1]])
    p = np.exp(logits - logits.max())
    return np.cumsum(p / p.sum())


def generate_scenario(config: ScenarioConfig) -> tuple[list[SleepRecord], GroundTruth]:
    """Draw fixed and random effects for a scenario, then simulate every night.

    Global draws use the stream ``(seed, 0)``; patient ``i``'s night uses
    ``(seed, 1, i)`` so nights do not depend on generation order.
    """
    cfg = config
    rng = np.random.default_rng([cfg.rng_seed, 0])
    n = cfg.n_patients
    pids = patient_ids(n)
    mu_slope = lam_slope = None
    if cfg.scenario == "S2":
        mu = _uniform(rng, cfg.s2_mu_intercept_range, 4)
        mu_slope = _uniform(rng, cfg.s2_mu_slope_range, 4)
    else:
        mu = _uniform(rng, cfg.mu_range, 4)
    tau = _uniform(rng, cfg.tau_range, 4)
    lam = _uniform(rng, cfg.lambda_range, 2)
    if cfg.scenario == "S2":
        lam_slope = _uniform(rng, cfg.s2_lambda_slope_range, 2)
    awake_mu = _uniform(rng, cfg.awake_mu_range, 2)

    loadings = omega2 = assignments = centers = None
    if cfg.scenario == "S3":
        centers = rng.normal(0.0, math.sqrt(cfg.s3_center_variance), (cfg.s3_components, N_RE))
        assignments = rng.integers(0, cfg.s3_components, n)
        theta = centers[assignments] + rng.normal(0.0, math.sqrt(cfg.s3_component_variance), (n, N_RE))
        theta -= theta.mean(axis=0)
    else:
        loadings = rng.normal(0.0, math.sqrt(cfg.loading_variance), (N_RE, cfg.n_factors))
        omega2 = np.full(N_RE, float(cfg.idiosyncratic_variance))
        eta = rng.normal(size=(n, cfg.n_factors))
        theta = eta @ loadings.T + np.sqrt(omega2) * rng.normal(size=(n, N_RE))

    truth = GroundTruth(pids, mu, tau, lam, awake_mu, theta, loadings, omega2,
                        mu_slope, lam_slope, assignments, centers)
    for name in ("mu", "tau", "lam", "awake_mu", "theta"):
        if not np.all(np.isfinite(getattr(truth, name))):
            raise FloatingPointError(f"non-finite draw in {name}")

    epochs = np.arange(cfg.n_epochs)
    if cfg.scenario == "S2":
        mu_t = mu + np.outer(epochs, mu_slope)
        lam_t = np.maximum(lam + np.outer(epochs, lam_slope), 0.0)
    else:
        mu_t, lam_t = mu, lam
    acdf = _awake_cdf(awake_mu)
    records = []
    for i in range(n):
        prng = np.random.default_rng([cfg.rng_seed, 1, i])
        cdf = transition_cdf(mu_t, tau, theta[i])
        rates = lam_t * np.exp(theta[i, 8:10])
        records.append(simulate_night(prng, cfg.n_epochs, cdf, acdf, rates,
                                      cfg.event_duration_range, cfg.initial_stage, pids[i]))
    return records, truth


def generate_outcomes(truth: GroundTruth, config: ScenarioConfig) -> list[tuple[str, float]]:
    """Clustered outcome per patient; component means are a permutation of 1..C."""
    if truth.assignments is None:
        raise ValueError("outcomes need mixture assignments (scenario S3)")
    rng = np.random.default_rng([config.rng_seed, 2])
    n_comp = int(truth.component_means.shape[0]) if truth.component_means is not None else config.s3_components
    means = rng.permutation(np.arange(1, n_comp + 1)).astype(float)
    y = means[truth.assignments] + rng.normal(0.0, 1.0, len(truth.assignments)) * config.outcome_sd
    return list(zip(truth.patient_ids, y.tolist()))
