"""Posterior predictive checks of sleep-stage time and event summaries.

Each replicate night keeps the patient's observed number of sleep epochs.
Awake stretches are skipped: a transition to Awake is followed by a sleep
stage drawn uniformly from the stages the patient was observed to fall asleep
into. Event durations are resampled from the patient's observed durations in
the same stage, or from the pooled durations of that stage when the patient
has none.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import AWAKE, EPOCH_SEC, MIN_EVENT_SEC, NREM, REM, SleepRecord, sleep_summaries

STATISTICS = ("hours_rem", "hours_nrem", "events_rem", "events_nrem", "ahi_rem", "ahi_nrem")


class PPCError(ValueError):
    pass


@dataclass
class PPCReport:
    """Observed values against posterior predictive summaries.

    Arrays are shaped ``(n_patients, 6)`` with columns in :data:`STATISTICS`.
    """

    patient_ids: list[str]
    observed: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_replicates: int
    excluded: list[dict] = field(default_factory=list)

    @property
    def covered(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return (self.lower <= self.observed) & (self.observed <= self.upper)

    @property
    def degenerate(self) -> np.ndarray:
        """Predictive mean outside its own interval (a point-mass-like predictive)."""
        with np.errstate(invalid="ignore"):
            return (self.mean < self.lower) | (self.mean > self.upper)

    @property
    def coverage(self) -> dict[str, float]:
        out = {}
        cov = self.covered
        for j, name in enumerate(STATISTICS):
            ok = np.isfinite(self.observed[:, j]) & np.isfinite(self.lower[:, j])
            out[name] = float(cov[ok, j].mean()) if ok.any() else float("nan")
        return out

    def rows(self) -> list[dict]:
        """Tidy per-patient, per-statistic rows."""
        out = []
        cov = self.covered
        for i, pid in enumerate(self.patient_ids):
            for j, name in enumerate(STATISTICS):
                out.append({
                    "patient_id": pid,
                    "statistic": name,
                    "observed": float(self.observed[i, j]),
                    "mean": float(self.mean[i, j]),
                    "q025": float(self.lower[i, j]),
                    "q975": float(self.upper[i, j]),
                    "covered": bool(cov[i, j]),
                })
        return out

    def to_json(self) -> dict:
        return {
            "statistics": list(STATISTICS),
            "n_replicates": int(self.n_replicates),
            "coverage": self.coverage,
            "excluded": self.excluded,
            "patients": self.rows(),
        }


def _initial_stages(stages: np.ndarray) -> np.ndarray:
    """Sleep stages entered from Awake or at sleep onset."""
    sleep = stages != AWAKE
    prev_awake = np.concatenate([[True], stages[:-1] == AWAKE])
    return stages[sleep & prev_awake].astype(np.int64)


class _Durations:
    """Flat per-(patient, stage) duration pools with pooled fallbacks."""

    def __init__(self, records: Sequence[SleepRecord]):
        pooled = {k: [e.duration_sec for r in records for e in r.events if e.stage == k] for k in (REM, NREM)}
        pooled_any = pooled[REM] + pooled[NREM]
        flat, start, size = [], np.zeros((len(records), 2), np.int64), np.zeros((len(records), 2), np.int64)
        self.fallback = np.zeros((len(records), 2), bool)
        for i, r in enumerate(records):
            for s, k in enumerate((REM, NREM)):
                own = [e.duration_sec for e in r.events if e.stage == k]
                if not own:
                    own = pooled[k] or pooled_any or [MIN_EVENT_SEC]
                    self.fallback[i, s] = True
                start[i, s] = len(flat)
                size[i, s] = len(own)
                flat.extend(own)
        self.flat = np.asarray(flat, float)
        self.start = start
        self.size = size

    def draw(self, rng, patient, slot):
        u = rng.random(len(patient))
        idx = self.start[patient, slot] + np.minimum((u * self.size[patient, slot]).astype(np.int64),
                                                     self.size[patient, slot] - 1)
        return self.flat[idx]


def _summaries(counts, epochs) -> np.ndarray:
    hours = epochs * EPOCH_SEC / 3600.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ahi = np.where(hours > 0, counts / np.where(hours > 0, hours, 1.0), np.nan)
    return np.stack([hours[:, 0], hours[:, 1], counts[:, 0], counts[:, 1], ahi[:, 0], ahi[:, 1]], axis=1)


def simulate_replicates(mu, tau, lam, theta, records: Sequence[SleepRecord], seed: int = 0) -> np.ndarray:
    """Replicate the six summaries for every (draw, patient) lane.

    ``mu``, ``tau`` are ``(m, 4)``, ``lam`` is ``(m, 2)`` and ``theta`` is
    ``(m, n, 10)`` with patients in the order of ``records``. Returns an
    ``(m, n, 6)`` array.
    """
    rng = np.random.default_rng(seed)
    m, n = theta.shape[:2]
    n_sleep = np.array([int(np.sum(r.stages != AWAKE)) for r in records])
    init_lists = [_initial_stages(r.stages) for r in records]
    durations = _Durations(records)

    draw_idx = np.repeat(np.arange(m), n)
    pat = np.tile(np.arange(n), m)
    L = m * n
    th = theta.reshape(L, 10)
    mu_l = mu[draw_idx]
    tau_l = tau[draw_idx]
    rate = lam[draw_idx] * np.exp(th[:, 8:10])
    # off-diagonal logits without / with an event, per origin: (L, 2 origin, 2 dest)
    base = (mu_l + th[:, 0:4]).reshape(L, 2, 2)
    shift = (tau_l + th[:, 4:8]).reshape(L, 2, 2)

    def initial(lanes):
        u = rng.random(len(lanes))
        out = np.empty(len(lanes), np.int64)
        for j, p in enumerate(pat[lanes]):
            lst = init_lists[p]
            out[j] = lst[min(int(u[j] * len(lst)), len(lst) - 1)]
        return out

    stage = initial(np.arange(L))
    counts = np.zeros((L, 2))
    epochs = np.zeros((L, 2))
    carry = np.zeros(L)
    lanes_all = np.arange(L)
    for j in range(int(n_sleep.max(initial=0))):
        act = lanes_all[n_sleep[pat] > j]
        s = stage[act] - 1
        np.add.at(epochs, (act, s), 1.0)
        v = carry[act] > 0
        pos = np.minimum(carry[act], EPOCH_SEC)
        carry[act] -= pos
        live = np.arange(len(act))
        while live.size:
            lane = act[live]
            sl = s[live]
            r = rate[lane, sl]
            with np.errstate(divide="ignore"):
                start = pos[live] + rng.exponential(1.0, len(live)) / r
            hit = start < EPOCH_SEC
            miss = live[~hit]
            pos[miss] = EPOCH_SEC
            live = live[hit]
            if not live.size:
                break
            lane = act[live]
            sl = s[live]
            np.add.at(counts, (lane, sl), 1.0)
            v[live] = True
            end = start[hit] + durations.draw(rng, pat[lane], sl)
            pos[live] = np.minimum(end, EPOCH_SEC)
            carry[lane] = np.maximum(end - EPOCH_SEC, 0.0)
            live = live[pos[live] < EPOCH_SEC]
        # transition out of the current sleep stage
        off = base[act, s] + v[:, None] * shift[act, s]
        top = np.maximum(off.max(axis=1), 0.0)
        e_off = np.exp(off - top[:, None])
        e_self = np.exp(-top)
        tot = e_self + e_off.sum(axis=1)
        u = rng.random(len(act)) * tot
        to_awake = u < e_off[:, 0]
        to_other = ~to_awake & (u < e_off[:, 0] + e_off[:, 1])
        nxt = stage[act].copy()
        nxt[to_other] = np.where(s[to_other] == 0, NREM, REM)
        if to_awake.any():
            nxt[to_awake] = initial(act[to_awake])
            carry[act[to_awake]] = 0.0
        stage[act] = nxt
    return _summaries(counts, epochs).reshape(m, n, 6)


def posterior_predictive(draws, records: Sequence[SleepRecord], n_sims_per_draw: int = 1,
                         max_draws: Optional[int] = None, seed: int = 0) -> PPCReport:
    """Posterior predictive 95% intervals of the six per-patient summaries.

    Parameters
    ----------
    draws : PosteriorDraws
    records : sequence of SleepRecord
        Must all be present in ``draws.patient_ids``.
    n_sims_per_draw : int
        Replicate nights simulated per retained draw.
    max_draws : int, optional
        Thin the pooled draws evenly down to at most this many.
    seed : int
    """
    index = {pid: i for i, pid in enumerate(draws.patient_ids)}
    missing = [r.patient_id for r in records if r.patient_id not in index]
    if missing:
        raise PPCError(f"patients absent from the draws: {', '.join(missing[:5])}")
    keep, excluded = [], []
    for r in records:
        if not np.any(r.stages != AWAKE):
            excluded.append({"patient_id": r.patient_id, "reason": "no sleep epochs"})
            warnings.warn(f"patient {r.patient_id} has no sleep epochs and is excluded", stacklevel=2)
        else:
            keep.append(r)
    cols = np.array([index[r.patient_id] for r in keep], dtype=np.int64)

    def pooled(a):
        return a.reshape((-1,) + a.shape[2:])

    mu, tau, lam = pooled(draws.mu), pooled(draws.tau), pooled(draws.lam)
    theta = draws.theta_draws()[:, cols]
    m = mu.shape[0]
    if max_draws is not None and m > max_draws:
        sel = np.linspace(0, m - 1, max_draws).round().astype(np.int64)
        mu, tau, lam, theta = mu[sel], tau[sel], lam[sel], theta[sel]
    reps = max(1, int(n_sims_per_draw))
    if reps > 1:
        mu, tau, lam, theta = (np.repeat(a, reps, axis=0) for a in (mu, tau, lam, theta))
    sims = simulate_replicates(mu, tau, lam, theta, keep, seed=seed)
    observed = np.array([[sleep_summaries(r)[k] for k in STATISTICS] for r in keep]).reshape(len(keep), 6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(sims, axis=0)
        lo, hi = np.nanquantile(sims, [0.025, 0.975], axis=0)
    return PPCReport([r.patient_id for r in keep], observed, mean, lo, hi, sims.shape[0], excluded)
