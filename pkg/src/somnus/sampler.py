"""No-U-turn Hamiltonian Monte Carlo with warmup adaptation.

Trajectories grow by repeated doubling in a random direction. States are
selected multinomially (biased progressive sampling between subtrees), and
growth stops on the generalised no-U-turn criterion, which is also checked
across the seams of merged subtrees. Warmup runs dual-averaging step-size
adaptation together with a diagonal inverse metric estimated over expanding
windows (initial buffer 75, first window 25, terminal buffer 50 iterations).
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import SufficientStats
from .model import N_RE, THETA_NAMES, TRANSITIONS, Layout, Posterior, PriorSpec

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


class FitWarning(UserWarning):
    pass


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    rng_seed: int = 0
    init_scale: float = 0.5
    n_workers: int = 1
    max_delta_energy: float = 1000.0
    max_divergence_rate: float = 0.1

    def __post_init__(self):
        if min(self.n_chains, self.n_samples, self.max_tree_depth) < 1 or self.n_warmup < 0:
            raise ValueError("chain, sample and tree-depth counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")

    @classmethod
    def from_json(cls, obj: dict) -> "SamplerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown sampler settings: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# adaptation


class DualAveraging:
    def __init__(self, delta: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.mu = math.log(10.0)
        self.restart()

    def restart(self):
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        """Record one acceptance statistic; return the next step size."""
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


class WindowedVariance:
    """Expanding-window schedule for the diagonal inverse metric."""

    def __init__(self, n_warmup: int, dim: int, init_buffer=75, term_buffer=50, base_window=25):
        self.n_warmup = n_warmup
        self.enabled = n_warmup >= 20
        if self.enabled and init_buffer + base_window + term_buffer > n_warmup:
            init_buffer = int(0.15 * n_warmup)
            term_buffer = int(0.1 * n_warmup)
            base_window = n_warmup - (init_buffer + term_buffer)
        self.init_buffer, self.term_buffer = init_buffer, term_buffer
        self.window_size = base_window
        self.next_window = init_buffer + base_window - 1
        self.counter = 0
        self._reset(dim)

    def _reset(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def _in_window(self):
        return self.init_buffer <= self.counter < self.n_warmup - self.term_buffer

    def _end_of_window(self):
        return self.counter == self.next_window and self.counter != self.n_warmup

    def _advance(self):
        last = self.n_warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= self.n_warmup - self.term_buffer:
            self.next_window = last

    def update(self, q: np.ndarray) -> Optional[np.ndarray]:
        """Add a warmup draw; returns a new inverse metric at the end of a window."""
        if not self.enabled:
            return None
        if self._in_window():
            self.n += 1
            delta = q - self.mean
            self.mean += delta / self.n
            self.m2 += delta * (q - self.mean)
        if self._end_of_window():
            self._advance()
            n = self.n
            var = self.m2 / max(n - 1, 1)
            var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self._reset(q.size)
            self.counter += 1
            return var
        self.counter += 1
        return None


# ---------------------------------------------------------------------------
# trajectory building


class _Point:
    __slots__ = ("q", "p", "lp", "g")

    def __init__(self, q, p, lp, g):
        self.q, self.p, self.lp, self.g = q, p, lp, g


class NUTS:
    """One chain's transition kernel over a target exposing ``value_and_grad``."""

    def __init__(self, target: Callable, dim: int, rng: np.random.Generator,
                 max_depth=10, max_delta_energy=1000.0):
        self.target = target
        self.dim = dim
        self.rng = rng
        self.max_depth = max_depth
        self.max_delta_energy = max_delta_energy
        self.inv_mass = np.ones(dim)
        self.step_size = 1.0

    def _evaluate(self, q):
        lp, g = self.target(q)
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, g
        return lp, g

    def leapfrog(self, z: _Point, eps: float) -> _Point:
        p = z.p + 0.5 * eps * z.g
        q = z.q + eps * (self.inv_mass * p)
        lp, g = self._evaluate(q)
        if lp == -math.inf:
            return _Point(q, p, lp, g)
        return _Point(q, p + 0.5 * eps * g, lp, g)

    def energy(self, z: _Point) -> float:
        if z.lp == -math.inf:
            return math.inf
        with np.errstate(over="ignore", invalid="ignore"):
            return -z.lp + 0.5 * float(z.p @ (self.inv_mass * z.p))

    def momentum(self) -> np.ndarray:
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_mass)

    def init_step_size(self, q, lp, g):
        """Double or halve the step until one-step acceptance crosses 0.8."""
        z = _Point(q, self.momentum(), lp, g)
        H0 = self.energy(z)
        dH = H0 - self.energy(self.leapfrog(z, self.step_size))
        direction = 1 if dH > math.log(0.8) else -1
        while True:
            z = _Point(q, self.momentum(), lp, g)
            H0 = self.energy(z)
            dH = H0 - self.energy(self.leapfrog(z, self.step_size))
            if direction == 1 and not dH > math.log(0.8):
                break
            if direction == -1 and not dH < math.log(0.8):
                break
            self.step_size = self.step_size * 2.0 if direction == 1 else self.step_size * 0.5
            if self.step_size > 1e7:
                raise SamplerError("posterior appears improper: step size diverged")
            if self.step_size == 0:
                raise SamplerError("no acceptably small step size")

    @staticmethod
    def _uturn_free(p_sharp_minus, p_sharp_plus, rho) -> bool:
        return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0

    def _build(self, depth, z, direction, H0, acc):
        """Grow a subtree of ``2**depth`` steps from ``z``.

        Returns (valid, z_end, z_propose, log_sum_weight, rho, p_beg, p_end,
        p_sharp_beg, p_sharp_end).
        """
        if depth == 0:
            z_new = self.leapfrog(z, direction * self.step_size)
            acc["n_leapfrog"] += 1
            H = self.energy(z_new)
            if math.isnan(H):
                H = math.inf
            if H - H0 > self.max_delta_energy:
                acc["divergent"] = True
            w = H0 - H
            acc["sum_metro"] += 1.0 if w > 0 else math.exp(w)
            p_sharp = self.inv_mass * z_new.p
            valid = not acc["divergent"]
            return valid, z_new, z_new, w, z_new.p.copy(), z_new.p, z_new.p, p_sharp, p_sharp

        ok1, z_mid, prop1, lw1, rho1, p_beg, p_init_end, ps_beg, ps_init_end = self._build(depth - 1, z, direction, H0, acc)
        if not ok1:
            return False, z_mid, prop1, lw1, rho1, p_beg, p_init_end, ps_beg, ps_init_end
        ok2, z_end, prop2, lw2, rho2, p_final_beg, p_end, ps_final_beg, ps_end = self._build(depth - 1, z_mid, direction, H0, acc)
        if not ok2:
            return False, z_end, prop1, lw1, rho1, p_beg, p_end, ps_beg, ps_end
        lw = np.logaddexp(lw1, lw2)
        if self.rng.random() < math.exp(lw2 - lw):
            prop = prop2
        else:
            prop = prop1
        rho = rho1 + rho2
        ok = (
            self._uturn_free(ps_beg, ps_end, rho)
            and self._uturn_free(ps_beg, ps_final_beg, rho1 + p_final_beg)
            and self._uturn_free(ps_init_end, ps_end, rho2 + p_init_end)
        )
        return ok, z_end, prop, lw, rho, p_beg, p_end, ps_beg, ps_end

    def transition(self, q, lp, g):
        z0 = _Point(q, self.momentum(), lp, g)
        H0 = self.energy(z0)
        p_sharp0 = self.inv_mass * z0.p
        fwd = bck = z0
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = p_sharp0
        p_fwd_bck = p_bck_fwd = z0.p
        rho = z0.p.copy()
        sample = z0
        log_sum_weight = 0.0
        acc = {"n_leapfrog": 0, "sum_metro": 0.0, "divergent": False}
        depth = 0
        while depth < self.max_depth:
            if self.rng.random() < 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_bck, ps_fwd_bck
                ok, fwd, prop, lw, rho_fwd, p_fwd_bck, _, ps_fwd_bck, ps_fwd_fwd = self._build(depth, fwd, 1, H0, acc)
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_fwd, ps_bck_fwd
                ok, bck, prop, lw, rho_bck, p_bck_fwd, _, ps_bck_fwd, ps_bck_bck = self._build(depth, bck, -1, H0, acc)
            if not ok:
                break
            depth += 1
            if lw > log_sum_weight or self.rng.random() < math.exp(lw - log_sum_weight):
                sample = prop
            log_sum_weight = float(np.logaddexp(log_sum_weight, lw))
            rho = rho_bck + rho_fwd
            persist = (
                self._uturn_free(ps_bck_bck, ps_fwd_fwd, rho)
                and self._uturn_free(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
                and self._uturn_free(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            )
            if not persist:
                break
        n_lf = acc["n_leapfrog"]
        stats = {
            "accept_stat": acc["sum_metro"] / n_lf if n_lf else 0.0,
            "n_leapfrog": n_lf,
            "tree_depth": depth,
            "divergent": acc["divergent"],
            "energy": self.energy(sample),
        }
        return sample.q, sample.lp, sample.g, stats


# ---------------------------------------------------------------------------
# chains


STAT_FIELDS = ("accept_stat", "n_leapfrog", "tree_depth", "divergent", "energy", "lp")


def run_chain(target: Callable, dim: int, cfg: SamplerConfig, chain: int, init=None):
    """Run warmup plus sampling for one chain.

    ``target(q)`` returns ``(log_density, gradient)``. The chain's generator is
    seeded from ``(cfg.rng_seed, chain)`` only.
    """
    rng = np.random.default_rng([cfg.rng_seed, chain])
    kernel = NUTS(target, dim, rng, cfg.max_tree_depth, cfg.max_delta_energy)
    for _ in range(100):
        q = rng.uniform(-cfg.init_scale, cfg.init_scale, dim) if init is None else np.array(init, float)
        lp, g = kernel._evaluate(q)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            break
        if init is not None:
            raise SamplerError("log-density is not finite at the supplied initial point")
    else:
        raise SamplerError("no finite initial log-density after 100 draws")

    kernel.init_step_size(q, lp, g)
    adapt = DualAveraging(cfg.target_accept)
    adapt.mu = math.log(10.0 * kernel.step_size)
    windows = WindowedVariance(cfg.n_warmup, dim)
    for _ in range(cfg.n_warmup):
        q, lp, g, st = kernel.transition(q, lp, g)
        kernel.step_size = adapt.update(st["accept_stat"])
        var = windows.update(q)
        if var is not None:
            kernel.inv_mass = var
            kernel.init_step_size(q, lp, g)
            adapt.mu = math.log(10.0 * kernel.step_size)
            adapt.restart()
    if cfg.n_warmup > 0:
        kernel.step_size = adapt.final()

    draws = np.empty((cfg.n_samples, dim))
    stats = {k: np.empty(cfg.n_samples) for k in STAT_FIELDS}
    for s in range(cfg.n_samples):
        q, lp, g, st = kernel.transition(q, lp, g)
        draws[s] = q
        st["lp"] = lp
        for k in STAT_FIELDS:
            stats[k][s] = st[k]
    stats["divergent"] = stats["divergent"].astype(bool)
    return draws, stats, kernel.step_size, kernel.inv_mass.copy()


class _Target:
    def __init__(self, posterior):
        self.posterior = posterior

    def __call__(self, q):
        return self.posterior.value_and_grad(q)


def _chain_job(args):
    target, dim, cfg, chain, init = args
    return run_chain(target, dim, cfg, chain, init)


def run_chains(target: Callable, dim: int, cfg: SamplerConfig, init=None):
    jobs = [(target, dim, cfg, c, init) for c in range(cfg.n_chains)]
    if cfg.n_workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(min(cfg.n_workers, cfg.n_chains)) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    draws = np.stack([r[0] for r in results])
    stats = {k: np.stack([r[1][k] for r in results]) for k in STAT_FIELDS}
    step = np.array([r[2] for r in results])
    inv_mass = np.stack([r[3] for r in results])
    return draws, stats, step, inv_mass


@dataclass
class PosteriorDraws:
    """Retained draws in the unconstrained parameterisation plus chain statistics."""

    draws: np.ndarray  # (n_chains, n_samples, dim)
    layout: Layout
    patient_ids: list[str]
    sample_stats: dict = field(default_factory=dict)
    step_size: Optional[np.ndarray] = None
    inv_mass: Optional[np.ndarray] = None
    seed: Optional[int] = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    def _block(self, name):
        x = self.draws[..., self.layout.blocks[name]]
        return x.reshape(self.draws.shape[:2] + self.layout.shape(name))

    @property
    def mu(self):
        return self._block("mu")

    @property
    def tau(self):
        return self._block("tau")

    @property
    def lam(self):
        return np.exp(self._block("log_lambda"))

    @property
    def loadings(self):
        return self._block("loadings")

    @property
    def eta(self):
        return self._block("eta")

    @property
    def omega2(self):
        return np.exp(self._block("log_omega2"))

    @property
    def theta(self) -> np.ndarray:
        """Random effects per draw, shape (n_chains, n_samples, n, 10)."""
        eta, L, z = self._block("eta"), self._block("loadings"), self._block("z")
        return np.einsum("csik,csrk->csir", eta, L) + np.sqrt(self.omega2)[:, :, None, :] * z

    @property
    def covariance(self) -> np.ndarray:
        L = self.loadings
        return np.einsum("csik,csjk->csij", L, L) + np.einsum("csi,ij->csij", self.omega2, np.eye(N_RE))

    def theta_draws(self) -> np.ndarray:
        """Pooled random-effect draws, shape (n_chains * n_samples, n, 10)."""
        th = self.theta
        return th.reshape((-1,) + th.shape[2:])

    def fixed_effects(self) -> dict[str, np.ndarray]:
        """Named (n_chains, n_samples) arrays of mu, tau and lambda."""
        out = {}
        mu, tau, lam = self.mu, self.tau, self.lam
        for j, t in enumerate(TRANSITIONS):
            out[f"mu[{t}]"] = mu[..., j]
        for j, t in enumerate(TRANSITIONS):
            out[f"tau[{t}]"] = tau[..., j]
        out["lambda[R]"] = lam[..., 0]
        out["lambda[N]"] = lam[..., 1]
        return out

    def scalar(self, name: str) -> np.ndarray:
        """(n_chains, n_samples) draws of a named scalar quantity."""
        fx = self.fixed_effects()
        if name in fx:
            return fx[name]
        if name.startswith("omega2["):
            return self.omega2[..., THETA_NAMES.index(name[7:-1])]
        if name.startswith("theta["):
            pid, col = name[6:-1].rsplit(",", 1)
            i = self.patient_ids.index(pid)
            th = self._theta_patient(i)
            return th[..., THETA_NAMES.index(col)]
        if name.startswith("Sigma["):
            r, c = (THETA_NAMES.index(s) for s in name[6:-1].split(","))
            L = self.loadings
            val = np.einsum("csk,csk->cs", L[..., r, :], L[..., c, :])
            if r == c:
                val = val + self.omega2[..., r]
            return val
        return self.draws[..., self.layout.names().index(name)]

    def _theta_patient(self, i):
        eta = self._block("eta")[:, :, i, :]
        z = self._block("z")[:, :, i, :]
        return np.einsum("csk,csrk->csr", eta, self.loadings) + np.sqrt(self.omega2) * z

    def divergence_rate(self) -> float:
        div = self.sample_stats.get("divergent")
        return float(np.mean(div)) if div is not None and div.size else 0.0


def sample(stats: SufficientStats, priors: PriorSpec | None, cfg: SamplerConfig, n_factors: int = 3,
           posterior: Posterior | None = None) -> PosteriorDraws:
    """Fit the hierarchical model by NUTS."""
    post = posterior or make_posterior(stats, priors, n_factors)
    draws, st, step, inv_mass = run_chains(_Target(post), post.dim, cfg)
    result = PosteriorDraws(draws, post.layout, list(stats.patient_ids), st, step, inv_mass, cfg.rng_seed)
    rate = result.divergence_rate()
    if rate > cfg.max_divergence_rate:
        msg = f"divergence rate {rate:.1%} after warmup exceeds {cfg.max_divergence_rate:.0%}"
        result.warnings.append(msg)
        warnings.warn(msg, FitWarning, stacklevel=2)
    return result


def make_posterior(stats, priors=None, n_factors=3):
    return Posterior(stats, priors, n_factors)
