"""Log-posterior and gradient of the hierarchical sleep-dynamics model.

Sampling happens in an unconstrained space. The flat state vector packs, in
order::

    mu (4) | tau (4) | log lambda (2) | loadings (10*k, row-major) |
    eta (n*k) | log omega^2 (10) | z (n*10)

with random effects ``theta = eta @ loadings.T + sqrt(omega^2) * z``.

Constants policy: the multinomial coefficients of the transition counts and
the ``log v!`` terms of the Poisson event counts are dropped. Prior densities
are fully normalised.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import gammaln

from .data import NREM, REM, SufficientStats

TRANSITIONS = ("RA", "RN", "NA", "NR")
THETA_NAMES = (
    "gamma_RA", "gamma_RN", "gamma_NA", "gamma_NR",
    "alpha_RA", "alpha_RN", "alpha_NA", "alpha_NR",
    "phi_R", "phi_N",
)
N_RE = 10
# destination stage (A=0, R=1, N=2) of the two off-diagonal logits per origin
OFF_DEST = np.array([[0, 2], [0, 1]])
_LOG_2PI = math.log(2.0 * math.pi)


def transition_probs(mu, tau, theta_i, h: int, k_o: int) -> np.ndarray:
    """Next-stage probabilities (Awake, REM, NonREM) from sleep stage ``k_o``.

    ``k_o`` is a stage code (``REM`` or ``NREM``), ``h`` the event indicator
    of the current epoch.
    """
    if k_o not in (REM, NREM):
        raise ValueError("transitions are modelled only out of REM or NonREM")
    o = k_o - 1
    mu = np.asarray(mu, float).reshape(2, 2)[o]
    tau = np.asarray(tau, float).reshape(2, 2)[o]
    theta_i = np.asarray(theta_i, float)
    gamma = theta_i[0:4].reshape(2, 2)[o]
    alpha = theta_i[4:8].reshape(2, 2)[o]
    logits = np.zeros(3)
    logits[OFF_DEST[o]] = mu + gamma + (tau + alpha) * h
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


@dataclass
class PriorSpec:
    """Hyperparameters. Gamma uses the rate convention, inverse-gamma the scale."""

    lambda_shape: float = 2.0
    lambda_rate: float = 50.0
    mu_mean: float = 0.0
    mu_sd: float = 5.0
    tau_mean: float = 0.0
    tau_sd: float = 5.0
    loading_sd: float = 1.0
    omega2_shape: float = 2.0
    omega2_scale: float = 1.0

    def __post_init__(self):
        for name in ("lambda_shape", "lambda_rate", "mu_sd", "tau_sd", "loading_sd", "omega2_shape", "omega2_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior hyperparameter {name} must be strictly positive")

    _FAMILIES = {
        "lambda": ("gamma", {"shape": "lambda_shape", "rate": "lambda_rate"}),
        "mu": ("normal", {"mean": "mu_mean", "sd": "mu_sd"}),
        "tau": ("normal", {"mean": "tau_mean", "sd": "tau_sd"}),
        "loadings": ("normal", {"sd": "loading_sd"}),
        "omega2": ("inverse_gamma", {"shape": "omega2_shape", "scale": "omega2_scale"}),
    }

    def to_json(self) -> dict:
        out = {}
        for slot, (family, keys) in self._FAMILIES.items():
            out[slot] = {"family": family, **{k: getattr(self, attr) for k, attr in keys.items()}}
        out["loadings"]["mean"] = 0.0
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PriorSpec":
        kwargs = {}
        for slot, spec in obj.items():
            if slot not in cls._FAMILIES:
                raise ValueError(f"unknown prior slot {slot!r}")
            family, keys = cls._FAMILIES[slot]
            if spec.get("family") != family:
                raise ValueError(f"prior for {slot!r} must use family {family!r}, got {spec.get('family')!r}")
            for k, v in spec.items():
                if k == "family":
                    continue
                if slot == "loadings" and k == "mean":
                    if v != 0:
                        raise ValueError("loadings prior must be centred at zero")
                    continue
                if k not in keys:
                    raise ValueError(f"unknown hyperparameter {k!r} for {slot!r}")
                kwargs[keys[k]] = float(v)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PriorSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class Layout:
    """Index map of the flat unconstrained state."""

    n_patients: int
    n_factors: int
    blocks: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        n, k = self.n_patients, self.n_factors
        sizes = [("mu", 4), ("tau", 4), ("log_lambda", 2), ("loadings", N_RE * k),
                 ("eta", n * k), ("log_omega2", N_RE), ("z", n * N_RE)]
        blocks, start = {}, 0
        for name, size in sizes:
            blocks[name] = slice(start, start + size)
            start += size
        object.__setattr__(self, "blocks", blocks)

    @property
    def dim(self) -> int:
        return self.blocks["z"].stop

    def shape(self, name: str) -> tuple[int, ...]:
        n, k = self.n_patients, self.n_factors
        return {"mu": (4,), "tau": (4,), "log_lambda": (2,), "loadings": (N_RE, k),
                "eta": (n, k), "log_omega2": (N_RE,), "z": (n, N_RE)}[name]

    def unpack(self, x: np.ndarray) -> "ModelParams":
        b = self.blocks
        return ModelParams(
            mu=x[b["mu"]].copy(),
            tau=x[b["tau"]].copy(),
            lam=np.exp(x[b["log_lambda"]]),
            loadings=x[b["loadings"]].reshape(N_RE, self.n_factors).copy(),
            eta=x[b["eta"]].reshape(self.n_patients, self.n_factors).copy(),
            omega2=np.exp(x[b["log_omega2"]]),
            z=x[b["z"]].reshape(self.n_patients, N_RE).copy(),
        )

    def pack(self, p: "ModelParams") -> np.ndarray:
        x = np.empty(self.dim)
        b = self.blocks
        x[b["mu"]] = p.mu
        x[b["tau"]] = p.tau
        x[b["log_lambda"]] = np.log(p.lam)
        x[b["loadings"]] = np.asarray(p.loadings).reshape(-1)
        x[b["eta"]] = np.asarray(p.eta).reshape(-1)
        x[b["log_omega2"]] = np.log(p.omega2)
        x[b["z"]] = np.asarray(p.z).reshape(-1)
        return x

    def names(self) -> list[str]:
        """Human-readable name of every coordinate of the flat state."""
        out = [f"mu[{t}]" for t in TRANSITIONS] + [f"tau[{t}]" for t in TRANSITIONS]
        out += ["log_lambda[R]", "log_lambda[N]"]
        out += [f"loadings[{r},{c}]" for r in range(N_RE) for c in range(self.n_factors)]
        out += [f"eta[{i},{c}]" for i in range(self.n_patients) for c in range(self.n_factors)]
        out += [f"log_omega2[{THETA_NAMES[r]}]" for r in range(N_RE)]
        out += [f"z[{i},{THETA_NAMES[r]}]" for i in range(self.n_patients) for r in range(N_RE)]
        return out


@dataclass
class ModelParams:
    mu: np.ndarray
    tau: np.ndarray
    lam: np.ndarray
    loadings: np.ndarray
    eta: np.ndarray
    omega2: np.ndarray
    z: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return self.eta @ self.loadings.T + np.sqrt(self.omega2) * self.z

    @property
    def covariance(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.omega2)


@dataclass
class UnconstrainedState:
    values: np.ndarray
    layout: Layout


def _check_exposure(stats: SufficientStats) -> None:
    bad = (stats.exposure <= 0) & (stats.events > 0)
    if np.any(bad):
        i = int(np.argwhere(bad)[0, 0])
        raise ValueError(f"patient {stats.patient_ids[i]!r} has events but zero exposure")


def _split_counts(stats: SufficientStats):
    c = stats.counts
    c_off = np.stack([c[:, :, 0, OFF_DEST[0]], c[:, :, 1, OFF_DEST[1]]], axis=2)  # (n, h, o, j)
    return c_off, c.sum(axis=-1)


def _transition_terms(mu, tau, theta, c_off, n_risk, with_grad):
    n = theta.shape[0]
    gamma = theta[:, 0:4].reshape(n, 1, 2, 2)
    alpha = theta[:, 4:8].reshape(n, 1, 2, 2)
    h = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
    D = mu.reshape(1, 1, 2, 2) + gamma + h * (tau.reshape(1, 1, 2, 2) + alpha)
    m = np.maximum(D.max(axis=-1), 0.0)
    e = np.exp(D - m[..., None])
    lse = m + np.log(np.exp(-m) + e.sum(axis=-1))
    ll = float(np.sum(c_off * D) - np.sum(n_risk * lse))
    if not with_grad:
        return ll, None
    dD = c_off - n_risk[..., None] * np.exp(D - lse[..., None])
    return ll, dD


def log_likelihood(stats: SufficientStats, mu, tau, lam, theta) -> float:
    """Transition multinomial plus stage-event Poisson log-likelihood."""
    if stats.n_patients == 0:
        return 0.0
    _check_exposure(stats)
    mu, tau, lam = (np.asarray(a, float) for a in (mu, tau, lam))
    theta = np.asarray(theta, float).reshape(stats.n_patients, N_RE)
    c_off, n_risk = _split_counts(stats)
    ll, _ = _transition_terms(mu, tau, theta, c_off, n_risk, False)
    v, t = stats.events, stats.exposure
    rate = t * lam * np.exp(theta[:, 8:10])
    with np.errstate(divide="ignore"):
        logt = np.where(v > 0, np.log(np.where(t > 0, t, 1.0)), 0.0)
    ll += float(np.sum(v * (logt + np.log(lam) + theta[:, 8:10]) - rate))
    return ll


class Posterior:
    """Log-density and gradient over the flat unconstrained state.

    The data-dependent pieces are precomputed once; instances are cheap to
    call repeatedly and picklable (so chains can run in worker processes).
    """

    def __init__(self, stats: SufficientStats, priors: PriorSpec | None = None, n_factors: int = 3):
        _check_exposure(stats)
        self.stats = stats
        self.priors = priors or PriorSpec()
        self.layout = Layout(stats.n_patients, n_factors)
        self._c_off, self._n_risk = _split_counts(stats)
        self._v = stats.events
        self._t = stats.exposure
        with np.errstate(divide="ignore"):
            self._vlogt = np.where(self._v > 0, self._v * np.log(np.where(self._t > 0, self._t, 1.0)), 0.0)
        self._v_total = self._v.sum(axis=0)
        self._pois_const = float(np.sum(self._vlogt))
        p = self.priors
        self._prior_vec = np.array([p.lambda_shape, p.lambda_rate, p.mu_mean, p.mu_sd, p.tau_mean,
                                    p.tau_sd, p.loading_sd, p.omega2_shape, p.omega2_scale])
        self._c_off = np.ascontiguousarray(self._c_off)
        self._n_risk = np.ascontiguousarray(self._n_risk)
        self._v = np.ascontiguousarray(self._v)
        self._t = np.ascontiguousarray(self._t)
        self._const = (
            8 * (-0.5 * _LOG_2PI)
            - 4 * math.log(p.mu_sd) - 4 * math.log(p.tau_sd)
            + 2 * (p.lambda_shape * math.log(p.lambda_rate) - gammaln(p.lambda_shape))
            + self.layout.shape("loadings")[0] * n_factors * (-0.5 * _LOG_2PI - math.log(p.loading_sd))
            + N_RE * (p.omega2_shape * math.log(p.omega2_scale) - gammaln(p.omega2_shape))
            + (stats.n_patients * (n_factors + N_RE)) * (-0.5 * _LOG_2PI)
        )

    @property
    def dim(self) -> int:
        return self.layout.dim

    def log_density(self, x: np.ndarray) -> float:
        return self._evaluate(x, False)[0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self._evaluate(x, True)[1]

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self._evaluate(x, True)

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self._evaluate(x, True)

    def _evaluate(self, x, with_grad):
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.layout.dim,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.layout.dim},)")
        g = np.empty(self.layout.dim) if with_grad else np.empty(0)
        total = _kernel(x, self._c_off, self._n_risk, self._v, self._t, self._pois_const, self._prior_vec,
                        self._const, self.layout.n_patients, self.layout.n_factors, g, with_grad)
        if not math.isfinite(total):
            total = -math.inf
        return total, (g if with_grad else None)

    def _evaluate_numpy(self, x, with_grad):
        """Vectorised reference implementation of :meth:`_evaluate`."""
        b = self.layout.blocks
        n, k = self.layout.n_patients, self.layout.n_factors
        p = self.priors
        mu = x[b["mu"]]
        tau = x[b["tau"]]
        loglam = x[b["log_lambda"]]
        L = x[b["loadings"]].reshape(N_RE, k)
        eta = x[b["eta"]].reshape(n, k)
        logw2 = x[b["log_omega2"]]
        z = x[b["z"]].reshape(n, N_RE)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lam = np.exp(loglam)
            omega = np.exp(0.5 * logw2)
            theta = eta @ L.T + omega * z

            ll_trans, dD = _transition_terms(mu, tau, theta, self._c_off, self._n_risk, with_grad)
            phi = theta[:, 8:10]
            rate = self._t * lam * np.exp(phi)
            ll_pois = float(np.sum(self._vlogt) + np.sum(self._v_total * loglam) + np.sum(self._v * phi) - np.sum(rate))

            zm = (mu - p.mu_mean) / p.mu_sd
            zt = (tau - p.tau_mean) / p.tau_sd
            lp = (
                self._const
                - 0.5 * float(zm @ zm) - 0.5 * float(zt @ zt)
                + float(np.sum(p.lambda_shape * loglam - p.lambda_rate * lam))
                - 0.5 * float(np.sum(L * L)) / p.loading_sd**2
                + float(np.sum(-p.omega2_shape * logw2 - p.omega2_scale * np.exp(-logw2)))
                - 0.5 * float(np.sum(eta * eta)) - 0.5 * float(np.sum(z * z))
            )
            total = ll_trans + ll_pois + lp
        if not math.isfinite(total):
            total = -math.inf
        if not with_grad:
            return total, None

        g = np.empty(self.layout.dim)
        with np.errstate(over="ignore", invalid="ignore"):
            dD_h = dD.sum(axis=1)  # (n, o, j)
            g[b["mu"]] = dD_h.sum(axis=0).reshape(4) - zm / p.mu_sd
            g[b["tau"]] = dD[:, 1].sum(axis=0).reshape(4) - zt / p.tau_sd
            dphi = self._v - rate
            g[b["log_lambda"]] = dphi.sum(axis=0) + p.lambda_shape - p.lambda_rate * lam
            G = np.concatenate([dD_h.reshape(n, 4), dD[:, 1].reshape(n, 4), dphi], axis=1)
            g[b["loadings"]] = (G.T @ eta - L / p.loading_sd**2).reshape(-1)
            g[b["eta"]] = (G @ L - eta).reshape(-1)
            g[b["log_omega2"]] = 0.5 * omega * np.sum(G * z, axis=0) - p.omega2_shape + p.omega2_scale * np.exp(-logw2)
            g[b["z"]] = (G * omega - z).reshape(-1)
        return total, g


def log_posterior(state: UnconstrainedState, stats: SufficientStats, priors: PriorSpec | None = None) -> float:
    """Log-posterior (unconstrained space, log-Jacobians included); ``-inf`` when non-finite."""
    return Posterior(stats, priors, state.layout.n_factors).log_density(state.values)


def grad_log_posterior(state: UnconstrainedState, stats: SufficientStats, priors: PriorSpec | None = None) -> np.ndarray:
    return Posterior(stats, priors, state.layout.n_factors).grad(state.values)


@njit(cache=True)
def _kernel(x, c_off, n_risk, v, t, pois_const, pri, const, n, k, g, with_grad):
    lam_a, lam_b, mu_m, mu_sd, tau_m, tau_sd, load_sd, w_a, w_b = (
        pri[0], pri[1], pri[2], pri[3], pri[4], pri[5], pri[6], pri[7], pri[8])
    o_L = 10
    o_eta = o_L + 10 * k
    o_w = o_eta + n * k
    o_z = o_w + 10
    lam = np.exp(x[8:10])
    omega = np.exp(0.5 * x[o_w:o_w + 10])
    total = const + pois_const
    if with_grad:
        g[:] = 0.0
    for j in range(4):
        zm = (x[j] - mu_m) / mu_sd
        zt = (x[4 + j] - tau_m) / tau_sd
        total -= 0.5 * (zm * zm + zt * zt)
        if with_grad:
            g[j] = -zm / mu_sd
            g[4 + j] = -zt / tau_sd
    for j in range(2):
        total += lam_a * x[8 + j] - lam_b * lam[j]
        if with_grad:
            g[8 + j] = lam_a - lam_b * lam[j]
    for j in range(10 * k):
        total -= 0.5 * x[o_L + j] * x[o_L + j] / (load_sd * load_sd)
        if with_grad:
            g[o_L + j] = -x[o_L + j] / (load_sd * load_sd)
    for r in range(10):
        total += -w_a * x[o_w + r] - w_b * np.exp(-x[o_w + r])
        if with_grad:
            g[o_w + r] = -w_a + w_b * np.exp(-x[o_w + r])
    th = np.empty(10)
    G = np.empty(10)
    gw = np.zeros(10)
    for i in range(n):
        for r in range(10):
            s = omega[r] * x[o_z + i * 10 + r]
            for c in range(k):
                s += x[o_eta + i * k + c] * x[o_L + r * k + c]
            th[r] = s
            G[r] = 0.0
        for h in range(2):
            for o in range(2):
                a = 2 * o
                D0 = x[a] + th[a] + h * (x[4 + a] + th[4 + a])
                D1 = x[a + 1] + th[a + 1] + h * (x[5 + a] + th[5 + a])
                m = max(0.0, max(D0, D1))
                e0 = np.exp(D0 - m)
                e1 = np.exp(D1 - m)
                s = np.exp(-m) + e0 + e1
                nr = n_risk[i, h, o]
                c0 = c_off[i, h, o, 0]
                c1 = c_off[i, h, o, 1]
                total += c0 * D0 + c1 * D1 - nr * (m + np.log(s))
                if with_grad:
                    d0 = c0 - nr * e0 / s
                    d1 = c1 - nr * e1 / s
                    g[a] += d0
                    g[a + 1] += d1
                    G[a] += d0
                    G[a + 1] += d1
                    if h == 1:
                        g[4 + a] += d0
                        g[5 + a] += d1
                        G[4 + a] += d0
                        G[5 + a] += d1
        for j in range(2):
            phi = th[8 + j]
            rate = t[i, j] * lam[j] * np.exp(phi)
            total += v[i, j] * (x[8 + j] + phi) - rate
            if with_grad:
                d = v[i, j] - rate
                G[8 + j] = d
                g[8 + j] += d
        for c in range(k):
            e = x[o_eta + i * k + c]
            total -= 0.5 * e * e
        for r in range(10):
            zr = x[o_z + i * 10 + r]
            total -= 0.5 * zr * zr
        if with_grad:
            for r in range(10):
                zr = x[o_z + i * 10 + r]
                g[o_z + i * 10 + r] = G[r] * omega[r] - zr
                gw[r] += G[r] * zr
                for c in range(k):
                    g[o_L + r * k + c] += G[r] * x[o_eta + i * k + c]
            for c in range(k):
                s = -x[o_eta + i * k + c]
                for r in range(10):
                    s += G[r] * x[o_L + r * k + c]
                g[o_eta + i * k + c] = s
    if with_grad:
        for r in range(10):
            g[o_w + r] += 0.5 * omega[r] * gw[r]
    return total
