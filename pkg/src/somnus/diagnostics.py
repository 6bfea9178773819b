"""MCMC convergence diagnostics: multi-chain ESS and split R-hat."""

from __future__ import annotations

import math
import warnings

import numpy as np


class DegenerateChainWarning(UserWarning):
    """Raised (as a warning) when a diagnostic is undefined for constant draws."""


def _chains(draws, param=None) -> np.ndarray:
    if hasattr(draws, "draws") and hasattr(draws, "layout"):
        if param is None:
            raise ValueError("a parameter index or name is required for PosteriorDraws")
        if isinstance(param, str):
            x = draws.scalar(param)
        else:
            x = draws.draws[..., int(param)]
    else:
        x = np.asarray(draws, dtype=float)
        if param is not None:
            x = x[..., param]
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (n_chains, n_samples)")
    return x


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, lags 0..n-1, via FFT."""
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n] / n


def effective_sample_size(draws, param_index=None) -> float:
    """Effective sample size pooled across chains.

    Autocorrelations combine within-chain autocovariances with the
    between-chain variance; the sum is truncated by Geyer's initial monotone
    sequence rule. Constant draws give 0 with a :class:`DegenerateChainWarning`.
    """
    x = _chains(draws, param_index)
    m, n = x.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0])) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += float(np.var(chain_mean, ddof=1))
    if not var_plus > 0 or not math.isfinite(var_plus):
        warnings.warn("constant draws: effective sample size set to 0", DegenerateChainWarning, stacklevel=2)
        return 0.0
    rho = np.zeros(n)
    mean_acov = acov.mean(axis=0)

    def rho_at(t):
        return 1.0 - (mean_var - mean_acov[t]) / var_plus

    rho[0] = 1.0
    even, odd = 1.0, rho_at(1)
    rho[1] = odd
    t = 0
    while t < n - 3 and even + odd > 0:
        t += 2
        even, odd = rho_at(t), rho_at(t + 1)
        if even + odd >= 0:
            rho[t], rho[t + 1] = even, odd
    max_t = t
    if even > 0:
        rho[max_t] = even
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = 0.5 * (rho[t - 1] + rho[t])
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1: max_t + 2].sum()
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)


def gelman_rubin(draws, param_index=None) -> float:
    """Split R-hat: every chain is halved, then ``sqrt(var_plus / W)``.

    ``W`` is the mean within-half variance and
    ``var_plus = (N - 1) / N * W + B / N`` with ``B / N`` the variance of the
    half means. Zero within-chain variance gives ``inf`` with a warning.
    """
    x = _chains(draws, param_index)
    m, n = x.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    half = n // 2
    split = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    N = split.shape[1]
    W = float(np.mean(np.var(split, axis=1, ddof=1)))
    B_over_N = float(np.var(split.mean(axis=1), ddof=1))
    if not W > 0:
        warnings.warn("zero within-chain variance: R-hat set to inf", DegenerateChainWarning, stacklevel=2)
        return math.inf
    var_plus = (N - 1) / N * W + B_over_N
    return float(math.sqrt(var_plus / W))


def summarize(draws, names=None) -> dict:
    """Per-parameter ESS, R-hat and flags for a :class:`PosteriorDraws`."""
    if names is None:
        names = list(draws.fixed_effects())
        names += [f"omega2[{c}]" for c in _theta_names()]
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateChainWarning)
        for name in names:
            x = draws.scalar(name)
            ess = effective_sample_size(x)
            rhat = gelman_rubin(x) if x.shape[1] >= 4 else math.nan
            out[name] = {
                "mean": float(x.mean()),
                "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                "ess": ess,
                "rhat": rhat if math.isfinite(rhat) else None,
                "degenerate": ess == 0.0 or not math.isfinite(rhat),
            }
    return out


def _theta_names():
    from .model import THETA_NAMES

    return THETA_NAMES
