"""Independent-proposal Metropolis-Hastings and chain diagnostics."""

from dataclasses import dataclass

import numpy as np

from . import _core


class SamplerError(RuntimeError):
    pass


@dataclass
class MhResult:
    samples: np.ndarray
    accept_rate: float
    log_weight: np.ndarray


def _clean(lw):
    lw = np.asarray(lw, dtype=np.float64)
    return np.where(np.isnan(lw), -np.inf, lw)


def independent_mh(log_target, propose, log_proposal, n, burn_in=0, seed=None, max_init_tries=100, backend=None):
    """Draw ``n`` post-burn-in states of an independent-proposal MH chain.

    ``propose(k, rng)`` returns ``k`` proposals stacked on axis 0;
    ``log_target`` and ``log_proposal`` map such a stack to log densities (the
    target may be unnormalized). A move to ``z'`` from ``z`` is accepted with
    probability ``min(1, pi(z') q(z) / (pi(z) q(z')))``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    steps = n + burn_in
    if steps < 1:
        raise ValueError("need at least one step")
    z = propose(steps, rng)
    lw = _clean(log_target(z) - log_proposal(z))
    tries = 0
    while not np.isfinite(lw[0]):
        tries += 1
        if tries > max_init_tries:
            raise SamplerError(f"no proposal with positive target density after {max_init_tries} tries")
        z0 = propose(1, rng)
        z[0] = z0[0]
        lw[0] = _clean(log_target(z0) - log_proposal(z0))[0]
    log_u = np.log(rng.uniform(size=steps))
    idx, accepted = _core.independent_mh_chain(lw, log_u, backend=backend)
    rate = accepted / (steps - 1) if steps > 1 else 1.0
    return MhResult(z[idx[burn_in:]], rate, lw)


def final_states(log_weight, log_u, backend=None):
    """Final state index of each row's chain plus the overall acceptance rate."""
    lw = _clean(log_weight)
    idx, accepted = _core.independent_mh_chains(lw, log_u, backend=backend)
    moves = lw.shape[0] * max(lw.shape[1] - 1, 1)
    return idx, accepted / moves


def autocorrelation(x):
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = len(x)
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    return acf / acf[0] if acf[0] > 0 else np.ones(n)


def effective_sample_size(x):
    """ESS from Geyer's initial monotone sequence of autocorrelation pair sums."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 4 or np.var(x) == 0:
        return float(n)
    rho = autocorrelation(x)
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    prev = np.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        tau += 2.0 * p
        prev = p
    return float(n / max(tau, 1e-12))
