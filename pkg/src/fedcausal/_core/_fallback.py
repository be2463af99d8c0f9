"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``.

Signatures and return values match the extension exactly so either backend can
be swapped in at import time.
"""

import numpy as np


def gram_gaussian(a, b, lengthscale):
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * lengthscale * lengthscale))


def gram_laplacian(a, b, lengthscale):
    dist = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    return np.exp(-dist / lengthscale)


def rff_features(u, freqs):
    proj = u @ freqs.T
    norm = 1.0 / np.sqrt(freqs.shape[0])
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1) * norm


def independent_mh_chain(log_weight, log_u):
    steps = log_weight.shape[0]
    idx = np.empty(steps, dtype=np.int64)
    cur = 0
    accepted = 0
    idx[0] = 0
    for t in range(1, steps):
        if log_u[t] < log_weight[t] - log_weight[cur]:
            cur = t
            accepted += 1
        idx[t] = cur
    return idx, accepted


def independent_mh_chains(log_weight, log_u):
    chains, steps = log_weight.shape
    cur = np.zeros(chains, dtype=np.int64)
    rows = np.arange(chains)
    accepted = 0
    for t in range(1, steps):
        move = log_u[:, t] < log_weight[:, t] - log_weight[rows, cur]
        cur[move] = t
        accepted += int(move.sum())
    return cur, accepted
