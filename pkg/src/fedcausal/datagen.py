"""Synthetic benchmark generators with recorded ground truth.

Every generator draws its coefficient vectors once from the master seed and
each source's records from a sub-seed of ``(seed, source_id)``, so a run is
reproducible from the seed alone. Ground truth (both potential outcomes and
the ITE) is kept apart from the observed shards and written to its own file.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .dataset import SourceDataset, save_csv

FAMILIES = ("fedci_real", "fedci_binary", "fedci_count", "causalrff", "causalfi")
RHO_DEFAULT = (0.11, 0.17, 0.34, 0.26, 0.12)
COUNT_LOG_RATE_MAX = 40.0  # numpy's Poisson sampler rejects rates above ~9e18


def sigmoid(v):
    return special.expit(v)


def softplus(v):
    return np.logaddexp(0.0, v)


@dataclass
class DgpConfig:
    """Generator settings.

    ``deltas`` holds one shift per source for the latent-confounder family.
    ``missing_rate`` (incomplete-confounder family) recalibrates the missingness
    offset so that the expected share of missing ``u`` cells hits the target.
    """

    family: str = "fedci_real"
    n: int = 1000
    m: int = 5
    dx: int = None
    seed: int = 0
    scale: str = "data1"
    noise_sd: float = 1.0
    deltas: list = None
    rho: list = None
    d: int = 10
    missing_rate: float = None
    linear_outcome: bool = False
    missing_offset: float = 5.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be at least 1")
        if self.dx is None:
            self.dx = {"causalrff": 30, "causalfi": 10}.get(self.family, 20)
        if self.scale not in ("data1", "data2"):
            raise ValueError(f"scale must be data1 or data2, got {self.scale!r}")
        if self.deltas is not None and len(self.deltas) != self.m:
            raise ValueError("need one delta per source")
        if self.missing_rate is not None and not 0.0 < self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in (0, 1)")


@dataclass
class GroundTruth:
    """Per-record potential outcomes of one source; ``ite = y1 - y0``."""

    y0: np.ndarray
    y1: np.ndarray
    mu0: np.ndarray = None
    mu1: np.ndarray = None
    latent: np.ndarray = None

    @property
    def ite(self):
        return self.y1 - self.y0

    @property
    def tau(self):
        return float(np.mean(self.ite))

    def subset(self, idx):
        def pick(a):
            return None if a is None else a[idx]

        return GroundTruth(self.y0[idx], self.y1[idx], pick(self.mu0), pick(self.mu1), pick(self.latent))


@dataclass
class FederatedData:
    sources: dict
    truth: dict
    coefficients: dict = field(default_factory=dict)
    config: DgpConfig = None

    @property
    def tau(self):
        ite = np.concatenate([self.truth[s].ite for s in sorted(self.truth)])
        return float(ite.mean())


def _rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def _observe(w, y0, y1):
    return np.where(w == 1, y1, y0)


# ---------------------------------------------------------------------------
# two-outcome GP benchmark


def fedci_coefficients(cfg):
    rng = _rng(cfg.seed, 0)
    dx = cfg.dx
    if cfg.scale == "data1":
        b0, c0, bmean, cmean = 0.9, 2.0, 0.0, 1.0
    else:
        b0, c0, bmean, cmean = 6.0, 30.0, 10.0, 15.0
    return {
        "a0": 0.6,
        "a1": rng.normal(0.0, np.sqrt(2.0), dx),
        "b0": b0,
        "b1": rng.normal(bmean, np.sqrt(2.0), dx),
        "c0": c0,
        "c1": rng.normal(cmean, np.sqrt(2.0), dx),
        "sigma0": cfg.noise_sd,
        "sigma1": cfg.noise_sd,
    }


def fedci_source(coef, n, family, seed, source_id=1):
    rng = _rng(seed, 1, source_id)
    dx = len(coef["a1"])
    x = rng.uniform(-1.0, 1.0, (n, dx))
    w = (rng.uniform(size=n) < sigmoid(coef["a0"] + x @ coef["a1"])).astype(np.int64)
    l0 = coef["b0"] + x @ coef["b1"]
    l1 = coef["c0"] + x @ coef["c1"]
    if family == "fedci_real":
        mu0, mu1 = softplus(l0), softplus(l1)
        y0 = mu0 + coef["sigma0"] * rng.standard_normal(n)
        y1 = mu1 + coef["sigma1"] * rng.standard_normal(n)
    elif family == "fedci_binary":
        mu0, mu1 = sigmoid(l0), sigmoid(l1)
        y0 = (rng.uniform(size=n) < mu0).astype(np.float64)
        y1 = (rng.uniform(size=n) < mu1).astype(np.float64)
    else:
        mu0 = np.exp(np.minimum(l0, COUNT_LOG_RATE_MAX))
        mu1 = np.exp(np.minimum(l1, COUNT_LOG_RATE_MAX))
        y0 = rng.poisson(mu0).astype(np.float64)
        y1 = rng.poisson(mu1).astype(np.float64)
    ds = SourceDataset(source_id, w, _observe(w, y0, y1), x)
    return ds, GroundTruth(y0, y1, mu0, mu1)


def gen_fedci(cfg):
    coef = fedci_coefficients(cfg)
    sources, truth = {}, {}
    for s in range(1, cfg.m + 1):
        sources[s], truth[s] = fedci_source(coef, cfg.n, cfg.family, cfg.seed, s)
    return FederatedData(sources, truth, coef, cfg)


# ---------------------------------------------------------------------------
# categorical latent confounder with proxies


def causalrff_coefficients(cfg):
    rho = np.asarray(cfg.rho if cfg.rho is not None else RHO_DEFAULT, dtype=np.float64)
    if rho.ndim != 1 or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-8:
        raise ValueError("rho must be a probability vector")
    k = len(rho)
    rng = _rng(cfg.seed, 0)
    sd = np.sqrt(2.0)
    return {
        "rho": rho,
        "a0": rng.normal(0.0, sd, cfg.dx),
        "a1": rng.normal(0.0, sd, (cfg.dx, k)),
        "b0": 0.0,
        "b1": rng.normal(0.0, sd, k),
        "c0": 0.9,
        "c1": rng.normal(0.0, sd, k),
        "d0": 7.9,
        "d1": rng.normal(0.0, sd, k),
        "sigma0": cfg.noise_sd,
        "sigma1": cfg.noise_sd,
    }


def causalrff_arm_means(coef, delta=0.0):
    """Per-level means of y(0) and y(1): softplus of the shifted linear predictors."""
    mu0 = softplus(coef["c0"] + coef["c1"] + delta)
    mu1 = softplus(coef["d0"] + coef["d1"] + delta)
    return mu0, mu1


def causalrff_treat_prob(coef, delta=0.0):
    return sigmoid(coef["b0"] + coef["b1"] + delta)


def causalrff_proxy_prob(coef):
    """``(dx, K)`` matrix of ``P(x_j = 1 | z = k)``."""
    return sigmoid(coef["a0"][:, None] + coef["a1"])


def causalrff_source(coef, n, delta, seed, source_id=1):
    rng = _rng(seed, 1, source_id)
    rho = coef["rho"]
    z = rng.choice(len(rho), size=n, p=rho)
    px = causalrff_proxy_prob(coef)[:, z].T
    x = (rng.uniform(size=px.shape) < px).astype(np.float64)
    w = (rng.uniform(size=n) < causalrff_treat_prob(coef, delta)[z]).astype(np.int64)
    m0, m1 = causalrff_arm_means(coef, delta)
    mu0, mu1 = m0[z], m1[z]
    y0 = mu0 + coef["sigma0"] * rng.standard_normal(n)
    y1 = mu1 + coef["sigma1"] * rng.standard_normal(n)
    ds = SourceDataset(source_id, w, _observe(w, y0, y1), x)
    return ds, GroundTruth(y0, y1, mu0, mu1, np.eye(len(rho))[z])


def gen_causalrff(cfg):
    coef = causalrff_coefficients(cfg)
    deltas = cfg.deltas if cfg.deltas is not None else [0.0] * cfg.m
    coef["deltas"] = list(map(float, deltas))
    sources, truth = {}, {}
    for s in range(1, cfg.m + 1):
        sources[s], truth[s] = causalrff_source(coef, cfg.n, deltas[s - 1], cfg.seed, s)
    return FederatedData(sources, truth, coef, cfg)


def causalrff_exact_ate(coef, delta=0.0):
    """Population ATE by enumerating the latent levels."""
    m0, m1 = causalrff_arm_means(coef, delta)
    return float(coef["rho"] @ (m1 - m0))


def causalrff_exact_cate(coef, x, delta=0.0):
    """``E[y(1) - y(0) | x]`` with the exact posterior over the latent levels."""
    x = np.atleast_2d(x)
    px = causalrff_proxy_prob(coef)
    logp = np.log(coef["rho"])[None, :] + x @ np.log(px) + (1 - x) @ np.log1p(-px)
    post = special.softmax(logp, axis=1)
    m0, m1 = causalrff_arm_means(coef, delta)
    return post @ (m1 - m0)


DATA_DIFF_DELTAS = (0.0, 4.0, 4.0, 4.0, 4.0)


# ---------------------------------------------------------------------------
# Gaussian confounders with missing entries


def causalfi_coefficients(cfg):
    rng = _rng(cfg.seed, 0)
    d, dx = cfg.d, cfg.dx
    dz = d + dx
    # factor-model covariance of the confounders (u first, then x)
    F = rng.normal(0.0, 0.5, (dz, 5))
    Sigma = F @ F.T + 0.5 * np.eye(dz)
    L = rng.uniform(0.0, 0.5, (dx, 5))
    M = L @ L.T
    coef = {
        "m": np.zeros(dz),
        "Sigma": Sigma,
        "a0": 0.0,
        "b1": rng.normal(0.0, 0.3, d),
        "c0": 1.0,
        "c1": rng.normal(0.0, 0.7, d),
        "d0": 3.0,
        "d1": rng.normal(0.0, 0.7, d),
        "sigma0": cfg.noise_sd,
        "sigma1": cfg.noise_sd,
        "e0": np.full(d, float(cfg.missing_offset)),
        "e1": rng.uniform(-2.0, 0.0, d),
        "e2": rng.uniform(-2.0, 0.0, d),
        "e3": rng.multivariate_normal(np.zeros(dx), M, size=d),
        "linear_outcome": bool(cfg.linear_outcome),
    }
    if cfg.missing_rate is not None:
        coef["e0"] = _calibrate_offset(coef, cfg, cfg.missing_rate)
    return coef


def _outcomes_fi(coef, u, rng):
    n = u.shape[0]
    l0 = coef["c0"] + u @ coef["c1"]
    l1 = coef["d0"] + u @ coef["d1"]
    if coef["linear_outcome"]:
        mu0, mu1 = l0, l1
    else:
        mu0, mu1 = softplus(l0), softplus(l1)
    y0 = mu0 + coef["sigma0"] * rng.standard_normal(n)
    y1 = mu1 + coef["sigma1"] * rng.standard_normal(n)
    return mu0, mu1, y0, y1


def _complete_fi(coef, n, rng, d):
    z = rng.multivariate_normal(coef["m"], coef["Sigma"], size=n)
    u, x = z[:, :d], z[:, d:]
    w = (rng.uniform(size=n) < sigmoid(coef["a0"] + u @ coef["b1"])).astype(np.int64)
    mu0, mu1, y0, y1 = _outcomes_fi(coef, u, rng)
    return u, x, w, mu0, mu1, y0, y1


def _observe_logits(coef, w, y, x, e0=None):
    e0 = coef["e0"] if e0 is None else e0
    return e0[None, :] + np.outer(w, coef["e1"]) + np.outer(y, coef["e2"]) + x @ coef["e3"].T


def _calibrate_offset(coef, cfg, target, n=20000):
    """Common shift of ``e0`` so that the expected missing share equals ``target``."""
    rng = _rng(cfg.seed, 2)
    u, x, w, _, _, y0, y1 = _complete_fi(coef, n, rng, cfg.d)
    y = _observe(w, y0, y1)
    base = _observe_logits(coef, w, y, x, np.zeros(cfg.d))

    def miss(shift):
        return 1.0 - sigmoid(base + shift).mean()

    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if miss(mid) > target:
            lo = mid
        else:
            hi = mid
    return np.full(cfg.d, 0.5 * (lo + hi))


def causalfi_source(coef, n, seed, source_id=1):
    rng = _rng(seed, 1, source_id)
    d = len(coef["b1"])
    u, x, w, mu0, mu1, y0, y1 = _complete_fi(coef, n, rng, d)
    y = _observe(w, y0, y1)
    r = (rng.uniform(size=(n, d)) < sigmoid(_observe_logits(coef, w, y, x))).astype(np.int64)
    u_obs = np.where(r == 1, u, np.nan)
    ds = SourceDataset(source_id, w, y, x, u_obs, r)
    return ds, GroundTruth(y0, y1, mu0, mu1, u)


def gen_causalfi(cfg):
    coef = causalfi_coefficients(cfg)
    sources, truth = {}, {}
    for s in range(1, cfg.m + 1):
        sources[s], truth[s] = causalfi_source(coef, cfg.n, cfg.seed, s)
    return FederatedData(sources, truth, coef, cfg)


def generate(cfg):
    if cfg.family.startswith("fedci"):
        return gen_fedci(cfg)
    if cfg.family == "causalrff":
        return gen_causalrff(cfg)
    return gen_causalfi(cfg)


# ---------------------------------------------------------------------------
# pre-simulated IHDP replicate


def ihdp_load(path, m=3):
    """Load a replicate CSV with ``treatment``/``w``, ``y_factual``/``y``, ``y0``/``mu0``, ``y1``/``mu1`` and covariates.

    Rows are divided into ``m`` contiguous sources of equal size (a remainder of
    fewer than ``m`` rows is dropped).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=np.float64)
    col = {h: i for i, h in enumerate(header)}

    def find(*names):
        for nm in names:
            if nm in col:
                return data[:, col[nm]]
        return None

    w = find("w", "treatment", "t")
    y = find("y", "y_factual", "yf")
    y0 = find("y0", "mu0")
    y1 = find("y1", "mu1")
    if y0 is None or y1 is None:
        raise ValueError("IHDP file needs both potential-outcome columns (y0, y1)")
    if w is None or y is None:
        raise ValueError("IHDP file needs treatment and factual outcome columns")
    ite = find("ite")
    if ite is not None and not np.allclose(ite, y1 - y0):
        raise ValueError("ite column disagrees with y1 - y0")
    skip = {"w", "treatment", "t", "y", "y_factual", "yf", "y0", "y1", "mu0", "mu1", "ite", "y_cfactual", "ycf"}
    xcols = [i for h, i in col.items() if h not in skip]
    x = data[:, xcols]
    size = len(w) // m
    sources, truth = {}, {}
    for s in range(m):
        sl = slice(s * size, (s + 1) * size)
        sources[s + 1] = SourceDataset(s + 1, w[sl].astype(np.int64), y[sl], x[sl])
        truth[s + 1] = GroundTruth(y0[sl], y1[sl])
    return FederatedData(sources, truth)


# ---------------------------------------------------------------------------
# output files


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_truth(path, truth):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["y0", "y1", "ite"])
        for a, b in zip(truth.y0, truth.y1):
            wr.writerow([repr(float(a)), repr(float(b)), repr(float(b - a))])


def read_truth(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    y0 = np.array([float(r["y0"]) for r in rows])
    y1 = np.array([float(r["y1"]) for r in rows])
    return GroundTruth(y0, y1)


def write_dataset(fd, outdir):
    """Per-source CSVs, ``_truth.csv`` files and a JSON manifest of the drawn coefficients."""
    os.makedirs(outdir, exist_ok=True)
    files = {}
    for s in sorted(fd.sources):
        p = os.path.join(outdir, f"source_{s}.csv")
        t = os.path.join(outdir, f"source_{s}_truth.csv")
        save_csv(fd.sources[s], p)
        write_truth(t, fd.truth[s])
        files[str(s)] = {"data": os.path.basename(p), "truth": os.path.basename(t)}
    manifest = {
        "config": asdict(fd.config) if fd.config is not None else None,
        "coefficients": {k: _jsonable(v) for k, v in fd.coefficients.items()},
        "files": files,
        "tau": fd.tau,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
