"""Federated effect estimation when confounders are only partly observed.

Three stages, each trained with the federated runtime:

1. a Bayesian network for ``p(u | y, w, x)`` fitted on the observed entries of
   ``u`` only (valid under missing-at-random),
2. complete pseudo rows drawn from that model by forward sampling, used to fit
   two surrogate networks ``p(u_missing | x, u_observed)`` and ``p(y | w, x, u)``,
3. posterior draws of the surrogates turned into samples of local ATE and
   CATE, combined across sources by a size-weighted average per draw.

All networks are fully connected with mean-field Gaussian posteriors over
every weight. Values are standardized with pooled first and second moments,
so only sums leave a source before training.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import special, stats

from .evaluation import size_weighted_mean
from .federation.params import ParameterVector
from .federation.problem import Problem, collect_grads, register, sub_seed, torch_params

torch.set_default_dtype(torch.float64)

LOG2PI = math.log(2.0 * math.pi)
SD_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# families of confounder dimensions


def family_width(fam):
    """Number of distribution parameters a head emits for one dimension."""
    if fam == "gaussian":
        return 2
    if fam in ("bernoulli", "poisson"):
        return 1
    if fam.startswith("categorical:"):
        k = int(fam.split(":", 1)[1])
        if k < 2:
            raise ValueError(f"categorical needs at least two levels, got {fam!r}")
        return k
    raise ValueError(f"unknown family {fam!r}")


def _offsets(families):
    out, o = [], 0
    for f in families:
        out.append(o)
        o += family_width(f)
    return out, o


def family_loglik(families, lam, u, mask):
    """Per-record sum over dimensions of masked log-densities; ``lam`` (..., n, width), ``u`` and ``mask`` (n, d)."""
    offs, _ = _offsets(families)
    total = 0.0
    for j, fam in enumerate(families):
        a = offs[j]
        v = u[:, j]
        if fam == "gaussian":
            sd = torch.nn.functional.softplus(lam[..., a + 1]) + SD_FLOOR
            lp = -0.5 * ((v - lam[..., a]) / sd) ** 2 - torch.log(sd) - 0.5 * LOG2PI
        elif fam == "bernoulli":
            g = lam[..., a]
            lp = v * torch.nn.functional.logsigmoid(g) + (1 - v) * torch.nn.functional.logsigmoid(-g)
        elif fam == "poisson":
            eta = lam[..., a]
            lp = v * eta - torch.exp(eta) - torch.lgamma(v + 1)
        else:
            k = family_width(fam)
            logp = torch.log_softmax(lam[..., a:a + k], dim=-1)
            idx = v.long().clamp(0, k - 1)
            lp = torch.gather(logp, -1, idx.expand(logp.shape[:-1]).unsqueeze(-1)).squeeze(-1)
        total = total + lp * mask[:, j]
    return total


def family_mean(families, lam):
    """Conditional means per dimension from numpy head outputs (..., width)."""
    offs, _ = _offsets(families)
    out = []
    for j, fam in enumerate(families):
        a = offs[j]
        if fam == "gaussian":
            out.append(lam[..., a])
        elif fam == "bernoulli":
            out.append(special.expit(lam[..., a]))
        elif fam == "poisson":
            out.append(np.exp(lam[..., a]))
        else:
            k = family_width(fam)
            out.append(special.softmax(lam[..., a:a + k], axis=-1) @ np.arange(k))
    return np.stack(out, axis=-1)


def family_sample(families, lam, rng):
    """One draw per row from numpy head outputs ``lam`` (..., width)."""
    offs, _ = _offsets(families)
    out = []
    for j, fam in enumerate(families):
        a = offs[j]
        if fam == "gaussian":
            sd = np.logaddexp(0.0, lam[..., a + 1]) + SD_FLOOR
            out.append(lam[..., a] + sd * rng.standard_normal(sd.shape))
        elif fam == "bernoulli":
            p = special.expit(lam[..., a])
            out.append((rng.uniform(size=p.shape) < p).astype(np.float64))
        elif fam == "poisson":
            out.append(rng.poisson(np.exp(np.minimum(lam[..., a], 30.0))).astype(np.float64))
        else:
            k = family_width(fam)
            p = special.softmax(lam[..., a:a + k], axis=-1)
            c = np.cumsum(p, axis=-1)
            draw = rng.uniform(size=p.shape[:-1] + (1,))
            out.append(np.minimum((draw > c).sum(axis=-1), k - 1).astype(np.float64))
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# batched fully connected networks with Gaussian weight posteriors


class Mlp:
    """Layer layout of a fully connected ELU network stored as one flat weight vector."""

    def __init__(self, n_in, hidden, n_out):
        self.sizes = [int(n_in), *[int(h) for h in hidden], int(n_out)]
        self.size = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def init_mean(self, rng):
        parts = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            parts.append(rng.standard_normal(a * b) / math.sqrt(a))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def apply(self, theta, inp):
        """``theta`` (K, P) with ``inp`` (n, n_in) or (K, n, n_in) -> (K, n, n_out)."""
        K = theta.shape[0]
        h = inp if inp.dim() == 3 else inp.unsqueeze(0).expand(K, -1, -1)
        o = 0
        last = len(self.sizes) - 2
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W = theta[:, o:o + a * b].reshape(K, a, b)
            o += a * b
            bias = theta[:, o:o + b]
            o += b
            h = torch.baddbmm(bias.unsqueeze(1), h, W)
            if i < last:
                h = torch.nn.functional.elu(h)
        return h


def gaussian_kl(mean, log_sd, prior_sd=1.0):
    """``KL(N(mean, sd^2) || N(0, prior_sd^2))`` summed over weights."""
    v = torch.exp(2 * log_sd)
    return (math.log(prior_sd) - log_sd + (v + mean**2) / (2 * prior_sd**2) - 0.5).sum()


def draw_weights(t, name, K, seed, key):
    """Reparameterized draws ``mean + sd * eps`` (K, P) of one network; ``eps`` depends only on the seed."""
    mean, log_sd = t[f"{name}_mean"], t[f"{name}_logsd"]
    eps = np.random.default_rng(sub_seed(seed, 17, key)).standard_normal((K, mean.shape[0]))
    return mean.unsqueeze(0) + torch.exp(log_sd).unsqueeze(0) * torch.as_tensor(eps)


def draw_weights_np(p, name, K, rng):
    mean, log_sd = p[f"{name}_mean"], p[f"{name}_logsd"]
    return mean[None, :] + np.exp(log_sd)[None, :] * rng.standard_normal((K, mean.shape[0]))


# ---------------------------------------------------------------------------
# standardization from pooled sums


def _moment_stats(ds):
    u = ds.u_filled(0.0) if ds.d else np.zeros((ds.n, 0))
    r = ds.r if ds.d else np.zeros((ds.n, 0))
    return {
        "n": int(ds.n),
        "dx": int(ds.dx),
        "d": int(ds.d),
        "sum_y": float(ds.y.sum()),
        "sum_y2": float((ds.y**2).sum()),
        "sum_x": ds.x.sum(axis=0).tolist(),
        "sum_x2": (ds.x**2).sum(axis=0).tolist(),
        "count_u": r.sum(axis=0).astype(float).tolist(),
        "sum_u": (u * r).sum(axis=0).tolist(),
        "sum_u2": (u**2 * r).sum(axis=0).tolist(),
    }


def _loc_scale(s1, s2, n):
    s1, s2, n = np.asarray(s1, float), np.asarray(s2, float), np.asarray(n, float)
    n = np.maximum(n, 1.0)
    loc = s1 / n
    var = s2 / n - loc**2
    return loc, np.where(var > 1e-12, np.sqrt(np.maximum(var, 1e-12)), 1.0)


def pooled_standardization(stats, families):
    st = list(stats.values())
    N = sum(s["n"] for s in st)
    y_loc, y_scale = _loc_scale(sum(s["sum_y"] for s in st), sum(s["sum_y2"] for s in st), N)
    x_loc, x_scale = _loc_scale(np.sum([s["sum_x"] for s in st], axis=0), np.sum([s["sum_x2"] for s in st], axis=0), N)
    u_loc, u_scale = _loc_scale(np.sum([s["sum_u"] for s in st], axis=0), np.sum([s["sum_u2"] for s in st], axis=0),
                                np.sum([s["count_u"] for s in st], axis=0))
    gauss = np.array([f == "gaussian" for f in families], dtype=bool)
    u_loc = np.where(gauss, u_loc, 0.0)
    u_scale = np.where(gauss, u_scale, 1.0)
    return {
        "y_loc": float(y_loc), "y_scale": float(y_scale),
        "x_loc": np.atleast_1d(x_loc).tolist(), "x_scale": np.atleast_1d(x_scale).tolist(),
        "u_loc": np.atleast_1d(u_loc).tolist(), "u_scale": np.atleast_1d(u_scale).tolist(),
    }


class Standardizer:
    def __init__(self, shared):
        self.y_loc, self.y_scale = shared["y_loc"], shared["y_scale"]
        self.x_loc, self.x_scale = np.asarray(shared["x_loc"]), np.asarray(shared["x_scale"])
        self.u_loc, self.u_scale = np.asarray(shared["u_loc"]), np.asarray(shared["u_scale"])

    def y(self, v):
        return (np.asarray(v) - self.y_loc) / self.y_scale

    def x(self, v):
        return (np.asarray(v) - self.x_loc) / self.x_scale

    def u(self, v, r=None):
        out = (np.asarray(v) - self.u_loc) / self.u_scale
        if r is not None:
            out = np.where(r == 1, out, 0.0)
        return np.nan_to_num(out, nan=0.0)

    def u_back(self, v):
        return np.asarray(v) * self.u_scale + self.u_loc


def _families(families, d):
    fams = list(families) if families is not None else ["gaussian"] * d
    if len(fams) != d:
        raise ValueError(f"{len(fams)} families for {d} confounder dimensions")
    for f in fams:
        family_width(f)
    return fams


class _BayesProblem(Problem):
    maximize = True

    def _setup(self, hidden, n_mc, prior_sd, init_logsd, families):
        self.hidden = tuple(int(h) for h in hidden)
        self.n_mc = int(n_mc)
        self.prior_sd = float(prior_sd)
        self.init_logsd = float(init_logsd)
        self.families = None if families is None else list(families)

    def local_stats(self, state):
        return _moment_stats(state.train)

    def build_shared(self, stats, seed):
        first = next(iter(stats.values()))
        fams = _families(self.families, first["d"])
        out = {"source_ids": sorted(int(k) for k in stats), "dx": first["dx"], "d": first["d"], "families": fams,
               "n": {str(k): v["n"] for k, v in stats.items()}}
        out.update(pooled_standardization(stats, fams))
        return out

    def _add_net(self, p, name, net, rng):
        p.add(f"{name}_mean", net.init_mean(rng))
        p.add(f"{name}_logsd", np.full(net.size, self.init_logsd))

    def kl(self, t, names):
        return sum(gaussian_kl(t[f"{n}_mean"], t[f"{n}_logsd"], self.prior_sd) for n in names)

    def local_objective(self, params, state, shared, round_seed):
        t = torch_params(params)
        J = self.source_objective(t, shared, state, round_seed)
        return collect_grads(J, t, params)

    def pooled_objective(self, params, states, shared, round_seed):
        t = torch_params(params)
        J = sum(self.source_objective(t, shared, states[s], round_seed) for s in sorted(states))
        return collect_grads(J, t, params)


@register
class CausalFiProblem(_BayesProblem):
    """Bayesian model of ``p(u | y, w, x)``; maximizes ``E_q[log p(u_obs | y, w, x)] - KL / m`` per source.

    Two networks map standardized ``(y, x)`` to the distribution parameters of
    every confounder dimension; the treatment switches between them.
    """

    name = "causalfi"
    nets = ("f0", "f1")

    def __init__(self, hidden=(20, 20, 20), n_mc=1, prior_sd=1.0, init_logsd=-5.0, families=None,
                 pseudo_factor=5):
        super().__init__(hidden=list(hidden), n_mc=n_mc, prior_sd=prior_sd, init_logsd=init_logsd,
                         families=families, pseudo_factor=pseudo_factor)
        self._setup(hidden, n_mc, prior_sd, init_logsd, families)
        self.pseudo_factor = int(pseudo_factor)

    def net(self, shared):
        _, width = _offsets(shared["families"])
        return Mlp(1 + shared["dx"], self.hidden, width)

    def init_params(self, shared, seed):
        rng = np.random.default_rng(sub_seed(seed, 5))
        net = self.net(shared)
        p = ParameterVector()
        for n in self.nets:
            self._add_net(p, n, net, rng)
        return p

    def heads(self, thetas, net, y_std, x_std, w):
        """``w * f1 + (1 - w) * f0`` for weight draws ``thetas = (K, P)`` per network."""
        inp = torch.cat([torch.as_tensor(y_std).unsqueeze(1), torch.as_tensor(x_std)], dim=1)
        w = torch.as_tensor(np.asarray(w, dtype=np.float64)).reshape(1, -1, 1)
        return w * net.apply(thetas[1], inp) + (1 - w) * net.apply(thetas[0], inp)

    def source_objective(self, t, shared, state, round_seed):
        ds = state.train
        m = len(shared["source_ids"])
        sd = Standardizer(shared)
        net = self.net(shared)
        thetas = [draw_weights(t, n, self.n_mc, round_seed, i) for i, n in enumerate(self.nets)]
        lam = self.heads(thetas, net, sd.y(ds.y), sd.x(ds.x), ds.w)
        u = torch.as_tensor(sd.u(ds.u, ds.r))
        mask = torch.as_tensor(ds.r.astype(np.float64))
        ll = family_loglik(shared["families"], lam, u, mask)  # (K, n)
        if not torch.all(torch.isfinite(ll)):
            bad = int(torch.nonzero(~torch.isfinite(ll))[0, 1])
            raise FloatingPointError(f"non-finite likelihood at record {bad} of source {state.source_id}")
        return ll.sum(dim=1).mean() - self.kl(t, self.nets) / m

    def pseudo(self, params, shared, ds, count, seed):
        """Complete pseudo rows ``(y, w, x, u)`` in standardized units, one weight draw per row."""
        if count < 1:
            raise ValueError("pseudo count must be positive")
        rng = np.random.default_rng(seed)
        p = {k: np.asarray(v) for k, v in params.items()}
        sd = Standardizer(shared)
        idx = rng.integers(0, ds.n, size=count)
        y, w, x = sd.y(ds.y[idx]), ds.w[idx], sd.x(ds.x[idx])
        net = self.net(shared)
        lam = np.empty((count, _offsets(shared["families"])[1]))
        inp = torch.as_tensor(np.column_stack([y, x]))
        chunk = 512
        with torch.no_grad():
            for a in range(0, count, chunk):
                b = min(count, a + chunk)
                th = [torch.as_tensor(draw_weights_np(p, n, b - a, rng)) for n in self.nets]
                h = inp[a:b].unsqueeze(1)  # (k, 1, in): one draw per row
                both = [net.apply(th_i, h)[:, 0, :].numpy() for th_i in th]
                lam[a:b] = np.where(w[a:b, None] == 1, both[1], both[0])
        u = family_sample(shared["families"], lam, rng)
        return {"y": y, "w": w.astype(np.int64), "x": x, "u": u}

    def query(self, kind, params, state, shared, seed, options):
        if kind == "pseudo":
            count = int(options.get("count") or self.pseudo_factor * state.train.n)
            state.store["pseudo"] = self.pseudo(params, shared, state.train, count, sub_seed(seed, state.source_id))
            state.store["mask_rates"] = state.train.r.mean(axis=0)
            return {"n": count}
        return super().query(kind, params, state, shared, seed, options)


def generate_pseudo(problem, params, shared, ds, count, seed=0, original_units=True):
    """Forward-sample ``count`` complete rows; ``u`` returned in original units unless asked otherwise."""
    rows = problem.pseudo(params, shared, ds, count, seed)
    if original_units:
        sd = Standardizer(shared)
        rows = dict(rows, u=sd.u_back(rows["u"]), y=rows["y"] * sd.y_scale + sd.y_loc,
                    x=rows["x"] * sd.x_scale + sd.x_loc)
    return rows


@register
class SurrogateProblem(_BayesProblem):
    """Surrogates ``p(u_missing | x, u_observed, r)`` and ``p(y | w, x, u)`` fitted on stored pseudo rows.

    Each round masks every pseudo entry independently with that source's
    empirical missing rate; the confounder network is scored only on masked
    entries. Both surrogates share one objective and one set of rounds.
    """

    name = "causalfi_surrogate"
    nets = ("net_u", "net_y0", "net_y1")

    def __init__(self, hidden=(20, 20, 20), n_mc=1, prior_sd=1.0, init_logsd=-5.0, families=None):
        super().__init__(hidden=list(hidden), n_mc=n_mc, prior_sd=prior_sd, init_logsd=init_logsd,
                         families=families)
        self._setup(hidden, n_mc, prior_sd, init_logsd, families)

    def u_net(self, shared):
        d, dx = shared["d"], shared["dx"]
        return Mlp(dx + 2 * d, self.hidden, _offsets(shared["families"])[1])

    def y_net(self, shared):
        return Mlp(shared["dx"] + shared["d"], self.hidden, 2)

    def init_params(self, shared, seed):
        rng = np.random.default_rng(sub_seed(seed, 6))
        p = ParameterVector()
        self._add_net(p, "net_u", self.u_net(shared), rng)
        for n in ("net_y0", "net_y1"):
            self._add_net(p, n, self.y_net(shared), rng)
        return p

    @staticmethod
    def _pseudo(state):
        rows = state.store.get("pseudo")
        if not rows or len(rows["y"]) == 0:
            raise ValueError(f"source {state.source_id} has no pseudo data")
        return rows

    def source_objective(self, t, shared, state, round_seed):
        rows = self._pseudo(state)
        m = len(shared["source_ids"])
        n = len(rows["y"])
        rates = np.asarray(state.store.get("mask_rates", np.ones(shared["d"])))
        rng = np.random.default_rng(sub_seed(round_seed, state.source_id, 23))
        r = (rng.uniform(size=(n, shared["d"])) < rates[None, :]).astype(np.float64)
        u = torch.as_tensor(rows["u"])
        x = torch.as_tensor(rows["x"])
        rt = torch.as_tensor(r)
        th_u = draw_weights(t, "net_u", self.n_mc, round_seed, 0)
        lam = self.u_net(shared).apply(th_u, torch.cat([x, u * rt, rt], dim=1))
        ll_u = family_loglik(shared["families"], lam, u, 1 - rt)
        xu = torch.cat([x, u], dim=1)
        ynet = self.y_net(shared)
        w = torch.as_tensor(rows["w"].astype(np.float64)).unsqueeze(0)
        out0 = ynet.apply(draw_weights(t, "net_y0", self.n_mc, round_seed, 1), xu)
        out1 = ynet.apply(draw_weights(t, "net_y1", self.n_mc, round_seed, 2), xu)
        mean = w * out1[..., 0] + (1 - w) * out0[..., 0]
        sd = torch.nn.functional.softplus(w * out1[..., 1] + (1 - w) * out0[..., 1]) + SD_FLOOR
        y = torch.as_tensor(rows["y"]).unsqueeze(0)
        ll_y = -0.5 * ((y - mean) / sd) ** 2 - torch.log(sd) - 0.5 * LOG2PI
        return (ll_u + ll_y).sum(dim=1).mean() - self.kl(t, self.nets) / m

    def query(self, kind, params, state, shared, seed, options):
        if kind == "effect_samples":
            ds = state.eval if state.eval is not None else state.train
            res = local_effect_samples(self, params, shared, ds, K=int(options.get("K", 100)),
                                   N=int(options.get("N", 20)), M=int(options.get("M", 20)), seed=seed)
            state.store["cate"] = res.cate
            return {"n": int(ds.n), "ate": [float(v) for v in res.ate]}
        if kind == "mechanism":
            out = mcar_test(state.train, alpha=float(options.get("alpha", 0.05)))
            return {"verdict": None, "p_value": None} if out is None else {"verdict": out[0], "p_value": out[1]}
        return super().query(kind, params, state, shared, seed, options)


# ---------------------------------------------------------------------------
# effect samples


@dataclass
class LocalEffects:
    ate: np.ndarray  # (K,)
    cate: np.ndarray  # (n, K)
    n: int


def _complete_u(problem, shared, th_u, x, u_obs, r, N, rng):
    """``N`` completions of every record's missing entries per weight draw: (K, n, N, d), standardized."""
    K = th_u.shape[0]
    rt = torch.as_tensor(r.astype(np.float64))
    with torch.no_grad():
        lam = problem.u_net(shared).apply(th_u, torch.cat([torch.as_tensor(x), torch.as_tensor(u_obs) * rt, rt],
                                                          dim=1)).numpy()
    lam = np.broadcast_to(lam[:, :, None, :], (K, x.shape[0], N, lam.shape[-1]))
    draw = family_sample(shared["families"], lam, rng)
    return np.where(r[None, :, None, :] == 1, u_obs[None, :, None, :], draw)


def local_effect_samples(problem, params, shared, ds, K=100, N=20, M=20, seed=0, common_noise=True):
    """Samples of local ATE and per-record CATE from ``K`` surrogate weight draws.

    For each draw and record: ``N`` completions of the missing confounders,
    then ``M`` outcome draws under each treatment value, averaged. With
    ``common_noise`` both arms reuse the same standard-normal draws.
    """
    if K < 1 or N < 1 or M < 1:
        raise ValueError("K, N and M must be positive")
    # weight draws depend on the seed alone so every source sees the same K posterior samples
    wrng = np.random.default_rng(sub_seed(seed, 1))
    rng = np.random.default_rng(sub_seed(seed, 2, ds.source_id))
    p = {k: np.asarray(v) for k, v in params.items()}
    sd = Standardizer(shared)
    x = sd.x(ds.x)
    r = ds.r if ds.d else np.zeros((ds.n, 0), dtype=np.int64)
    u_obs = sd.u(ds.u, r)
    n = ds.n
    ynet = problem.y_net(shared)
    cate = np.empty((n, K))
    chunk = max(1, int(2_000_000 // max(1, n * N * M)))
    for a in range(0, K, chunk):
        b = min(K, a + chunk)
        k = b - a
        th = {nm: torch.as_tensor(draw_weights_np(p, nm, k, wrng)) for nm in problem.nets}
        uc = _complete_u(problem, shared, th["net_u"], x, u_obs, r, N, rng)  # (k, n, N, d)
        xu = np.concatenate([np.broadcast_to(x[None, :, None, :], (k, n, N, x.shape[1])), uc], axis=-1)
        xu = torch.as_tensor(xu.reshape(k, n * N, -1))
        with torch.no_grad():
            o0 = ynet.apply(th["net_y0"], xu).numpy().reshape(k, n, N, 2)
            o1 = ynet.apply(th["net_y1"], xu).numpy().reshape(k, n, N, 2)
        s0 = np.logaddexp(0.0, o0[..., 1]) + SD_FLOOR
        s1 = np.logaddexp(0.0, o1[..., 1]) + SD_FLOOR
        e1 = rng.standard_normal((k, n, N, M))
        e0 = e1 if common_noise else rng.standard_normal((k, n, N, M))
        y1 = o1[..., 0, None] + s1[..., None] * e1
        y0 = o0[..., 0, None] + s0[..., None] * e0
        cate[:, a:b] = ((y1 - y0).mean(axis=(2, 3)) * sd.y_scale).T
    return LocalEffects(cate.mean(axis=0), cate, n)


@dataclass
class EffectSamples:
    ate_samples: np.ndarray
    mean: float
    sd: float
    skew: float
    kurt: float
    q025: float
    q975: float
    cate: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, s, cate=None):
        s = np.asarray(s, dtype=np.float64)
        if s.size < 1:
            raise ValueError("need at least one sample")
        sd = float(s.std(ddof=1)) if s.size > 1 else 0.0
        if sd > 0:
            sk, ku = float(stats.skew(s)), float(stats.kurtosis(s))
        else:
            sk = ku = 0.0
        q = np.quantile(s, [0.025, 0.975])
        return cls(s, float(s.mean()), sd, sk, ku, float(q[0]), float(q[1]), cate or {})

    def to_dict(self):
        return {"ate_samples": [float(v) for v in self.ate_samples], "mean": self.mean, "sd": self.sd,
                "skew": self.skew, "kurt": self.kurt, "q025": self.q025, "q975": self.q975}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def write_cate_csv(path, cate):
    """Per-record posterior mean and sd of CATE from a (n, K) sample matrix."""
    cate = np.asarray(cate)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["record", "cate_mean", "cate_sd"])
        for i, row in enumerate(cate):
            wr.writerow([i, repr(float(row.mean())), repr(float(row.std(ddof=1)) if row.size > 1 else 0.0)])


def pool_effect_samples(per_source):
    """Per-draw size-weighted average of local ATE samples.

    ``per_source`` maps source id to ``(n_s, ate_samples)``; every source must
    supply the same number of draws.
    """
    if not per_source:
        raise ValueError("no sources")
    Ks = {len(v[1]) for v in per_source.values()}
    if len(Ks) != 1:
        raise ValueError(f"sources disagree on the number of draws: {sorted(Ks)}")
    sizes, ates = [], []
    for sid in sorted(per_source):
        n, ate = per_source[sid]
        if int(n) < 1:
            raise ValueError(f"source {sid} has no records")
        sizes.append(int(n))
        ates.append(np.asarray(ate, dtype=np.float64))
    draws = [size_weighted_mean([a[k] for a in ates], sizes) for k in range(ates[0].size)]
    return EffectSamples.from_samples(draws)


# ---------------------------------------------------------------------------
# plug-in imputation versus integrating over the missing confounder


@dataclass
class BiasReport:
    bias_imputation: float
    bias_distributional: float
    stderr: float
    truth: float


def _link(g):
    if g == "linear":
        return lambda v: 1.5 * v + 0.5
    if g == "softplus":
        return lambda v: np.logaddexp(0.0, 2.0 * v)
    if g == "exp":
        return np.exp
    raise ValueError(f"unknown link {g!r}")


def imputation_bias_demo(g="softplus", n_records=200, n_draws=20000, cond_sd=1.0, slope=0.5, seed=0, nodes=80):
    """Bias of ``g(E[u | context])`` versus ``E[g(u) | context]`` for an oracle Gaussian conditional.

    Each record has a context ``c ~ N(0, 1)`` and a missing confounder
    ``u | c ~ N(slope * c, cond_sd^2)``. The target is the record average of
    ``E[g(u) | c]``, computed by Gauss-Hermite quadrature. The distributional
    estimate averages ``g`` over antithetic draws, so it is exact for linear ``g``.
    """
    rng = np.random.default_rng(seed)
    f = _link(g)
    c = rng.standard_normal(n_records)
    mu = slope * c
    gh_x, gh_w = np.polynomial.hermite_e.hermegauss(nodes)
    gh_w = gh_w / gh_w.sum()
    truth_i = (f(mu[:, None] + cond_sd * gh_x[None, :]) * gh_w[None, :]).sum(axis=1)
    truth = float(truth_i.mean())
    plug = float(f(mu).mean())
    half = max(1, n_draws // 2)
    e = rng.standard_normal((n_records, half))
    pair = 0.5 * (f(mu[:, None] + cond_sd * e) + f(mu[:, None] - cond_sd * e))
    per_pair = pair.mean(axis=0)  # record-averaged estimate per antithetic pair
    est = float(per_pair.mean())
    se = float(per_pair.std(ddof=1) / math.sqrt(half)) if half > 1 else 0.0
    return BiasReport(abs(plug - truth), abs(est - truth), se, truth)


# ---------------------------------------------------------------------------
# missing-mechanism voting


def mcar_test(ds, alpha=0.05):
    """Local check of missing-completely-at-random for one source.

    For every confounder dimension with both observed and missing rows, the
    columns of ``x``, ``y`` and ``w`` are compared between the two groups with
    Welch's t-test and the Brown-Forsythe variance test. Returns ``("MCAR" |
    "MAR", min adjusted p-value)`` or ``None`` when nothing is missing.
    """
    if not ds.d:
        return None
    cols = np.column_stack([ds.x, ds.y, ds.w.astype(np.float64)])
    pvals = []
    for j in range(ds.d):
        miss = ds.r[:, j] == 0
        if miss.sum() < 2 or (~miss).sum() < 2:
            continue
        for c in cols.T:
            a, b = c[miss], c[~miss]
            if np.ptp(c) == 0:
                continue
            with warnings.catch_warnings():
                # near-constant groups (e.g. treatment within a small stratum) only produce nan p-values
                warnings.simplefilter("ignore", RuntimeWarning)
                pvals.append(stats.ttest_ind(a, b, equal_var=False).pvalue)
                pvals.append(stats.levene(a, b, center="median").pvalue)
    pvals = [p for p in pvals if np.isfinite(p)]
    if not pvals:
        return None
    p_adj = min(1.0, min(pvals) * len(pvals))
    return ("MAR" if p_adj < alpha else "MCAR"), float(p_adj)


def missing_mechanism_vote(results):
    """Majority verdict over per-source ``(verdict, p)`` pairs; ``None`` entries abstain, ties go to MAR."""
    votes = [v[0] if isinstance(v, (tuple, list)) else v for v in results if v is not None]
    votes = [v for v in votes if v is not None]
    if not votes:
        raise ValueError("no testable source")
    mcar = sum(v == "MCAR" for v in votes)
    return "MCAR" if mcar > len(votes) - mcar else "MAR"


def vote_sources(sources, local_test=mcar_test):
    return missing_mechanism_vote([local_test(ds) for ds in sources])


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class CausalFiFit:
    model: object
    surrogate: object
    effects: EffectSamples
    local: dict


def fit(datasets, cfg, evals=None, model_options=None, surrogate_options=None, K=100, N=20, M=20,
        pseudo_count=None, session=None, surrogate_cfg=None):
    """All three stages over ``{source_id: SourceDataset}``; effects are computed on ``evals`` (or train)."""
    from .federation.runtime import Session

    own = session is None
    session = session or Session.inproc(datasets, evals)
    try:
        mp = CausalFiProblem(**(model_options or {}))
        mres = session.train(mp, cfg)
        session.query(mp, "pseudo", mres.params, seed=cfg.master_seed,
                      options={"count": pseudo_count} if pseudo_count else {})
        sp = SurrogateProblem(**(surrogate_options or {}))
        sres = session.train(sp, surrogate_cfg or cfg)
        local = session.query(sp, "effect_samples", sres.params, seed=sub_seed(cfg.master_seed, 99),
                              options={"K": K, "N": N, "M": M})
    finally:
        if own:
            session.stop()
    eff = pool_effect_samples({sid: (v["n"], v["ate"]) for sid, v in local.items()})
    return CausalFiFit(mres, sres, eff, local)
