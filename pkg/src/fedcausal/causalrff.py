"""Adaptive transfer estimator under a latent confounder, built on random Fourier features.

Every structural function is linear in shared random features,
``f_c(u) = (theta_c^s + sum_{v != s} lambda[s, v] theta_c^v)^T phi(u)``, so the
objective of all sources decomposes into per-source terms. Three feature maps
are used because the inputs differ: ``z`` for the outcome, treatment and proxy
models, ``[y, x]`` for the variational posterior of ``z`` and ``x`` for the two
auxiliary models ``p(w | x)`` and ``p(y | x, w)``.

Effects are computed by forward sampling: draw ``w`` from ``p(w | x)``, ``y``
from ``p(y | x, w)``, ``z`` from the posterior ``p(z | x, y, w)`` with an
independent MH sampler whose proposal is the variational posterior, then
average ``f_y1(z) - f_y0(z)``.
"""

import base64
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import special

from . import kernels, mcmc
from .evaluation import size_weighted_mean
from .federation.params import ParameterVector
from .federation.problem import Problem, collect_grads, register, source_index, sub_seed, torch_params

torch.set_default_dtype(torch.float64)

LOG2PI = math.log(2.0 * math.pi)
LATENT_FAMILIES = ("y0", "y1", "w", "x", "q0", "q1")


def encode_map(rmap):
    return base64.b64encode(rmap.to_bytes()).decode("ascii")


def decode_map(text):
    return kernels.RffMap.from_bytes(base64.b64decode(text.encode("ascii")))


def squash(raw):
    return 1.0 / (1.0 + np.exp(-raw)) if isinstance(raw, np.ndarray) else torch.sigmoid(raw)


def logit(p):
    return math.log(p / (1.0 - p))


def combined_weight(thetas, T, s):
    """``theta^s + sum_{v != s} T[s, v] theta^v`` for per-source weights ``thetas`` (list by source index)."""
    out = thetas[s]
    for v in range(len(thetas)):
        if v != s:
            out = out + T[s, v] * thetas[v]
    return out


def transfer_predict(thetas, T, s, u, rmap):
    """Prediction of one function family for source index ``s`` at inputs ``u`` (numpy)."""
    W = combined_weight([np.asarray(t) for t in thetas], np.asarray(T), s)
    phi = rmap.features(np.atleast_2d(u))
    return phi @ W


def transfer_matrix(raw, m, learn=True):
    """Squashed transfer factors with unit diagonal; zero off-diagonal when transfer is off."""
    if not learn or raw is None:
        return torch.eye(m)
    T = torch.sigmoid(raw)
    eye = torch.eye(m)
    return T * (1 - eye) + eye


def _gauss_lp(v, mean, sd):
    return -0.5 * ((v - mean) / sd) ** 2 - torch.log(sd) - 0.5 * LOG2PI


def _bern_lp(v, logits):
    return v * torch.nn.functional.logsigmoid(logits) + (1 - v) * torch.nn.functional.logsigmoid(-logits)


def _make_rng_noise(seed, sid, M, n, dz):
    return np.random.default_rng(sub_seed(seed, sid, 11)).standard_normal((M, n, dz))


def _std_y(ds, shared):
    return (ds.y - shared["y_loc"]) / shared["y_scale"]


def _outcome_stats(state):
    y = state.train.y
    return {"n": int(len(y)), "dx": int(state.train.dx), "sum_y": float(y.sum()), "sum_y2": float((y**2).sum())}


def _pooled_loc_scale(stats):
    st = list(stats.values())
    N = sum(s["n"] for s in st)
    loc = sum(s["sum_y"] for s in st) / N
    var = sum(s["sum_y2"] for s in st) / N - loc**2
    return loc, (math.sqrt(var) if var > 1e-12 else 1.0)


class _TransferProblem(Problem):
    """Shared plumbing: per-source weight segments, a transfer-factor segment, feature maps."""

    families = ()
    transfer_name = "lambda"

    def _base_config(self, B, lengthscale, kernel, transfer, init_transfer):
        self.B = int(B)
        self.kernel = kernels.KernelSpec(kernel, float(lengthscale))
        self.transfer = bool(transfer)
        self.init_transfer = float(init_transfer)

    def _ids(self, shared):
        return shared["source_ids"]

    def _seg(self, fam, sid):
        return f"theta_{fam}_{sid}"

    def _add_transfer(self, p, m):
        if self.transfer and m > 1:
            p.add(self.transfer_name, np.full((m, m), logit(self.init_transfer)))

    def _T(self, t, m):
        return transfer_matrix(t.get(self.transfer_name), m, self.transfer and m > 1)

    def ridge(self, t, ids, fams):
        return (torch.cat([t[self._seg(f, s)].reshape(-1) for s in ids for f in fams]) ** 2).sum()

    def weights(self, t, ids, fam, s_idx, T):
        stacked = torch.stack([t[self._seg(fam, s)] for s in ids])
        return torch.tensordot(T[s_idx], stacked, dims=1)


@register
class CausalRffProblem(_TransferProblem):
    """Latent-confounder model; minimizes ``J^(s) = -ELBO^(s) + zeta/m * sum_v |theta^v|^2``.

    Parameters
    ----------
    dz : int
        Latent dimension.
    B : int
        Frequencies per feature map (features have length ``2B``).
    M : int
        Reparameterization samples per record.
    zeta : float
        Ridge factor.
    x_family : {"bernoulli", "gaussian"}
        Likelihood of every proxy dimension.
    transfer : bool
        Learn the transfer factors; ``False`` keeps sources independent.
    """

    name = "causalrff"
    maximize = False

    def __init__(self, dz=2, B=50, M=5, zeta=1.0, x_family="bernoulli", lengthscale=1.0,
                 q_lengthscale=None, kernel="gaussian", transfer=True, init_transfer=0.5,
                 sigma_z=1.0, mu_z=0.0, init_scale=0.1):
        super().__init__(dz=dz, B=B, M=M, zeta=zeta, x_family=x_family, lengthscale=lengthscale,
                         q_lengthscale=q_lengthscale, kernel=kernel, transfer=transfer,
                         init_transfer=init_transfer, sigma_z=sigma_z, mu_z=mu_z, init_scale=init_scale)
        if x_family not in ("bernoulli", "gaussian"):
            raise ValueError(f"x_family must be bernoulli or gaussian, got {x_family!r}")
        self._base_config(B, lengthscale, kernel, transfer, init_transfer)
        self.dz = int(dz)
        self.M = int(M)
        self.zeta = float(zeta)
        self.x_family = x_family
        self.q_lengthscale = q_lengthscale
        self.sigma_z = float(sigma_z)
        self.mu_z = float(mu_z)
        self.init_scale = float(init_scale)

    def local_stats(self, state):
        return _outcome_stats(state)

    def build_shared(self, stats, seed):
        loc, scale = _pooled_loc_scale(stats)
        dx = next(iter(stats.values()))["dx"]
        qell = self.q_lengthscale or math.sqrt(1 + dx)
        qspec = kernels.KernelSpec(self.kernel.family, qell)
        return {
            "source_ids": sorted(int(k) for k in stats),
            "dx": dx,
            "y_loc": loc,
            "y_scale": scale,
            "n": {str(k): v["n"] for k, v in stats.items()},
            "phi_z": encode_map(kernels.spectral_sample(self.kernel, self.dz, self.B, sub_seed(seed, 1))),
            "phi_q": encode_map(kernels.spectral_sample(qspec, 1 + dx, self.B, sub_seed(seed, 2))),
        }

    def init_params(self, shared, seed):
        rng = np.random.default_rng(sub_seed(seed, 3))
        ids, dx, F = shared["source_ids"], shared["dx"], 2 * self.B
        p = ParameterVector()
        shapes = {"y0": (F,), "y1": (F,), "w": (F,), "x": (F, dx), "q0": (F, self.dz), "q1": (F, self.dz)}
        for s in ids:
            for fam in LATENT_FAMILIES:
                p.add(self._seg(fam, s), self.init_scale * rng.standard_normal(shapes[fam]), part=f"source:{s}")
        self._add_transfer(p, len(ids))
        p.add("log_sigma_y", np.array([0.0]))
        if self.x_family == "gaussian":
            p.add("log_sigma_x", np.array([0.0]))
        p.add("log_sigma_q", np.array([math.log(0.5)]))
        return p

    def maps(self, shared):
        return decode_map(shared["phi_z"]), decode_map(shared["phi_q"])

    def elbo_terms(self, t, shared, ds, sid, round_seed, maps=None):
        """Per-record reconstruction and KL terms of one source, as torch tensors."""
        ids = shared["source_ids"]
        m = len(ids)
        s_idx = source_index(shared, sid)
        phi_z, phi_q = maps or self.maps(shared)
        T = self._T(t, m)
        W = {fam: self.weights(t, ids, fam, s_idx, T) for fam in LATENT_FAMILIES}
        n = ds.n
        y = torch.tensor(_std_y(ds, shared))
        w = torch.tensor(ds.w.astype(np.float64))
        x = torch.tensor(ds.x)
        Phi_q = phi_q.features_torch(torch.cat([y.unsqueeze(1), x], dim=1))
        fq = (1 - w).unsqueeze(1) * (Phi_q @ W["q0"]) + w.unsqueeze(1) * (Phi_q @ W["q1"])
        sq = torch.exp(t["log_sigma_q"][0])
        eps = torch.tensor(_make_rng_noise(round_seed, sid, self.M, n, self.dz))
        z = fq.unsqueeze(0) + sq * eps  # (M, n, dz)
        Phi_z = phi_z.features_torch(z.reshape(-1, self.dz))
        fy = ((1 - w).repeat(self.M) * (Phi_z @ W["y0"]) + w.repeat(self.M) * (Phi_z @ W["y1"]))
        lp = _gauss_lp(y.repeat(self.M), fy, torch.exp(t["log_sigma_y"][0]))
        lp = lp + _bern_lp(w.repeat(self.M), Phi_z @ W["w"])
        fx = Phi_z @ W["x"]
        xr = x.repeat(self.M, 1)
        if self.x_family == "bernoulli":
            lp = lp + _bern_lp(xr, fx).sum(dim=1)
        else:
            lp = lp + _gauss_lp(xr, fx, torch.exp(t["log_sigma_x"][0])).sum(dim=1)
        recon = lp.reshape(self.M, n).mean(dim=0)
        if not torch.all(torch.isfinite(recon)):
            bad = int(torch.nonzero(~torch.isfinite(recon))[0, 0])
            raise FloatingPointError(f"non-finite likelihood at record {bad} of source {sid}")
        vz = self.sigma_z**2
        kl = 0.5 * ((sq**2 + (fq - self.mu_z) ** 2) / vz - 1.0 - torch.log(sq**2 / vz)).sum(dim=1)
        return recon, kl

    def elbo_hat(self, t, shared, ds, sid, round_seed, maps=None):
        recon, kl = self.elbo_terms(t, shared, ds, sid, round_seed, maps)
        return (recon - kl).sum()

    def source_objective(self, t, shared, ds, sid, round_seed, maps=None):
        ids = shared["source_ids"]
        reg = self.zeta / len(ids) * self.ridge(t, ids, LATENT_FAMILIES)
        return -self.elbo_hat(t, shared, ds, sid, round_seed, maps) + reg

    def local_objective(self, params, state, shared, round_seed):
        t = torch_params(params)
        J = self.source_objective(t, shared, state.train, state.source_id, round_seed)
        return collect_grads(J, t, params)

    def pooled_objective(self, params, states, shared, round_seed):
        t = torch_params(params)
        maps = self.maps(shared)
        J = sum(self.source_objective(t, shared, states[s].train, s, round_seed, maps) for s in sorted(states))
        return collect_grads(J, t, params)


@register
class AuxTreatmentProblem(_TransferProblem):
    """``p(w | x)``: logistic cross-entropy with transfer factors ``gamma``."""

    name = "aux_w"
    maximize = False
    transfer_name = "gamma"

    def __init__(self, B=50, zeta=1.0, lengthscale=None, kernel="gaussian", transfer=True, init_transfer=0.5):
        super().__init__(B=B, zeta=zeta, lengthscale=lengthscale, kernel=kernel, transfer=transfer,
                         init_transfer=init_transfer)
        self._base_config(B, lengthscale or 1.0, kernel, transfer, init_transfer)
        self.lengthscale = lengthscale
        self.zeta = float(zeta)

    def local_stats(self, state):
        return _outcome_stats(state)

    def build_shared(self, stats, seed):
        loc, scale = _pooled_loc_scale(stats)
        dx = next(iter(stats.values()))["dx"]
        spec = kernels.KernelSpec(self.kernel.family, self.lengthscale or math.sqrt(dx))
        return {
            "source_ids": sorted(int(k) for k in stats),
            "dx": dx,
            "y_loc": loc,
            "y_scale": scale,
            "n": {str(k): v["n"] for k, v in stats.items()},
            "phi_x": encode_map(kernels.spectral_sample(spec, dx, self.B, sub_seed(seed, 4))),
        }

    fams = ("psi",)

    def init_params(self, shared, seed):
        p = ParameterVector()
        for s in shared["source_ids"]:
            for fam in self.fams:
                p.add(self._seg(fam, s), np.zeros(2 * self.B), part=f"source:{s}")
        self._add_transfer(p, len(shared["source_ids"]))
        return p

    def predictor(self, t, shared, sid, x, phi=None):
        ids = shared["source_ids"]
        phi = phi or decode_map(shared["phi_x"])
        T = self._T(t, len(ids))
        Phi = phi.features_torch(torch.tensor(x))
        return {fam: Phi @ self.weights(t, ids, fam, source_index(shared, sid), T) for fam in self.fams}

    def data_term(self, t, shared, ds, sid, phi=None):
        g = self.predictor(t, shared, sid, ds.x, phi)["psi"]
        w = torch.tensor(ds.w.astype(np.float64))
        return -_bern_lp(w, g).sum()

    def source_objective(self, t, shared, ds, sid, phi=None):
        ids = shared["source_ids"]
        return self.data_term(t, shared, ds, sid, phi) + self.zeta / len(ids) * self.ridge(t, ids, self.fams)

    def local_objective(self, params, state, shared, round_seed):
        t = torch_params(params)
        return collect_grads(self.source_objective(t, shared, state.train, state.source_id), t, params)

    def pooled_objective(self, params, states, shared, round_seed):
        t = torch_params(params)
        phi = decode_map(shared["phi_x"])
        J = sum(self.source_objective(t, shared, states[s].train, s, phi) for s in sorted(states))
        return collect_grads(J, t, params)


@register
class AuxOutcomeProblem(AuxTreatmentProblem):
    """``p(y | x, w)``: squared error (Gaussian NLL at fixed ``sigma``) with arm-switched weights and factors ``eta``."""

    name = "aux_y"
    transfer_name = "eta"
    fams = ("beta0", "beta1")

    def __init__(self, B=50, zeta=1.0, lengthscale=None, kernel="gaussian", transfer=True, init_transfer=0.5,
                 sigma=1.0):
        super().__init__(B, zeta, lengthscale, kernel, transfer, init_transfer)
        self.config["sigma"] = sigma
        self.sigma = float(sigma)

    def data_term(self, t, shared, ds, sid, phi=None):
        f = self.predictor(t, shared, sid, ds.x, phi)
        w = torch.tensor(ds.w.astype(np.float64))
        y = torch.tensor(_std_y(ds, shared))
        pred = (1 - w) * f["beta0"] + w * f["beta1"]
        return (0.5 * ((y - pred) / self.sigma) ** 2).sum()

    def query(self, kind, params, state, shared, seed, options):
        if kind == "residuals":
            t = {k: torch.tensor(v) for k, v in params.items()}
            with torch.no_grad():
                f = self.predictor(t, shared, state.source_id, state.train.x)
                w = state.train.w
                pred = np.where(w == 1, f["beta1"].numpy(), f["beta0"].numpy())
            r = _std_y(state.train, shared) - pred
            return {"n": int(len(r)), "sse": float(r @ r)}
        return super().query(kind, params, state, shared, seed, options)


# ---------------------------------------------------------------------------
# sampling-side models (numpy)


def _np_params(params):
    return {k: np.asarray(v) for k, v in params.items()}


def _np_T(p, name, m, learn):
    if not learn or name not in p or m == 1:
        return np.eye(m)
    T = squash(p[name])
    return T * (1 - np.eye(m)) + np.eye(m)


def _log_sig(v):
    return -np.logaddexp(0.0, -v)


class LatentModel:
    """Trained latent-confounder model of one source in numpy form.

    Provides the variational proposal and the unnormalized posterior target
    used by the MH sampler, plus ``f_y`` in original outcome units.
    """

    def __init__(self, problem, params, shared, sid):
        p = _np_params(params)
        ids = shared["source_ids"]
        s_idx = source_index(shared, sid)
        T = _np_T(p, problem.transfer_name, len(ids), problem.transfer)
        self.W = {
            fam: combined_weight([p[problem._seg(fam, s)] for s in ids], T, s_idx) for fam in LATENT_FAMILIES
        }
        self.phi_z, self.phi_q = problem.maps(shared)
        self.sigma_y = float(np.exp(p["log_sigma_y"][0]))
        self.sigma_q = float(np.exp(p["log_sigma_q"][0]))
        self.sigma_x = float(np.exp(p["log_sigma_x"][0])) if "log_sigma_x" in p else None
        self.x_family = problem.x_family
        self.dz = problem.dz
        self.mu_z, self.sigma_z = problem.mu_z, problem.sigma_z
        self.loc, self.scale = shared["y_loc"], shared["y_scale"]

    def q_mean(self, x, y, w):
        """Variational mean for rows ``(x, y, w)``; ``y`` in original units."""
        x = np.atleast_2d(x)
        ys = (np.atleast_1d(y) - self.loc) / self.scale
        Phi = self.phi_q.features(np.column_stack([ys, np.broadcast_to(x, (len(ys), x.shape[1]))]))
        w = np.atleast_1d(w)[:, None]
        return (1 - w) * (Phi @ self.W["q0"]) + w * (Phi @ self.W["q1"])

    def log_proposal(self, z, mean):
        return (-0.5 * ((z - mean) / self.sigma_q) ** 2 - math.log(self.sigma_q) - 0.5 * LOG2PI).sum(axis=-1)

    def log_target(self, z, x, y, w):
        """``log p(y | z, w) + log p(w | z) + log p(x | z) + log p(z)`` for stacked ``z`` (..., dz)."""
        shp = z.shape[:-1]
        Phi = self.phi_z.features(z.reshape(-1, self.dz))
        ys = ((np.asarray(y) - self.loc) / self.scale)
        w = np.asarray(w, dtype=np.float64)
        wf = np.broadcast_to(w, shp).reshape(-1)
        fy = (1 - wf) * (Phi @ self.W["y0"]) + wf * (Phi @ self.W["y1"])
        yb = np.broadcast_to(ys, shp).reshape(-1)
        lp = -0.5 * ((yb - fy) / self.sigma_y) ** 2 - math.log(self.sigma_y) - 0.5 * LOG2PI
        fw = Phi @ self.W["w"]
        lp += wf * _log_sig(fw) + (1 - wf) * _log_sig(-fw)
        fx = Phi @ self.W["x"]
        x = np.asarray(x, dtype=np.float64)
        xb = np.broadcast_to(x, shp + (x.shape[-1],)).reshape(-1, x.shape[-1])
        if self.x_family == "bernoulli":
            lp += (xb * _log_sig(fx) + (1 - xb) * _log_sig(-fx)).sum(axis=1)
        else:
            lp += (-0.5 * ((xb - fx) / self.sigma_x) ** 2 - math.log(self.sigma_x) - 0.5 * LOG2PI).sum(axis=1)
        lp += (-0.5 * ((z.reshape(-1, self.dz) - self.mu_z) / self.sigma_z) ** 2
               - math.log(self.sigma_z) - 0.5 * LOG2PI).sum(axis=1)
        return lp.reshape(shp)

    def outcome_mean(self, z, w):
        shp = z.shape[:-1]
        Phi = self.phi_z.features(z.reshape(-1, self.dz))
        f = Phi @ (self.W["y1"] if w == 1 else self.W["y0"])
        return (f * self.scale + self.loc).reshape(shp)

    def posterior_chains(self, x, y, w, steps, rng, mode="mh"):
        """Final states of ``len(y)`` independent chains, one per ``(y, w)`` pair, each ``steps`` long."""
        mean = self.q_mean(x, y, w)  # (N, dz)
        N = mean.shape[0]
        z = mean[:, None, :] + self.sigma_q * rng.standard_normal((N, steps, self.dz))
        if mode == "variational" or steps == 1:
            return z[:, -1, :], 1.0
        lw = self.log_target(z, np.asarray(x)[None, None, :], np.asarray(y)[:, None], np.asarray(w)[:, None])
        lw = lw - self.log_proposal(z, mean[:, None, :])
        log_u = np.log(rng.uniform(size=(N, steps)))
        idx, rate = mcmc.final_states(lw, log_u)
        return z[np.arange(N), idx], rate


class AuxModel:
    """Trained ``p(w | x)`` and ``p(y | x, w)`` of one source."""

    def __init__(self, w_problem, w_params, w_shared, y_problem, y_params, y_shared, sid, residual_sd=1.0):
        pw, py = _np_params(w_params), _np_params(y_params)
        ids = w_shared["source_ids"]
        si = source_index(w_shared, sid)
        Tg = _np_T(pw, w_problem.transfer_name, len(ids), w_problem.transfer)
        Te = _np_T(py, y_problem.transfer_name, len(ids), y_problem.transfer)
        self.psi = combined_weight([pw[w_problem._seg("psi", s)] for s in ids], Tg, si)
        self.beta = [combined_weight([py[y_problem._seg(f, s)] for s in ids], Te, si) for f in ("beta0", "beta1")]
        self.phi_w = decode_map(w_shared["phi_x"])
        self.phi_y = decode_map(y_shared["phi_x"])
        self.loc, self.scale = y_shared["y_loc"], y_shared["y_scale"]
        self.residual_sd = float(residual_sd)

    def prob_w(self, x):
        return special.expit(self.phi_w.features(np.atleast_2d(x)) @ self.psi)

    def mean_y(self, x, w):
        Phi = self.phi_y.features(np.atleast_2d(x))
        f = np.where(np.asarray(w) == 1, Phi @ self.beta[1], Phi @ self.beta[0])
        return f * self.scale + self.loc

    def sample_w(self, x, size, rng):
        return (rng.uniform(size=size) < self.prob_w(x)[0]).astype(np.int64)

    def sample_y(self, x, w, rng):
        mu = self.mean_y(np.broadcast_to(np.atleast_2d(x), (len(w), np.atleast_2d(x).shape[1])), w)
        return mu + self.residual_sd * self.scale * rng.standard_normal(len(w))


@dataclass
class CateEstimate:
    value: float
    stderr: float
    accept_rate: float
    draws: np.ndarray = None


def _forward_draws(latent, aux, x, N, burn_in, rng, mode):
    w = aux.sample_w(x, N, rng)
    y = aux.sample_y(x, w, rng)
    z, rate = latent.posterior_chains(x, y, w, burn_in + 1, rng, mode)
    return latent.outcome_mean(z[:, None, :], 1)[:, 0] - latent.outcome_mean(z[:, None, :], 0)[:, 0], rate


def estimate_cate(latent, aux, x, N=200, burn_in=100, seed=None, mode="mh"):
    """``E[y | do(w=1), x] - E[y | do(w=0), x]`` by forward sampling.

    Each of the ``N`` draws samples ``w`` and ``y`` from the auxiliary models and
    then ``z`` as the final state of an MH chain of length ``burn_in + 1``
    targeting ``p(z | x, y, w)``; ``mode="variational"`` uses plain proposal draws.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    diff, rate = _forward_draws(latent, aux, x, N, burn_in, rng, mode)
    return CateEstimate(float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(N)) if N > 1 else float("nan"),
                        rate, diff)


def estimate_local(latent, aux, X, N=200, burn_in=100, seed=0, mode="mh"):
    """CATE for every row of ``X`` (sub-seeded by row index) and the local ATE."""
    cates = np.empty(len(X))
    for i, x in enumerate(np.asarray(X)):
        cates[i] = estimate_cate(latent, aux, x, N, burn_in, sub_seed(seed, i), mode).value
    return cates, float(cates.mean())


def mh_independent_sample(latent, x, y, w, N=200, burn_in=100, seed=None, mode="mh"):
    """Posterior draws of ``z`` for one record; ``mode="variational"`` returns proposal draws."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mean = latent.q_mean(x, y, w)[0]

    def propose(k, r):
        return mean + latent.sigma_q * r.standard_normal((k, latent.dz))

    if mode == "variational":
        return mcmc.MhResult(propose(N, rng), 1.0, np.zeros(N))
    return mcmc.independent_mh(
        lambda z: latent.log_target(z, np.asarray(x)[None, :], y, w),
        propose,
        lambda z: latent.log_proposal(z, mean),
        N, burn_in, rng,
    )


class OracleCategoricalModel:
    """Exact components of the categorical-confounder benchmark, in the sampler interface.

    ``z`` is carried as a one-element float vector holding the level index. The
    proposal is the latent prior ``rho``; the target is the exact unnormalized
    posterior. Built from the generator's coefficient dictionary.
    """

    dz = 1

    def __init__(self, coef, delta=0.0):
        from . import datagen

        self.rho = np.asarray(coef["rho"])
        self.px = datagen.causalrff_proxy_prob(coef)
        self.pw = datagen.causalrff_treat_prob(coef, delta)
        self.m0, self.m1 = datagen.causalrff_arm_means(coef, delta)
        self.sd = (coef["sigma0"], coef["sigma1"])

    def _post_x(self, x):
        lp = np.log(self.rho) + x @ np.log(self.px) + (1 - x) @ np.log1p(-self.px)
        return special.softmax(lp)

    # auxiliary side
    def sample_w(self, x, size, rng):
        p = self._post_x(x) @ self.pw
        return (rng.uniform(size=size) < p).astype(np.int64)

    def sample_y(self, x, w, rng):
        post = self._post_x(x)
        out = np.empty(len(w))
        for i, wi in enumerate(w):
            pz = post * (self.pw if wi == 1 else 1 - self.pw)
            k = rng.choice(len(pz), p=pz / pz.sum())
            mu = self.m1[k] if wi == 1 else self.m0[k]
            out[i] = mu + self.sd[wi] * rng.standard_normal()
        return out

    # latent side
    def log_target(self, z, x, y, w):
        k = z[..., 0].astype(np.int64)
        w = np.broadcast_to(w, k.shape)
        y = np.broadcast_to(y, k.shape)
        mu = np.where(w == 1, self.m1[k], self.m0[k])
        sd = np.where(w == 1, self.sd[1], self.sd[0])
        lp = -0.5 * ((y - mu) / sd) ** 2 - np.log(sd)
        lp = lp + np.where(w == 1, np.log(self.pw[k]), np.log1p(-self.pw[k]))
        x = np.asarray(x).reshape(-1)
        lx = x @ np.log(self.px) + (1 - x) @ np.log1p(-self.px)
        return lp + lx[k] + np.log(self.rho[k])

    def log_proposal(self, z, mean=None):
        return np.log(self.rho[z[..., 0].astype(np.int64)])

    def posterior_chains(self, x, y, w, steps, rng, mode="mh"):
        N = len(y)
        z = rng.choice(len(self.rho), size=(N, steps), p=self.rho)[..., None].astype(np.float64)
        if mode == "variational" or steps == 1:
            return z[:, -1, :], 1.0
        lw = self.log_target(z, x, np.asarray(y)[:, None], np.asarray(w)[:, None]) - self.log_proposal(z)
        idx, rate = mcmc.final_states(lw, np.log(rng.uniform(size=(N, steps))))
        return z[np.arange(N), idx], rate

    def outcome_mean(self, z, w):
        k = z[..., 0].astype(np.int64)
        return self.m1[k] if w == 1 else self.m0[k]


# ---------------------------------------------------------------------------
# aggregation and diagnostics


def estimate_global_ate(local):
    """Size-weighted average of ``(ate_s, n_s)`` pairs."""
    local = list(local)
    if not local:
        raise ValueError("no local estimates")
    if any(int(n) < 1 for _, n in local):
        raise ValueError("source sizes must be positive")
    return size_weighted_mean([a for a, _ in local], [n for _, n in local])


def minimax_bounds(n, B, dx, lambda_sums=None, gamma_sums=None, eta_sums=None, sigma=1.0):
    """Closed-form minimax lower bounds ``(latent-model, treatment-model, outcome-model)``.

    ``*_sums[s]`` is the sum of source ``s``'s transfer factors to the other sources.
    """
    n = np.asarray(n, dtype=np.float64)
    m = len(n)
    if m < 1 or B < 1 or np.any(n < 1):
        raise ValueError("need m >= 1, B >= 1 and n_s >= 1")
    zeros = np.zeros(m)
    lam = np.asarray(lambda_sums if lambda_sums is not None else zeros, dtype=np.float64)
    gam = np.asarray(gamma_sums if gamma_sums is not None else zeros, dtype=np.float64)
    eta = np.asarray(eta_sums if eta_sums is not None else zeros, dtype=np.float64)
    log_term = math.log(2.0 * math.sqrt(m))
    latent = math.sqrt(m * (dx + 3)) * log_term / (64.0 * math.sqrt(B) * float(np.sum(n * (1 + lam) ** 2)))
    treat = m * log_term / (256.0 * float(np.sum(n * (1 + gam))))
    outcome = sigma / 2.0**4.5 * math.sqrt(m * log_term / (B * float(np.sum(n * (1 + eta) ** 2))))
    return latent, treat, outcome


# ---------------------------------------------------------------------------
# end-to-end fitting


@dataclass
class RffFit:
    """Trained latent model plus both auxiliary models, with per-source residual scales."""

    latent_problem: CausalRffProblem
    latent: object
    w_problem: AuxTreatmentProblem
    w: object
    y_problem: AuxOutcomeProblem
    y: object
    residual_sd: dict

    def models(self, sid):
        lat = LatentModel(self.latent_problem, self.latent.params, self.latent.shared, sid)
        aux = AuxModel(self.w_problem, self.w.params, self.w.shared, self.y_problem, self.y.params,
                       self.y.shared, sid, self.residual_sd[int(sid)])
        return lat, aux

    def transfer_factors(self):
        out = {}
        for prob, res in ((self.latent_problem, self.latent), (self.w_problem, self.w), (self.y_problem, self.y)):
            m = len(res.shared["source_ids"])
            p = _np_params(res.params)
            out[prob.transfer_name] = _np_T(p, prob.transfer_name, m, prob.transfer)
        return out


def fit(datasets, cfg, transfer=True, latent_options=None, aux_options=None, session=None):
    """Train the latent model and both auxiliary models over ``{source_id: SourceDataset}``."""
    from .federation.runtime import Session

    own = session is None
    session = session or Session.inproc(datasets)
    try:
        lp = CausalRffProblem(transfer=transfer, **(latent_options or {}))
        wp = AuxTreatmentProblem(transfer=transfer, **(aux_options or {}))
        yp = AuxOutcomeProblem(transfer=transfer, **(aux_options or {}))
        lres = session.train(lp, cfg)
        wres = session.train(wp, cfg)
        yres = session.train(yp, cfg)
        resid = session.query(yp, "residuals", yres.params)
    finally:
        if own:
            session.stop()
    sd = {int(s): math.sqrt(v["sse"] / max(v["n"], 1)) for s, v in resid.items()}
    return RffFit(lp, lres, wp, wres, yp, yres, sd)


def predict_cate(fitted, sid, X, N=200, burn_in=100, seed=0, mode="mh"):
    """CATE at every row of ``X`` for source ``sid``."""
    lat, aux = fitted.models(sid)
    return estimate_local(lat, aux, X, N, burn_in, seed, mode)[0]


def write_cate_csv(path, cates, ids=None):
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["record", "cate"])
        for i, c in enumerate(cates):
            wr.writerow([i if ids is None else ids[i], repr(float(c))])
