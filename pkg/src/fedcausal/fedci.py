"""Federated Gaussian-process estimator of individual and average treatment effects.

The two potential outcomes of a source are modelled jointly as a 2-output GP

    [y(0); y(1)] ~ N(mean, Psi (x) K + Sigma (x) I)

with Wishart variational posteriors on the output covariance ``Psi`` and the
noise covariance ``Sigma``, and an optional inter-source latent ``g`` that
shifts each source's mean according to its four-moment summary. The ELBO is a
sum of per-source terms, each computed from that source's records plus the
broadcast summaries of all sources, so training runs on the federated runtime.

Outcomes are standardized with a global location/scale computed from pooled
sufficient statistics; predictions are mapped back to the original units.
"""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import special

from . import dataset, kernels
from .federation.params import ParameterVector
from .federation.problem import Problem, collect_grads, register, source_index, sub_seed, torch_params

torch.set_default_dtype(torch.float64)

# Wishart priors on Psi and Sigma (scale matrix, degrees of freedom); E = dof * scale = I
PRIOR_SCALE = np.eye(2) / 3.0
PRIOR_DOF = 3.0
NOISE_CORR = 0.0  # cross-outcome noise correlation, fixed
U_CLIP = 1e-12


class Chi2Icdf(torch.autograd.Function):
    """``x = F^{-1}(u; dof)`` for a chi-square with differentiable degrees of freedom.

    The gradient in ``dof`` is implicit: ``dx/dk = -(dP/da) / pdf`` with
    ``a = k/2`` and ``P`` the regularized lower incomplete gamma function.
    ``dP/da`` has no closed form in scipy and is taken by a central difference.
    """

    @staticmethod
    def forward(ctx, dof, u):
        k = dof.detach().numpy()
        un = np.clip(u.detach().numpy(), U_CLIP, 1.0 - U_CLIP)
        a = k / 2.0
        t = special.gammaincinv(a, un)
        ctx.save_for_backward(dof)
        ctx.a, ctx.t = a, t
        return torch.as_tensor(2.0 * t)

    @staticmethod
    def backward(ctx, grad):
        a, t = ctx.a, ctx.t
        h = 1e-5 * np.maximum(1.0, a)
        dp_da = (special.gammainc(a + h, t) - special.gammainc(a - h, t)) / (2.0 * h)
        log_pdf = (a - 1.0) * np.log(t) - t - special.gammaln(a)
        dt_da = -dp_da / np.exp(log_pdf)
        # x = 2t, a = k/2  =>  dx/dk = dt/da
        return grad * torch.as_tensor(dt_da), None


def chi2_icdf(dof, u):
    return Chi2Icdf.apply(dof, torch.as_tensor(u))


def chol_2x2(a11, a12, a22):
    l11 = torch.sqrt(a11)
    l21 = a12 / l11
    l22 = torch.sqrt(torch.clamp(a22 - l21 * l21, min=1e-300))
    z = torch.zeros_like(l11)
    return torch.stack([torch.stack([l11, z]), torch.stack([l21, l22])])


def wishart_sample(scale_chol, dof, u, normal):
    """Bartlett draw ``L zeta L^T`` with ``zeta = A A^T``; ``u`` holds the two chi-square uniforms."""
    c1 = chi2_icdf(dof, u[0])
    c2 = chi2_icdf(dof - 1.0, u[1])
    sc1 = torch.sqrt(c1)
    zeta = torch.stack([
        torch.stack([c1, sc1 * normal]),
        torch.stack([sc1 * normal, normal * normal + c2]),
    ])
    return scale_chol @ zeta @ scale_chol.T


def _lmvgamma2(a):
    return 0.5 * math.log(math.pi) + torch.lgamma(a) + torch.lgamma(a - 0.5)


def _mvdigamma2(a):
    return torch.digamma(a) + torch.digamma(a - 0.5)


def wishart_kl(vq, dq, v0, d0):
    """KL[W(vq, dq) || W(v0, d0)] for 2x2 scale matrices."""
    v0 = torch.as_tensor(v0)
    d0 = torch.as_tensor(float(d0))
    p = 2.0
    return (
        0.5 * d0 * (torch.logdet(v0) - torch.logdet(vq))
        + 0.5 * dq * (torch.trace(torch.linalg.solve(v0, vq)) - p)
        + _lmvgamma2(0.5 * d0)
        - _lmvgamma2(0.5 * dq)
        + 0.5 * (dq - d0) * _mvdigamma2(0.5 * dq)
    )


def gaussian_kl(m_q, c_q, m_p, c_p):
    """KL[N(m_q, c_q) || N(m_p, c_p)] for full covariances."""
    k = m_q.shape[0]
    lp = torch.linalg.cholesky(c_p)
    lq = torch.linalg.cholesky(c_q)
    diff = (m_q - m_p).unsqueeze(1)
    a = torch.cholesky_solve(c_q, lp)
    b = torch.cholesky_solve(diff, lp)
    logdet = 2.0 * (torch.log(torch.diagonal(lp)).sum() - torch.log(torch.diagonal(lq)).sum())
    return 0.5 * (torch.trace(a) + (diff * b).sum() - k + logdet)


def gram_t(a, b, ell, amp=1.0):
    sq = torch.cdist(a / ell, b / ell).pow(2) if a.shape[1] else torch.zeros(a.shape[0], b.shape[0])
    return amp * torch.exp(-0.5 * sq)


def gaussian_logpdf(y, mean, cov):
    n = y.shape[0]
    L = kernels.cholesky_torch(cov)
    alpha = torch.linalg.solve_triangular(L, (y - mean).unsqueeze(1), upper=False)
    return -0.5 * (alpha * alpha).sum() - torch.log(torch.diagonal(L)).sum() - 0.5 * n * math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# covariance construction


def joint_covariance(psi, sigma, K):
    """``Psi (x) K + Sigma (x) I`` over the stacked ``[y(0); y(1)]`` of one source."""
    psi = np.asarray(psi, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    for name, a in (("Psi", psi), ("Sigma", sigma)):
        if a.shape != (2, 2) or not np.allclose(a, a.T) or np.linalg.eigvalsh(a).min() < -1e-10:
            raise ValueError(f"{name} must be a symmetric PSD 2x2 matrix")
    return kernels.kronecker(psi, K) + kernels.kronecker(sigma, np.eye(K.shape[0]))


def _pair(P, a, b):
    return P[a][:, b]


def obs_mis_blocks(w, K, psi, sigma, m0=None, m1=None):
    """Observed/missing blocks of the joint covariance (and means) for treatment vector ``w``.

    Works on numpy arrays or torch tensors. Entry conventions, with ``k`` the
    within-source kernel and ``o = 1 - w``::

        K_obs[i, j] = Psi[w_i, w_j] k_ij + Sigma[w_i, w_i] 1{i=j}
        K_mis[i, j] = Psi[o_i, o_j] k_ij + Sigma[o_i, o_i] 1{i=j}
        K_om[i, j]  = Psi[w_i, o_j] k_ij + Sigma[w_i, o_i] 1{i=j}
    """
    is_t = isinstance(K, torch.Tensor)
    w = np.asarray(w, dtype=np.int64)
    o = 1 - w
    if is_t:
        wi, oi = torch.tensor(w), torch.tensor(o)
        eye = torch.eye(len(w))
        diag = torch.diag
    else:
        wi, oi = w, o
        psi = np.asarray(psi)
        sigma = np.asarray(sigma)
        eye = np.eye(len(w))
        diag = np.diag
    out = {
        "K_obs": _pair(psi, wi, wi) * K + diag(sigma[wi, wi]) * eye,
        "K_mis": _pair(psi, oi, oi) * K + diag(sigma[oi, oi]) * eye,
        "K_om": _pair(psi, wi, oi) * K + diag(sigma[wi, oi]) * eye,
    }
    if m0 is not None:
        wf = wi.to(K.dtype) if is_t else w.astype(np.float64)
        out["mu_obs"] = (1 - wf) * m0 + wf * m1
        out["mu_mis"] = wf * m0 + (1 - wf) * m1
    return out


def obs_mis_permutation(w):
    """Row order of the joint ``[y(0); y(1)]`` vector that yields ``[y_obs; y_mis]``."""
    w = np.asarray(w, dtype=np.int64)
    n = len(w)
    idx = np.arange(n)
    return np.concatenate([w * n + idx, (1 - w) * n + idx])


# ---------------------------------------------------------------------------
# model


def _affine(v, coef):
    return v @ coef[:-1] + coef[-1]


def source_summary(mom, loc, scale):
    """Moment vectors of one source in standardized outcome units.

    Returns ``(x_tilde, u)`` with ``u = [y0 moments, y1 moments, x moments, w moments]``.
    """
    def std_y(t):
        t = np.asarray(t, dtype=np.float64)
        return np.array([(t[0] - loc) / scale, t[1] / scale**2, t[2], t[3]])

    xt = np.asarray(mom["x_tilde"], dtype=np.float64)
    u = np.concatenate([std_y(mom["y0_tilde"]), std_y(mom["y1_tilde"]), xt, np.asarray(mom["w_tilde"])])
    return xt, u


@dataclass
class Noise:
    """Exogenous draws shared by every source in one round."""

    psi_u: np.ndarray  # (S, 2)
    psi_n: np.ndarray  # (S,)
    sig_u: np.ndarray
    sig_n: np.ndarray
    xi: np.ndarray  # (S, 2, m)


def draw_noise(seed, n_mc, m):
    rng = np.random.default_rng(seed)
    return Noise(
        psi_u=rng.uniform(size=(n_mc, 2)),
        psi_n=rng.standard_normal(n_mc),
        sig_u=rng.uniform(size=(n_mc, 2)),
        sig_n=rng.standard_normal(n_mc),
        xi=rng.standard_normal((n_mc, 2, m)),
    )


class FedCiModel:
    """Parameter layout and the differentiable pieces of the ELBO.

    Parameters
    ----------
    dx : int
        Covariate dimension.
    m : int
        Number of sources.
    use_inter_dependency : bool
        Include the inter-source latent ``g`` and its KL term.
    nugget : float
        Diagonal added to the between-source kernels ``M`` and ``U``.
    """

    def __init__(self, dx, m, use_inter_dependency=True, nugget=1e-4, lengthscale=None):
        self.dx = int(dx)
        self.m = int(m)
        self.inter = bool(use_inter_dependency)
        self.nugget = float(nugget)
        self.lengthscale = lengthscale

    @property
    def du(self):
        return 12 + 4 * self.dx

    def init_params(self):
        p = ParameterVector()
        p.add("mu0", np.zeros(self.dx + 1))
        p.add("mu1", np.zeros(self.dx + 1))
        ell = self.lengthscale or math.sqrt(max(self.dx, 1))
        p.add("log_ell_k", np.array([math.log(ell)]))
        if self.inter:
            p.add("r0", np.zeros(4 * self.dx + 1))
            p.add("r1", np.zeros(4 * self.dx + 1))
            p.add("h0", np.zeros(self.du + 1))
            p.add("h1", np.zeros(self.du + 1))
            p.add("log_amp_m", np.array([0.0]))
            p.add("log_ell_m", np.array([math.log(math.sqrt(4 * self.dx))]))
            p.add("log_amp_u", np.array([math.log(0.1)]))
            p.add("log_ell_u", np.array([math.log(math.sqrt(self.du))]))
        # Psi ~ W(V_q, d_q), V_q from (nu1, nu2, rho); Sigma ~ W(S_q, n_q), S_q diagonal
        p.add("psi_log_nu", np.full(2, math.log(math.sqrt(PRIOR_SCALE[0, 0]))))
        p.add("psi_rho", np.array([0.0]))
        p.add("psi_dof", np.array([0.0]))
        p.add("sig_log_delta", np.full(2, math.log(math.sqrt(0.1))))
        p.add("sig_dof", np.array([0.0]))
        return p

    # -- variational parameters

    def wishart_params(self, t):
        nu = torch.exp(t["psi_log_nu"])
        rho = torch.sigmoid(t["psi_rho"][0])
        vq_chol = torch.stack([
            torch.stack([nu[0], torch.zeros_like(nu[0])]),
            torch.stack([rho * nu[1], nu[1] * torch.sqrt(1 - rho * rho)]),
        ])
        dq = 2.0 + torch.exp(t["psi_dof"][0])
        delta = torch.exp(t["sig_log_delta"])
        sq_chol = torch.diag(delta)
        nq = 2.0 + torch.exp(t["sig_dof"][0])
        return vq_chol, dq, sq_chol, nq

    def kl_terms(self, t, shared_t):
        vq_chol, dq, sq_chol, nq = self.wishart_params(t)
        kl = wishart_kl(vq_chol @ vq_chol.T, dq, PRIOR_SCALE, PRIOR_DOF)
        kl = kl + wishart_kl(sq_chol @ sq_chol.T, nq, PRIOR_SCALE, PRIOR_DOF)
        if self.inter:
            (mp0, mp1), M, (mq0, mq1), U = self.latent_moments(t, shared_t)
            kl = kl + gaussian_kl(mq0, U, mp0, M) + gaussian_kl(mq1, U, mp1, M)
        return kl

    def latent_moments(self, t, shared_t):
        xt, us = shared_t
        eye = torch.eye(self.m)
        M = gram_t(xt, xt, torch.exp(t["log_ell_m"][0]), torch.exp(t["log_amp_m"][0])) + self.nugget * eye
        U = gram_t(us, us, torch.exp(t["log_ell_u"][0]), torch.exp(t["log_amp_u"][0])) + self.nugget * eye
        prior = (_affine(xt, t["r0"]), _affine(xt, t["r1"]))
        post = (_affine(us, t["h0"]), _affine(us, t["h1"]))
        return prior, M, post, U

    def draws(self, t, shared_t, noise, k):
        """Reparameterized ``(Psi, Sigma, g0, g1)`` for MC sample ``k``; ``g`` has one entry per source."""
        vq_chol, dq, sq_chol, nq = self.wishart_params(t)
        psi = wishart_sample(vq_chol, dq, noise.psi_u[k], torch.as_tensor(noise.psi_n[k]))
        sig_full = wishart_sample(sq_chol, nq, noise.sig_u[k], torch.as_tensor(noise.sig_n[k]))
        off = NOISE_CORR * torch.sqrt(sig_full[0, 0] * sig_full[1, 1])
        sigma = torch.stack([torch.stack([sig_full[0, 0], off]), torch.stack([off, sig_full[1, 1]])])
        if self.inter:
            _, _, (mq0, mq1), U = self.latent_moments(t, shared_t)
            LU = torch.linalg.cholesky(U)
            xi = torch.as_tensor(noise.xi[k])
            g0 = mq0 + LU @ xi[0]
            g1 = mq1 + LU @ xi[1]
        else:
            g0 = g1 = torch.zeros(self.m)
        return psi, sigma, g0, g1

    def means(self, t, X, psi, g0s, g1s):
        mu0 = _affine(X, t["mu0"]) + g0s
        mu1 = _affine(X, t["mu1"]) + g1s
        L = chol_2x2(psi[0, 0], psi[0, 1], psi[1, 1])
        m0 = L[0, 0] * mu0
        m1 = L[1, 0] * mu0 + L[1, 1] * mu1
        return m0, m1

    def expected_loglik(self, t, shared_t, noise, X, w, y, s_idx):
        ell = torch.exp(t["log_ell_k"][0])
        K = gram_t(X, X, ell)
        total = 0.0
        n_mc = noise.psi_u.shape[0]
        for k in range(n_mc):
            psi, sigma, g0, g1 = self.draws(t, shared_t, noise, k)
            m0, m1 = self.means(t, X, psi, g0[s_idx], g1[s_idx])
            b = obs_mis_blocks(w, K, psi, sigma, m0, m1)
            total = total + gaussian_logpdf(y, b["mu_obs"], b["K_obs"])
        return total / n_mc

    def source_objective(self, t, shared_t, noise, X, w, y, s_idx):
        """``J^s = E_q[log p(y_obs^s | .)] - KL / m``."""
        return self.expected_loglik(t, shared_t, noise, X, w, y, s_idx) - self.kl_terms(t, shared_t) / self.m


# ---------------------------------------------------------------------------
# posterior of the missing outcomes


@dataclass
class OutcomePosterior:
    """Posterior of ``y_mis`` for each record, in original outcome units."""

    w: np.ndarray
    y_obs: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return OutcomePosterior(self.w[idx], self.y_obs[idx], self.mean[idx], self.cov[np.ix_(idx, idx)])

    @property
    def var(self):
        return np.clip(np.diag(self.cov), 0.0, None)


@dataclass
class Effects:
    ite_mean: np.ndarray
    ite_var: np.ndarray
    ate_mean: float
    ate_var: float

    def ate_quantiles(self, probs=(0.025, 0.5, 0.975)):
        from scipy import stats

        sd = math.sqrt(max(self.ate_var, 0.0))
        return {str(p): float(self.ate_mean + sd * stats.norm.ppf(p)) for p in probs}


def _shared_tensors(shared):
    return torch.as_tensor(np.asarray(shared["x_tilde"])), torch.as_tensor(np.asarray(shared["u"]))


def predict_missing(model, params, shared, source_id, cond, n_mc=10, seed=0):
    """Posterior of the missing potential outcome of every record in ``cond``.

    ``cond`` is the dataset conditioned on (all its factual outcomes enter
    ``y_obs``). The conditional Gaussian is averaged over ``n_mc`` draws of
    ``(g, Psi, Sigma)`` from q using the law of total variance.
    """
    s_idx = source_index(shared, source_id)
    loc, scale = shared["y_loc"], shared["y_scale"]
    X = torch.tensor(cond.x)
    y = torch.as_tensor((cond.y - loc) / scale)
    w = cond.w
    noise = draw_noise(sub_seed(seed, 7), n_mc, model.m)
    shared_t = _shared_tensors(shared)
    with torch.no_grad():
        t = {k: torch.as_tensor(v) for k, v in params.items()}
        K = gram_t(X, X, torch.exp(t["log_ell_k"][0]))
        means, covs = [], []
        for k in range(n_mc):
            psi, sigma, g0, g1 = model.draws(t, shared_t, noise, k)
            m0, m1 = model.means(t, X, psi, g0[s_idx], g1[s_idx])
            b = obs_mis_blocks(w, K, psi, sigma, m0, m1)
            L = kernels.cholesky_torch(b["K_obs"])
            resid = (y - b["mu_obs"]).unsqueeze(1)
            a = torch.cholesky_solve(resid, L)
            mean = b["mu_mis"] + (b["K_om"].T @ a).squeeze(1)
            V = torch.linalg.solve_triangular(L, b["K_om"], upper=False)
            cov = b["K_mis"] - V.T @ V
            means.append(mean.numpy())
            covs.append(cov.numpy())
    means = np.array(means)
    mean = means.mean(axis=0)
    dev = means - mean
    cov = np.mean(covs, axis=0) + dev.T @ dev / n_mc
    cov = 0.5 * (cov + cov.T)
    return OutcomePosterior(
        w=np.asarray(w).copy(), y_obs=np.asarray(cond.y).copy(), mean=mean * scale + loc, cov=cov * scale**2
    )


def estimate_effects(post):
    """ITE and ATE moments from the missing-outcome posterior.

    ``E[tau_i] = (2w_i - 1)(y_obs_i - E[y_mis_i])`` and ``Var[tau_i] = Var[y_mis_i]``;
    the ATE uses the quadratic forms of ``2w - 1``.
    """
    sgn = 2.0 * np.asarray(post.w, dtype=np.float64) - 1.0
    n = len(sgn)
    ite_mean = sgn * (post.y_obs - post.mean)
    ite_var = post.var.copy()
    ate_mean = float(ite_mean.mean())
    ate_var = float(max(sgn @ post.cov @ sgn, 0.0) / n**2)
    return Effects(ite_mean, ite_var, ate_mean, ate_var)


def write_ite_csv(path, effects, record_ids=None):
    ids = range(len(effects.ite_mean)) if record_ids is None else record_ids
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["record_id", "ite_mean", "ite_var"])
        for i, m, v in zip(ids, effects.ite_mean, effects.ite_var):
            wr.writerow([i, repr(float(m)), repr(float(v))])


def write_ate_json(path, effects):
    with open(path, "w") as fh:
        json.dump(
            {"ate_mean": effects.ate_mean, "ate_var": effects.ate_var, "quantiles": effects.ate_quantiles()},
            fh, indent=2, sort_keys=True,
        )


# ---------------------------------------------------------------------------
# federated problem


def _moments_payload(ds):
    mom = dataset.compute_moments(ds)
    return {
        "x_tilde": mom.x_tilde.tolist(),
        "y0_tilde": mom.y0_tilde.tolist(),
        "y1_tilde": mom.y1_tilde.tolist(),
        "w_tilde": mom.w_tilde.tolist(),
    }


@register
class FedCiProblem(Problem):
    """ELBO maximization; sources send moments and outcome sums once, then gradients."""

    name = "fedci"
    maximize = True

    def __init__(self, n_mc=10, use_inter_dependency=True, nugget=1e-4, lengthscale=None):
        super().__init__(n_mc=n_mc, use_inter_dependency=use_inter_dependency, nugget=nugget, lengthscale=lengthscale)
        self.n_mc = int(n_mc)
        self.inter = bool(use_inter_dependency)
        self.nugget = nugget
        self.lengthscale = lengthscale

    def model(self, shared):
        return FedCiModel(shared["dx"], len(shared["source_ids"]), self.inter, self.nugget, self.lengthscale)

    def local_stats(self, state):
        ds = state.train
        return {
            "n": int(ds.n),
            "dx": int(ds.dx),
            "sum_y": float(ds.y.sum()),
            "sum_y2": float((ds.y**2).sum()),
            "moments": _moments_payload(ds),
        }

    def build_shared(self, stats, seed):
        ids = sorted(int(k) for k in stats)
        st = [stats[k] for k in sorted(stats, key=int)]
        N = sum(s["n"] for s in st)
        loc = sum(s["sum_y"] for s in st) / N
        var = sum(s["sum_y2"] for s in st) / N - loc**2
        scale = math.sqrt(var) if var > 1e-12 else 1.0
        xt, us = zip(*[source_summary(s["moments"], loc, scale) for s in st])
        return {
            "source_ids": ids,
            "dx": st[0]["dx"],
            "y_loc": loc,
            "y_scale": scale,
            "x_tilde": np.array(xt).tolist(),
            "u": np.array(us).tolist(),
            "n": [s["n"] for s in st],
        }

    def init_params(self, shared, seed):
        return self.model(shared).init_params()

    def _term(self, model, t, shared, shared_t, noise, ds, sid):
        X = torch.tensor(ds.x)
        y = torch.as_tensor((ds.y - shared["y_loc"]) / shared["y_scale"])
        return model.source_objective(t, shared_t, noise, X, ds.w, y, source_index(shared, sid))

    def local_objective(self, params, state, shared, round_seed):
        model = self.model(shared)
        t = torch_params(params)
        noise = draw_noise(round_seed, self.n_mc, model.m)
        J = self._term(model, t, shared, _shared_tensors(shared), noise, state.train, state.source_id)
        return collect_grads(J, t, params)

    def pooled_objective(self, params, states, shared, round_seed):
        model = self.model(shared)
        t = torch_params(params)
        noise = draw_noise(round_seed, self.n_mc, model.m)
        st = _shared_tensors(shared)
        J = sum(self._term(model, t, shared, st, noise, states[sid].train, sid) for sid in sorted(states))
        return collect_grads(J, t, params)

    def effects(self, params, state, shared, seed=0, n_mc=None):
        """Posterior effects on the evaluation rows, conditioning on train and evaluation rows."""
        ev = state.eval if state.eval is not None else state.train
        cond = concat(state.train, ev) if state.eval is not None else ev
        post = predict_missing(self.model(shared), params, shared, state.source_id, cond, n_mc or self.n_mc, seed)
        if state.eval is not None:
            post = post.subset(np.arange(state.train.n, cond.n))
        return estimate_effects(post)

    def query(self, kind, params, state, shared, seed, options):
        if kind == "ate":
            eff = self.effects(params, state, shared, seed or 0)
            return {"n": int(len(eff.ite_mean)), "ate_mean": eff.ate_mean, "ate_var": eff.ate_var}
        return super().query(kind, params, state, shared, seed, options)


def concat(a, b):
    return dataset.SourceDataset(
        a.source_id,
        np.concatenate([a.w, b.w]),
        np.concatenate([a.y, b.y]),
        np.vstack([a.x, b.x]),
        np.vstack([a.u, b.u]),
        np.vstack([a.r, b.r]),
    )
