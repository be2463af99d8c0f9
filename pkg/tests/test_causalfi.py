import json

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import decomposition_gap, finite_difference_error, jitter, shared_for, states_of
from fedcausal import causalfi, datagen
from fedcausal.dataset import SourceDataset
from fedcausal.federation import LocalState, Session, TrainConfig
from fedcausal.federation.problem import round_seed


def incomplete(m=2, n=12, seed=0, d=2):
    cfg = datagen.DgpConfig("causalfi", n=n, m=m, dx=3, d=d, seed=seed, missing_rate=0.26, linear_outcome=True)
    return datagen.generate(cfg).sources


@pytest.mark.parametrize("fam", ["gaussian", "bernoulli", "poisson", "categorical:4"])
def test_family_loglik_matches_scipy(fam):
    rng = np.random.default_rng(0)
    width = causalfi.family_width(fam)
    lam = rng.normal(size=(5, width))
    if fam == "gaussian":
        u = rng.normal(size=5)
        sd = np.logaddexp(0, lam[:, 1]) + causalfi.SD_FLOOR
        ref = stats.norm.logpdf(u, lam[:, 0], sd)
    elif fam == "bernoulli":
        u = rng.integers(0, 2, 5).astype(float)
        ref = stats.bernoulli.logpmf(u, 1 / (1 + np.exp(-lam[:, 0])))
    elif fam == "poisson":
        u = rng.integers(0, 5, 5).astype(float)
        ref = stats.poisson.logpmf(u, np.exp(lam[:, 0]))
    else:
        u = rng.integers(0, 4, 5).astype(float)
        logp = lam - np.log(np.exp(lam).sum(1, keepdims=True))
        ref = logp[np.arange(5), u.astype(int)]
    got = causalfi.family_loglik([fam], torch.tensor(lam), torch.tensor(u[:, None]), torch.ones(5, 1))
    np.testing.assert_allclose(got.numpy(), ref, atol=1e-10)
    masked = causalfi.family_loglik([fam], torch.tensor(lam), torch.tensor(u[:, None]), torch.zeros(5, 1))
    assert float(torch.abs(torch.as_tensor(masked)).max()) == 0


@pytest.mark.parametrize("fam", ["gaussian", "bernoulli", "poisson", "categorical:3"])
def test_family_sample_mean(fam):
    rng = np.random.default_rng(1)
    lam = np.tile(np.array([[0.4, 0.1, -0.3][:causalfi.family_width(fam)]]), (40000, 1))
    draws = causalfi.family_sample([fam], lam, rng)[:, 0]
    mean = causalfi.family_mean([fam], lam[:1])[0, 0]
    assert abs(draws.mean() - mean) < 0.03


def test_family_width_errors():
    with pytest.raises(ValueError):
        causalfi.family_width("categorical:1")
    with pytest.raises(ValueError):
        causalfi.family_width("beta")


@pytest.mark.parametrize("cls", [causalfi.CausalFiProblem, causalfi.SurrogateProblem])
def test_decomposition_and_finite_differences(cls):
    shards = incomplete(3, 10, seed=4)
    problem = cls(hidden=(5, 5), n_mc=2)
    states = states_of(shards)
    if cls is causalfi.SurrogateProblem:
        for st_ in states.values():
            st_.store["pseudo"] = {"u": st_.train.u_filled(0.0), "y": np.array(st_.train.y),
                                   "x": np.array(st_.train.x), "w": st_.train.w}
    shared = shared_for(problem, states)
    params = problem.init_params(shared, 0)
    vgap, ggap = decomposition_gap(problem, params, states, shared, round_seed(0, 2))
    assert vgap < 1e-8 and ggap < 1e-9


def test_model_finite_differences():
    ds = incomplete(1, 5, seed=2)[1]
    problem = causalfi.CausalFiProblem(hidden=(4, 4), n_mc=2, init_logsd=-1.0)
    one = {1: LocalState(1, ds)}
    shared = shared_for(problem, one)
    params = jitter(problem.init_params(shared, 0), 0.1)
    assert finite_difference_error(problem, params, one[1], shared, stride=7) < 1e-3


def test_pseudo_rows_are_complete_and_sized():
    shards = incomplete(2, 15, seed=1)
    problem = causalfi.CausalFiProblem(hidden=(5,))
    states = states_of(shards)
    shared = shared_for(problem, states)
    params = problem.init_params(shared, 0)
    out = causalfi.generate_pseudo(problem, params, shared, shards[1], count=40, seed=3)
    assert out["u"].shape == (40, shards[1].d) and np.isfinite(out["u"]).all()
    again = causalfi.generate_pseudo(problem, params, shared, shards[1], count=40, seed=3)
    np.testing.assert_array_equal(out["y"], again["y"])


def test_full_fit_produces_effect_samples(tmp_path):
    shards = incomplete(2, 20, seed=3)
    cfg = TrainConfig(max_rounds=8, learning_rate=0.01, optimizer="adam")
    res = causalfi.fit(shards, cfg, model_options={"hidden": (5,)}, surrogate_options={"hidden": (5,)},
                       K=6, N=3, M=3, pseudo_count=30)
    assert res.effects.ate_samples.shape == (6,)
    assert res.effects.q025 <= res.effects.mean <= res.effects.q975
    assert set(res.local) == {1, 2}
    res.effects.write_json(tmp_path / "ate.json")
    assert len(json.loads((tmp_path / "ate.json").read_text())["ate_samples"]) == 6
    assert res.local[1]["n"] == 20 and len(res.local[1]["ate"]) == 6
    causalfi.write_cate_csv(tmp_path / "cate.csv", np.ones((20, 6)))
    assert (tmp_path / "cate.csv").read_text().count("\n") == 21


def test_local_effects_share_draws_across_sources():
    shards = incomplete(2, 8, seed=5)
    problem = causalfi.SurrogateProblem(hidden=(4,))
    states = states_of(shards)
    for st_ in states.values():
        st_.store["pseudo"] = {"u": st_.train.u_filled(0.0), "y": np.array(st_.train.y),
                               "x": np.array(st_.train.x), "w": st_.train.w}
    shared = shared_for(problem, states)
    params = problem.init_params(shared, 0)
    a = causalfi.local_effect_samples(problem, params, shared, shards[1], K=5, N=2, M=2, seed=1)
    b = causalfi.local_effect_samples(problem, params, shared, shards[1], K=5, N=2, M=2, seed=1)
    np.testing.assert_array_equal(a.cate, b.cate)
    assert a.cate.shape == (8, 5) and a.n == 8
    with pytest.raises(ValueError):
        causalfi.local_effect_samples(problem, params, shared, shards[1], K=0)


def test_pooled_effect_weighting_and_errors():
    eff = causalfi.pool_effect_samples({1: (1, [1.0, 2.0]), 2: (3, [3.0, 6.0])})
    np.testing.assert_allclose(eff.ate_samples, [2.5, 5.0])
    with pytest.raises(ValueError):
        causalfi.pool_effect_samples({})
    with pytest.raises(ValueError):
        causalfi.pool_effect_samples({1: (1, [1.0]), 2: (1, [1.0, 2.0])})
    with pytest.raises(ValueError):
        causalfi.pool_effect_samples({1: (0, [1.0])})


def test_effect_samples_single_draw():
    eff = causalfi.EffectSamples.from_samples([2.0])
    assert eff.sd == 0.0 and eff.mean == 2.0
    with pytest.raises(ValueError):
        causalfi.EffectSamples.from_samples([])


def test_imputation_bias_demo():
    lin = causalfi.imputation_bias_demo("linear", n_draws=2000)
    assert lin.bias_imputation < 1e-6 and lin.bias_distributional < 1e-6
    soft = causalfi.imputation_bias_demo("softplus", n_draws=4000)
    assert soft.bias_imputation > soft.bias_distributional
    with pytest.raises(ValueError):
        causalfi.imputation_bias_demo("cubic")


def _masked(n, seed, mar):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    u = rng.normal(size=(n, 1))
    p = 1 / (1 + np.exp(-3 * x[:, 0])) if mar else np.full(n, 0.4)
    r = (rng.uniform(size=(n, 1)) > p[:, None]).astype(int)
    u[r == 0] = np.nan
    return SourceDataset(1, rng.integers(0, 2, n), rng.normal(size=n), x, u, r)


def test_mcar_vote_detects_mechanism():
    assert causalfi.vote_sources([_masked(400, s, mar=True) for s in range(3)]) == "MAR"
    assert causalfi.vote_sources([_masked(400, s, mar=False) for s in range(5)]) == "MCAR"


def test_vote_ties_and_abstentions():
    assert causalfi.missing_mechanism_vote([("MCAR", 0.5), ("MAR", 0.01)]) == "MAR"
    assert causalfi.missing_mechanism_vote([None, ("MCAR", 0.9)]) == "MCAR"
    with pytest.raises(ValueError):
        causalfi.missing_mechanism_vote([None])
    complete = SourceDataset(1, np.array([0, 1]), np.zeros(2), np.zeros((2, 1)))
    assert causalfi.mcar_test(complete) is None


def test_session_pseudo_query_stays_local():
    shards = incomplete(2, 10, seed=6)
    problem = causalfi.CausalFiProblem(hidden=(4,))
    session = Session.inproc(shards, keep_trace=True)
    res = session.train(problem, TrainConfig(max_rounds=2, learning_rate=0.01))
    answers = session.query(problem, "pseudo", res.params, seed=0, options={"count": 7})
    wire = b"".join(body for ch in session.channels.values() for _, body in ch.trace)
    session.stop()
    assert all(v["n"] == 7 for v in answers.values())
    assert repr(float(shards[1].y[0])).encode() not in wire
