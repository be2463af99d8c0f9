import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import decomposition_gap, finite_difference_error, jitter, shared_for, states_of, toy_shards
from fedcausal import causalrff, datagen, kernels
from fedcausal.federation import LocalState, TrainConfig
from fedcausal.federation.problem import round_seed

PROBLEMS = [causalrff.CausalRffProblem, causalrff.AuxTreatmentProblem, causalrff.AuxOutcomeProblem]


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 4), seed=st.integers(0, 10 ** 6))
def test_combined_weight_matches_explicit_sum(m, seed):
    rng = np.random.default_rng(seed)
    thetas = [rng.normal(size=6) for _ in range(m)]
    T = rng.uniform(size=(m, m))
    np.fill_diagonal(T, 1.0)
    for s in range(m):
        expect = sum((1.0 if v == s else T[s, v]) * thetas[v] for v in range(m))
        np.testing.assert_allclose(causalrff.combined_weight(thetas, T, s), expect, atol=1e-12)


def test_transfer_predict_equals_adaptive_kernel_expansion():
    # with theta^v = sum_j phi(u_j^v) alpha_j^v the prediction is sum_v sum_j kappa(u, u_j^v) alpha_j^v
    rng = np.random.default_rng(0)
    rmap = kernels.spectral_sample(kernels.KernelSpec(), 2, 64, seed=1)
    pts = [rng.normal(size=(3, 2)) for _ in range(2)]
    alpha = [rng.normal(size=3) for _ in range(2)]
    thetas = [rmap.features(p).T @ a for p, a in zip(pts, alpha)]
    T = np.array([[1.0, 0.3], [0.6, 1.0]])
    u = rng.normal(size=(4, 2))
    got = causalrff.transfer_predict(thetas, T, 0, u, rmap)
    phi_u = rmap.features(u)
    expect = sum((1.0 if v == 0 else T[0, v]) * (phi_u @ rmap.features(pts[v]).T) @ alpha[v] for v in range(2))
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_transfer_matrix_has_unit_diagonal_and_bounds():
    T = causalrff.transfer_matrix(torch.tensor([[5.0, -50.0], [50.0, 0.0]], dtype=torch.float64), 2)
    assert torch.all(torch.diagonal(T) == 1)
    assert 0 <= float(T[0, 1]) < 1e-10 and 1 - 1e-10 < float(T[1, 0]) <= 1
    assert torch.equal(causalrff.transfer_matrix(None, 3), torch.eye(3))


def test_map_encoding_round_trip():
    rmap = kernels.spectral_sample(kernels.KernelSpec(), 3, 5, seed=0)
    assert causalrff.decode_map(causalrff.encode_map(rmap)) == rmap


@pytest.mark.parametrize("cls", PROBLEMS)
def test_decomposition_and_finite_differences(cls):
    shards = toy_shards(3, 15, seed=9, binary_x=True)
    problem = cls(B=8)
    states = states_of(shards)
    shared = shared_for(problem, states)
    params = jitter(problem.init_params(shared, 0), 0.2)
    vgap, ggap = decomposition_gap(problem, params, states, shared, round_seed(0, 1))
    assert vgap < 1e-9 and ggap < 1e-10
    one = {1: LocalState(1, shards[1].subset(range(4)))}
    sh1 = shared_for(problem, one)
    assert finite_difference_error(problem, jitter(problem.init_params(sh1, 0), 0.3), one[1], sh1, stride=2) < 1e-3


@pytest.mark.parametrize("cls", PROBLEMS)
def test_transfer_segment_only_when_learned(cls):
    shards = toy_shards(3, 6, binary_x=True)
    name = cls.transfer_name
    for transfer, m, present in ((True, 3, True), (False, 3, False), (True, 1, False)):
        problem = cls(B=4, transfer=transfer)
        sub = {s: shards[s] for s in range(1, m + 1)}
        p = problem.init_params(shared_for(problem, states_of(sub)), 0)
        assert (name in p) == present


def test_latent_problem_rejects_bad_family():
    with pytest.raises(ValueError):
        causalrff.CausalRffProblem(x_family="poisson")


def test_oracle_cate_matches_enumeration():
    fd = datagen.generate(datagen.DgpConfig("causalrff", n=5, m=1, seed=3))
    oracle = causalrff.OracleCategoricalModel(fd.coefficients)
    x = fd.sources[1].x[0]
    est = causalrff.estimate_cate(oracle, oracle, x, N=3000, burn_in=50, seed=0)
    exact = datagen.causalrff_exact_cate(fd.coefficients, x)[0]
    assert abs(est.value - exact) < 4 * est.stderr + 1e-3
    assert 0 < est.accept_rate <= 1


def test_estimate_global_ate_and_errors():
    assert causalrff.estimate_global_ate([(2.0, 1), (4.0, 3)]) == 3.5
    with pytest.raises(ValueError):
        causalrff.estimate_global_ate([])
    with pytest.raises(ValueError):
        causalrff.estimate_global_ate([(1.0, 0)])


def test_bounds_reject_bad_sizes():
    with pytest.raises(ValueError):
        causalrff.minimax_bounds([0], 1, 1)
    with pytest.raises(ValueError):
        causalrff.minimax_bounds([5], 0, 1)


@settings(max_examples=30, deadline=None)
@given(n=st.lists(st.integers(1, 500), min_size=1, max_size=5), B=st.integers(1, 100), dx=st.integers(1, 30),
       bump=st.integers(1, 50), c=st.floats(0, 2))
def test_bounds_decrease_with_data_and_transfer(n, B, dx, bump, c):
    base = causalrff.minimax_bounds(n, B, dx)
    more = causalrff.minimax_bounds([n[0] + bump] + n[1:], B, dx)
    m = len(n)
    shared = causalrff.minimax_bounds(n, B, dx, [c + 0.1] * m, [c + 0.1] * m, [c + 0.1] * m)
    for a, b, s in zip(base, more, shared):
        assert b < a and s < a


def test_fit_predict_and_outputs(tmp_path):
    fd = datagen.generate(datagen.DgpConfig("causalrff", n=30, m=2, seed=1, dx=5))
    cfg = TrainConfig(max_rounds=15, learning_rate=0.02, optimizer="adam")
    fit = causalrff.fit(fd.sources, cfg, latent_options={"B": 10}, aux_options={"B": 10})
    assert set(fit.residual_sd) == {1, 2} and all(v > 0 for v in fit.residual_sd.values())
    factors = fit.transfer_factors()
    assert factors and all(np.all((v >= 0) & (v <= 1)) for v in factors.values())
    X = fd.sources[1].x[:4]
    mh = causalrff.predict_cate(fit, 1, X, N=20, burn_in=10, seed=0)
    var = causalrff.predict_cate(fit, 1, X, N=20, burn_in=10, seed=0, mode="variational")
    assert mh.shape == var.shape == (4,) and np.all(np.isfinite(mh))
    np.testing.assert_array_equal(mh, causalrff.predict_cate(fit, 1, X, N=20, burn_in=10, seed=0))
    causalrff.write_cate_csv(tmp_path / "cate.csv", mh)
    assert (tmp_path / "cate.csv").read_text().startswith("record,cate")
    lat, _ = fit.models(1)
    d = fd.sources[1]
    draws = causalrff.mh_independent_sample(lat, d.x[0], d.y[0], d.w[0], N=50, burn_in=10, seed=0)
    assert draws.samples.shape == (50, lat.dz) and 0 <= draws.accept_rate <= 1
    q = causalrff.mh_independent_sample(lat, d.x[0], d.y[0], d.w[0], N=50, seed=0, mode="variational")
    assert q.accept_rate == 1.0
