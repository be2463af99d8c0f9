import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcausal import _core, mcmc


def normal_logpdf(mu, sd):
    return lambda z: -0.5 * ((z - mu) / sd) ** 2 - np.log(sd)


def test_target_equal_to_proposal_accepts_everything():
    res = mcmc.independent_mh(normal_logpdf(0, 1), lambda k, rng: rng.normal(size=k), normal_logpdf(0, 1),
                              n=200, seed=0)
    assert res.accept_rate == 1.0 and res.samples.shape == (200,)


def test_recovers_shifted_target():
    res = mcmc.independent_mh(normal_logpdf(0.5, 1), lambda k, rng: rng.normal(0, 2, size=k), normal_logpdf(0, 2),
                              n=20000, burn_in=100, seed=1)
    assert abs(res.samples.mean() - 0.5) < 0.05 and abs(res.samples.std() - 1) < 0.05
    assert 0 < res.accept_rate < 1


def test_seeded_chains_repeat():
    args = (normal_logpdf(1, 1), lambda k, rng: rng.normal(size=k), normal_logpdf(0, 1))
    a = mcmc.independent_mh(*args, n=50, seed=3)
    b = mcmc.independent_mh(*args, n=50, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_zero_density_start_is_redrawn_and_gives_up():
    # the target is supported on z > 0 only
    target = lambda z: np.where(z > 0, 0.0, -np.inf)  # noqa: E731
    res = mcmc.independent_mh(target, lambda k, rng: rng.normal(size=k), normal_logpdf(0, 1), n=100, seed=0)
    assert np.all(res.samples > 0)
    with pytest.raises(mcmc.SamplerError):
        mcmc.independent_mh(lambda z: np.full(len(z), -np.inf), lambda k, rng: rng.normal(size=k),
                            normal_logpdf(0, 1), n=5, seed=0, max_init_tries=3)
    with pytest.raises(ValueError):
        mcmc.independent_mh(target, lambda k, rng: rng.normal(size=k), normal_logpdf(0, 1), n=0)


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 6), steps=st.integers(1, 20), seed=st.integers(0, 1000))
def test_final_states_match_single_chains(rows, steps, seed):
    rng = np.random.default_rng(seed)
    lw = rng.normal(size=(rows, steps))
    lu = np.log(rng.uniform(size=(rows, steps)))
    idx, rate = mcmc.final_states(lw, lu)
    for r in range(rows):
        chain, _ = _core.independent_mh_chain(lw[r], lu[r])
        assert idx[r] == chain[-1]
    assert 0 <= rate <= 1


def test_ess_of_independent_and_correlated_chains():
    rng = np.random.default_rng(0)
    iid = rng.normal(size=5000)
    assert 0.8 * 5000 < mcmc.effective_sample_size(iid) < 1.2 * 5000
    ar = np.empty(5000)
    ar[0] = 0
    for t in range(1, 5000):
        ar[t] = 0.9 * ar[t - 1] + rng.normal()
    # AR(1) with phi = 0.9 has integrated time (1 + phi) / (1 - phi) = 19
    assert 5000 / 30 < mcmc.effective_sample_size(ar) < 5000 / 12
    assert mcmc.effective_sample_size(np.ones(10)) == 10


def test_autocorrelation_starts_at_one():
    acf = mcmc.autocorrelation(np.random.default_rng(0).normal(size=100))
    assert acf[0] == pytest.approx(1.0)
