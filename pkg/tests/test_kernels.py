import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedcausal import kernels
from fedcausal.kernels import CholeskyError, KernelError, KernelSpec, RffMap, TransferMatrix

family = st.sampled_from(kernels.FAMILIES)
rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 7), st.just(2)), elements=st.floats(-3, 3))


@settings(max_examples=40, deadline=None)
@given(fam=family, x=rows, ell=st.floats(0.3, 3.0))
def test_gram_is_symmetric_psd_with_unit_diagonal(fam, x, ell):
    K = kernels.gram(KernelSpec(fam, ell), x)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(K), 1.0, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() > -1e-8


def test_matern_half_is_exponential():
    x = np.array([[0.0, 0.0], [0.3, 0.4]])
    k = kernels.gram(KernelSpec("matern", 2.0, nu=0.5), x)[0, 1]
    assert k == pytest.approx(np.exp(-0.5 / 2.0), rel=1e-10)


def test_kernel_eval_dimension_mismatch():
    with pytest.raises(KernelError):
        kernels.kernel_eval(KernelSpec(), [1.0, 2.0], [1.0])


@pytest.mark.parametrize("bad", [dict(family="rbf"), dict(lengthscale=0.0), dict(nu=-1.0)])
def test_invalid_spec(bad):
    with pytest.raises(KernelError):
        KernelSpec(**bad)


@pytest.mark.parametrize("fam,tol", [("gaussian", 0.05), ("laplacian", 0.08), ("matern", 0.06)])
def test_rff_approximates_kernel(fam, tol):
    spec = KernelSpec(fam, 1.5)
    rmap = kernels.spectral_sample(spec, 3, 4000, seed=0)
    x = np.random.default_rng(1).normal(size=(30, 3))
    phi = rmap.features(x)
    assert np.abs(phi @ phi.T - kernels.gram(spec, x)).max() < tol


@settings(max_examples=30, deadline=None)
@given(B=st.integers(1, 30), dim=st.integers(1, 4), seed=st.integers(0, 10 ** 6))
def test_rff_norm_and_serialization(B, dim, seed):
    rmap = kernels.spectral_sample(KernelSpec(), dim, B, seed=seed)
    u = np.random.default_rng(seed).normal(size=(5, dim))
    np.testing.assert_allclose((rmap.features(u) ** 2).sum(1), 1.0, atol=1e-12)
    assert RffMap.from_bytes(rmap.to_bytes()) == rmap


def test_rff_torch_matches_numpy():
    rmap = kernels.spectral_sample(KernelSpec(), 2, 16, seed=3)
    u = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_allclose(rmap.features_torch(torch.tensor(u)).numpy(), rmap.features(u), atol=1e-14)


def test_rff_rejects_wrong_dimension():
    rmap = kernels.spectral_sample(KernelSpec(), 2, 4, seed=0)
    with pytest.raises(KernelError):
        rmap.features(np.zeros((3, 5)))
    with pytest.raises(KernelError):
        kernels.spectral_sample(KernelSpec(), 2, 0)


def test_transfer_matrix_and_adaptive_kernel():
    T = TransferMatrix.constant(3, 0.25)
    a, b = np.array([0.0]), np.array([1.0])
    k = kernels.kernel_eval(KernelSpec(), a, b)
    assert kernels.adaptive_kernel(KernelSpec(), T, 0, 0, a, b) == pytest.approx(k)
    assert kernels.adaptive_kernel(KernelSpec(), T, 0, 2, a, b) == pytest.approx(0.25 * k)
    with pytest.raises(KernelError):
        TransferMatrix(np.array([[1.0, 1.5], [0.0, 1.0]]))
    with pytest.raises(KernelError):
        TransferMatrix(np.zeros((2, 2)))


def test_cholesky_jitter_escalation():
    A = np.ones((3, 3))  # rank one
    L = kernels.cholesky(A)
    assert np.abs(L @ L.T - A).max() < 1e-2
    with pytest.raises(CholeskyError) as err:
        kernels.cholesky(-np.eye(2))
    assert err.value.min_eig == pytest.approx(-1.0)
    with pytest.raises(KernelError):
        kernels.cholesky(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_cholesky_torch_keeps_gradient():
    A = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=torch.float64, requires_grad=True)
    L = kernels.cholesky_torch(A)
    L.sum().backward()
    assert A.grad is not None
    np.testing.assert_allclose((L @ L.T).detach().numpy(), A.detach().numpy(), atol=1e-12)
    with pytest.raises(CholeskyError):
        kernels.cholesky_torch(-torch.eye(2, dtype=torch.float64))
