"""Stationary kernels, spectral sampling, random Fourier features and the
dense linear-algebra helpers shared by the estimators.

Kernel conventions (``r = a - b``)::

    gaussian   exp(-|r|_2^2 / (2 l^2))         omega ~ N(0, l^-2 I)
    laplacian  exp(-|r|_1 / l)                 omega_j ~ Cauchy(0, 1/l)
    matern     Matern-nu with lengthscale l    omega = z / (l sqrt(g)), g ~ Gamma(nu, rate nu)

The Matern frequencies are a multivariate Student-t with ``2 nu`` degrees of
freedom, which is the spectral density of the kernel evaluated by
:func:`kernel_eval`.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _core

FAMILIES = ("gaussian", "laplacian", "matern")


class KernelError(ValueError):
    pass


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, msg, min_eig=None):
        self.min_eig = min_eig
        super().__init__(msg)


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    lengthscale: float = 1.0
    nu: float = 1.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unsupported kernel family {self.family!r}")
        if not self.lengthscale > 0:
            raise KernelError("lengthscale must be positive")
        if not self.nu > 0:
            raise KernelError("matern smoothness must be positive")


def _matern(dist, ell, nu):
    dist = np.asarray(dist, dtype=np.float64)
    s = math.sqrt(2.0 * nu) * dist / ell
    out = np.ones_like(s)
    pos = s > 0
    sp = s[pos]
    out[pos] = (2.0 ** (1.0 - nu) / special.gamma(nu)) * sp**nu * special.kv(nu, sp)
    return out


def gram(spec, a, b=None, backend=None):
    """Kernel matrix between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise KernelError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if spec.family == "gaussian":
        return _core.gram_gaussian(a, b, spec.lengthscale, backend=backend)
    if spec.family == "laplacian":
        return _core.gram_laplacian(a, b, spec.lengthscale, backend=backend)
    sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return _matern(np.sqrt(sq), spec.lengthscale, spec.nu)


def kernel_eval(spec, a, b):
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise KernelError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(gram(spec, a[None, :], b[None, :])[0, 0])


@dataclass(frozen=True, eq=False)
class RffMap:
    """Frozen frequencies ``omega`` of shape ``(B, dim)``."""

    freqs: np.ndarray

    def __post_init__(self):
        f = np.ascontiguousarray(self.freqs, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise KernelError("frequencies must be a non-empty (B, dim) array")
        f.setflags(write=False)
        object.__setattr__(self, "freqs", f)

    @property
    def B(self):
        return self.freqs.shape[0]

    @property
    def dim(self):
        return self.freqs.shape[1]

    @property
    def n_features(self):
        return 2 * self.B

    def __eq__(self, other):
        return isinstance(other, RffMap) and np.array_equal(self.freqs, other.freqs)

    def features(self, u, backend=None):
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        u2 = np.atleast_2d(u)
        if u2.shape[1] != self.dim:
            raise KernelError(f"input dimension {u2.shape[1]} does not match map dimension {self.dim}")
        phi = _core.rff_features(u2, self.freqs, backend=backend)
        return phi[0] if single else phi

    def features_torch(self, u):
        """Differentiable features for a torch tensor of shape ``(n, dim)``."""
        import torch

        w = torch.tensor(np.array(self.freqs), dtype=u.dtype)
        proj = u @ w.T
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=1) / math.sqrt(self.B)

    def to_bytes(self):
        """Binary frame: uint32 dim, uint32 B, then B*dim little-endian float64, row-major."""
        return struct.pack("<II", self.dim, self.B) + self.freqs.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf):
        dim, nb = struct.unpack_from("<II", buf, 0)
        expected = 8 + 8 * dim * nb
        if len(buf) != expected:
            raise KernelError(f"frame length {len(buf)} != {expected}")
        arr = np.frombuffer(buf, dtype="<f8", offset=8).reshape(nb, dim)
        return cls(arr.astype(np.float64))


def spectral_sample(spec, dim, B, seed=None):
    """Draw ``B`` frequencies of dimension ``dim`` from the spectral density of ``spec``."""
    if B < 1:
        raise KernelError("B must be at least 1")
    if dim < 1:
        raise KernelError("dim must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ell = spec.lengthscale
    if spec.family == "gaussian":
        w = rng.standard_normal((B, dim)) / ell
    elif spec.family == "laplacian":
        w = rng.standard_cauchy((B, dim)) / ell
    elif spec.family == "matern":
        z = rng.standard_normal((B, dim))
        g = rng.gamma(spec.nu, 1.0 / spec.nu, size=(B, 1))
        w = z / (ell * np.sqrt(g))
    else:
        raise KernelError(f"unsupported kernel family {spec.family!r}")
    return RffMap(w)


def rff_features(rmap, u, backend=None):
    return rmap.features(u, backend=backend)


@dataclass(eq=False)
class TransferMatrix:
    """Adaptive factors between sources; unit diagonal, off-diagonal in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise KernelError("transfer matrix must be square")
        if not np.allclose(np.diag(v), 1.0):
            raise KernelError("transfer matrix diagonal must be 1")
        if np.any(v < 0) or np.any(v > 1):
            raise KernelError("transfer factors must lie in [0, 1]")
        self.values = v

    @classmethod
    def constant(cls, m, value):
        v = np.full((m, m), float(value))
        np.fill_diagonal(v, 1.0)
        return cls(v)

    def __getitem__(self, key):
        return self.values[key]


def adaptive_kernel(base, T, s, v, a, b):
    """``k(a, b)`` within a source and ``T[s, v] k(a, b)`` across sources (0-based ids)."""
    k = kernel_eval(base, a, b)
    if s == v:
        return k
    return float(T[s, v]) * k


def cholesky(A, jitter=1e-6, max_jitter=1e-2):
    """Lower Cholesky factor with escalating diagonal jitter.

    The plain factorization is tried first. On failure ``jitter * mean(diag)``
    is added, multiplying by 10 until ``max_jitter * mean(diag)``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise KernelError("cholesky needs a square matrix")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise KernelError("cholesky needs a symmetric matrix")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not scale > 0:
        scale = 1.0
    eye = np.eye(A.shape[0])
    j = jitter
    while j <= max_jitter * (1 + 1e-12):
        try:
            return np.linalg.cholesky(A + j * scale * eye)
        except np.linalg.LinAlgError:
            j *= 10.0
    min_eig = float(np.linalg.eigvalsh(A).min())
    raise CholeskyError(
        f"matrix not positive definite after jitter {max_jitter:g}; min eigenvalue about {min_eig:.3e}",
        min_eig=min_eig,
    )


def cholesky_torch(A, jitter=1e-6, max_jitter=1e-2):
    """Torch version of :func:`cholesky` that keeps the autograd graph."""
    import torch

    L, info = torch.linalg.cholesky_ex(A)
    if int(info) == 0:
        return L
    scale = torch.diagonal(A).mean().detach().clamp_min(1e-300)
    eye = torch.eye(A.shape[0], dtype=A.dtype)
    j = jitter
    while j <= max_jitter * (1 + 1e-12):
        L, info = torch.linalg.cholesky_ex(A + j * scale * eye)
        if int(info) == 0:
            return L
        j *= 10.0
    min_eig = float(torch.linalg.eigvalsh(A.detach()).min())
    raise CholeskyError(
        f"matrix not positive definite after jitter {max_jitter:g}; min eigenvalue about {min_eig:.3e}",
        min_eig=min_eig,
    )


def kronecker(A, B):
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))
