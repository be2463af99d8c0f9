"""Numerical core routines with a compiled backend and a pure-Python fallback.

The Cython extension ``_kernels`` is used when it was built; otherwise the
numpy implementations in ``_fallback`` are used. Set ``FEDCAUSAL_PURE_PYTHON=1``
to force the fallback.

Functions
---------
gram_gaussian, gram_laplacian
    Dense kernel matrices between two row-stacked point sets.
rff_features
    Random Fourier feature map ``[cos(U W^T), sin(U W^T)] / sqrt(B)``.
independent_mh_chain, independent_mh_chains
    Acceptance loops of the independent-proposal Metropolis-Hastings sampler.
"""

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("FEDCAUSAL_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = "cython" if _compiled is not None else "python"
_impl = BACKENDS[BACKEND]


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def gram_gaussian(a, b, lengthscale, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.gram_gaussian(_c64(a), _c64(b), float(lengthscale))


def gram_laplacian(a, b, lengthscale, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.gram_laplacian(_c64(a), _c64(b), float(lengthscale))


def rff_features(u, freqs, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.rff_features(_c64(u), _c64(freqs))


def independent_mh_chain(log_weight, log_u, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.independent_mh_chain(_c64(log_weight), _c64(log_u))


def independent_mh_chains(log_weight, log_u, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.independent_mh_chains(_c64(log_weight), _c64(log_u))
