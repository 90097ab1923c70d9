"""Hot numeric kernels, JIT-compiled when numba is available.

Every kernel has a pure-numpy twin with identical floating-point semantics
(same per-element operation order), so results are bitwise equal either way.
Set RELIGHTKIT_NO_NUMBA=1 to force the numpy paths.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("RELIGHTKIT_NO_NUMBA"):
    # avoid the TBB layer probe (version grumbles on this image)
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            import numba
            from numba import njit, prange
        HAVE_NUMBA = True
    except ImportError:
        pass


def _accumulate_weighted_numpy(stack: np.ndarray, weights: np.ndarray, out: np.ndarray):
    """out[p,c] = float32( sum_l weights[l,c] * stack[l,p,c] ), f64 accumulation.

    Lights are added in index order per element, matching a naive per-pixel
    loop exactly.
    """
    npix = stack.shape[1]
    acc = np.zeros((npix, 3), np.float64)
    tmp = np.empty((npix, 3), np.float64)
    for l in range(stack.shape[0]):
        np.multiply(stack[l], weights[l], out=tmp)
        acc += tmp
    out[:] = acc.astype(np.float32)


def _adam_update_numpy(p, g, m, v, lr, b1, b2, omb1, omb2, eps, c1, c2):
    """In-place Adam step on flat arrays. omb1/omb2 are 1-b1, 1-b2 and c1/c2
    the bias corrections 1/(1-b1^t), 1/(1-b2^t), all in the param dtype."""
    mi = b1 * m + omb1 * g
    vi = b2 * v + omb2 * (g * g)
    m[:] = mi
    v[:] = vi
    p[:] = p - lr * (mi * c1) / (np.sqrt(vi * c2) + eps)


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _accumulate_weighted_jit(stack, weights, out):  # pragma: no cover
        nlights, npix, _ = stack.shape
        bs = 1024
        nblocks = (npix + bs - 1) // bs
        for b in prange(nblocks):
            p0 = b * bs
            p1 = min(p0 + bs, npix)
            n = p1 - p0
            acc = np.zeros((n, 3), np.float64)
            for l in range(nlights):
                for j in range(n):
                    for c in range(3):
                        acc[j, c] += weights[l, c] * np.float64(stack[l, p0 + j, c])
            for j in range(n):
                for c in range(3):
                    out[p0 + j, c] = np.float32(acc[j, c])

    @njit(parallel=True, cache=True)
    def _adam_update_jit(p, g, m, v, lr, b1, b2, omb1, omb2, eps, c1, c2):  # pragma: no cover
        for i in prange(p.size):
            gi = g[i]
            mi = b1 * m[i] + omb1 * gi
            vi = b2 * v[i] + omb2 * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] = p[i] - lr * (mi * c1) / (np.sqrt(vi * c2) + eps)


def accumulate_weighted(stack: np.ndarray, weights: np.ndarray, out: np.ndarray):
    """Weighted sum over the light axis. stack (L, npix, 3) float32 C-order,
    weights (L, 3) float64, out (npix, 3) float32."""
    if HAVE_NUMBA:
        _accumulate_weighted_jit(stack, weights, out)
    else:
        _accumulate_weighted_numpy(stack, weights, out)


def adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2):
    ty = p.dtype.type
    args = (ty(lr), ty(b1), ty(b2), ty(1.0) - ty(b1), ty(1.0) - ty(b2),
            ty(eps), ty(c1), ty(c2))
    if HAVE_NUMBA and p.size >= 4096:
        _adam_update_jit(p, g, m, v, *args)
    else:
        _adam_update_numpy(p, g, m, v, *args)


def set_threads(n: int):
    """Cap worker threads used by the JIT kernels."""
    if HAVE_NUMBA and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
