"""Hot inner kernels with a numba path and a pure-numpy fallback.

Set ``MELDIFF_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths evaluate the same floating-point operations in the same order
(no fastmath), so they agree bit for bit.
"""
import os

import numpy as np

_DISABLED = os.environ.get("MELDIFF_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def backend():
    return "numba" if HAS_NUMBA else "numpy"


# -- numpy reference path -------------------------------------------------

def _affine3_np(x, eps, z, a, b, c):
    return a * x + b * eps + c * z


def _conv1d_np(x, w, bias, dilation, pad_left):
    # x: [C_in, F], w: [C_out, C_in, K] -> [C_out, F], zero "same" padding
    c_in, frames = x.shape
    c_out, _, k = w.shape
    total = dilation * (k - 1)
    xp = np.zeros((c_in, frames + total), dtype=x.dtype)
    xp[:, pad_left:pad_left + frames] = x
    out = np.empty((c_out, frames), dtype=np.result_type(x, w))
    out[:] = bias[:, None]
    for j in range(k):
        out += w[:, :, j] @ xp[:, j * dilation:j * dilation + frames]
    return out


def _repeat_columns_np(emb, durations):
    return np.repeat(emb, durations, axis=1)


# -- numba path -------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _affine3_nb(x, eps, z, a, b, c):
        flat_x = x.ravel()
        flat_e = eps.ravel()
        flat_z = z.ravel()
        out = np.empty(flat_x.size, dtype=flat_x.dtype)
        for i in range(flat_x.size):
            out[i] = a * flat_x[i] + b * flat_e[i] + c * flat_z[i]
        return out.reshape(x.shape)


def affine3(x, eps, z, a, b, c):
    """Elementwise ``a*x + b*eps + c*z`` for same-shaped float64 arrays."""
    if HAS_NUMBA and x.dtype == eps.dtype == z.dtype and x.flags.c_contiguous \
            and eps.flags.c_contiguous and z.flags.c_contiguous:
        return _affine3_nb(x, eps, z, float(a), float(b), float(c))
    return _affine3_np(x, eps, z, a, b, c)


def conv1d(x, w, bias, dilation=1, pad_left=None):
    k = w.shape[2]
    if pad_left is None:
        pad_left = dilation * (k - 1) // 2
    # The tap loop is already BLAS-bound; numba does not beat it.
    return _conv1d_np(x, w, bias, dilation, pad_left)


def repeat_columns(emb, durations):
    # np.repeat is one C loop already; a numba version measured slower.
    return _repeat_columns_np(emb, np.asarray(durations, dtype=np.int64))


def affine3_numpy(x, eps, z, a, b, c):
    return _affine3_np(x, eps, z, a, b, c)
