"""Hot numeric kernels, jitted with numba when available.

Two code paths exist for each kernel: a numba ``@njit`` build and a pure
numpy fallback.  Selection happens once at import time; set the environment
variable ``OODKIT_NO_NUMBA=1`` to force the numpy path (useful for debugging
and for the benchmark in ``benchmarks/bench_kernels.py``, which times both).
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and os.environ.get("OODKIT_NO_NUMBA", "") in ("", "0")

_LOG2PI = float(np.log(2.0 * np.pi))


def svd_error_curve_numpy(x, u, s, vt):
    """Mean absolute reconstruction error after each truncation rank.

    ``x`` is an (h, w) matrix with SVD factors ``u`` (h, k), ``s`` (k,),
    ``vt`` (k, w).  Returns ``errs`` with ``errs[r]`` the mean |x_hat - x|
    of the rank-(r+1) reconstruction, for r = 0..k-1.
    """
    comps = s[:, None, None] * u.T[:, :, None] * vt[:, None, :]
    acc = np.cumsum(comps, axis=0)
    return np.mean(np.abs(acc - x[None, :, :]), axis=(1, 2))


def _svd_error_curve_loops(x, u, s, vt):
    h, w = x.shape
    k = s.shape[0]
    acc = np.zeros((h, w))
    errs = np.empty(k)
    for r in range(k):
        sr = s[r]
        for i in range(h):
            ui = u[i, r] * sr
            for j in range(w):
                acc[i, j] += ui * vt[r, j]
        tot = 0.0
        for i in range(h):
            for j in range(w):
                tot += abs(acc[i, j] - x[i, j])
        errs[r] = tot / (h * w)
    return errs


def _toyvae_batch_grads_body(x, eps, w1, b1, w2, b2, w3, b3,
                             v1, c1, v2, c2, v3, c3, clamp):
    """Fused forward + backward pass of the toy VAE on one batch.

    Returns gradients of the batch-mean ELBO with respect to every
    parameter array, followed by (mean elbo, mean recon, mean kl).
    The noise ``eps`` is supplied by the caller so both code paths and
    reruns are deterministic.
    """
    n = x.shape[0]
    xd = x.shape[1]
    dz = eps.shape[1]
    inv_n = 1.0 / n

    # encoder
    a1 = np.dot(x, w1) + b1
    h1 = np.where(a1 > 0.0, a1, 0.01 * a1)
    a2 = np.dot(h1, w2) + b2
    h2 = np.where(a2 > 0.0, a2, 0.01 * a2)
    enc = np.dot(h2, w3) + b3
    mu = enc[:, :dz]
    lv_raw = enc[:, dz:]
    lv = np.minimum(np.maximum(lv_raw, -clamp), clamp)
    sig = np.exp(0.5 * lv)
    z = mu + sig * eps

    # decoder
    d1 = np.dot(z, v1) + c1
    g1 = np.where(d1 > 0.0, d1, 0.01 * d1)
    d2 = np.dot(g1, v2) + c2
    g2 = np.where(d2 > 0.0, d2, 0.01 * d2)
    dec = np.dot(g2, v3) + c3
    mx = dec[:, :xd]
    sx_raw = dec[:, xd:]
    sx = np.minimum(np.maximum(sx_raw, -clamp), clamp)

    diff = x - mx
    isx = np.exp(-sx)
    recon = -0.5 * np.sum(_LOG2PI + sx + diff * diff * isx, axis=1)
    kl = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=1)
    elbo = recon - kl

    # backward through the decoder
    dmx = diff * isx * inv_n
    dsx = (-0.5 + 0.5 * diff * diff * isx) * inv_n
    dsx = np.where(np.abs(sx_raw) < clamp, dsx, 0.0)
    ddec = np.empty((n, 2 * xd))
    ddec[:, :xd] = dmx
    ddec[:, xd:] = dsx

    dv3 = np.dot(g2.T, ddec)
    dc3 = np.sum(ddec, axis=0)
    dg2 = np.dot(ddec, v3.T) * np.where(d2 > 0.0, 1.0, 0.01)
    dv2 = np.dot(g1.T, dg2)
    dc2 = np.sum(dg2, axis=0)
    dg1 = np.dot(dg2, v2.T) * np.where(d1 > 0.0, 1.0, 0.01)
    dv1 = np.dot(z.T, dg1)
    dc1 = np.sum(dg1, axis=0)
    dzf = np.dot(dg1, v1.T)

    # reparameterization and analytic KL
    dmu = dzf - mu * inv_n
    dlv = dzf * 0.5 * sig * eps - 0.5 * (np.exp(lv) - 1.0) * inv_n
    dlv = np.where(np.abs(lv_raw) < clamp, dlv, 0.0)
    denc = np.empty((n, 2 * dz))
    denc[:, :dz] = dmu
    denc[:, dz:] = dlv

    # backward through the encoder
    dw3 = np.dot(h2.T, denc)
    db3 = np.sum(denc, axis=0)
    dh2 = np.dot(denc, w3.T) * np.where(a2 > 0.0, 1.0, 0.01)
    dw2 = np.dot(h1.T, dh2)
    db2 = np.sum(dh2, axis=0)
    dh1 = np.dot(dh2, w2.T) * np.where(a1 > 0.0, 1.0, 0.01)
    dw1 = np.dot(x.T, dh1)
    db1 = np.sum(dh1, axis=0)

    return (dw1, db1, dw2, db2, dw3, db3, dv1, dc1, dv2, dc2, dv3, dc3,
            np.mean(elbo), np.mean(recon), np.mean(kl))


toyvae_batch_grads_numpy = _toyvae_batch_grads_body

if NUMBA_ENABLED:
    svd_error_curve_numba = njit(cache=True)(_svd_error_curve_loops)
    toyvae_batch_grads_numba = njit(cache=True)(_toyvae_batch_grads_body)
    svd_error_curve = svd_error_curve_numba
    toyvae_batch_grads = toyvae_batch_grads_numba
else:
    svd_error_curve_numba = None
    toyvae_batch_grads_numba = None
    svd_error_curve = svd_error_curve_numpy
    toyvae_batch_grads = toyvae_batch_grads_numpy
