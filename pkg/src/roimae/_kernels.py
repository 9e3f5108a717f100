"""Hot numeric kernels.

Each kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. Set ``ROIMAE_DISABLE_NUMBA=1`` before import to
force the numpy path (also used automatically when numba is missing).
Both paths agree to rounding; bitwise reproducibility is only promised
within one path.
"""

from __future__ import annotations

import os

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

DISABLED = os.environ.get("ROIMAE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if DISABLED:
        raise ImportError("numba disabled by ROIMAE_DISABLE_NUMBA")
    import numba

    njit = numba.njit(cache=True, nogil=True)
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path


def splitmix64_np(seed, start, n):
    idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(start)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + idx * _GAMMA
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def layer_norm_bwd_np(dy, xhat, inv, gain):
    d = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    g = dy * gain
    dx = (inv[:, None] / d) * (
        d * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def softmax_fwd_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def adamw_np(theta, g, m, v, lr, wd, b1, b2, eps, t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    theta -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta)


def ar1_np(innov, phi):
    out = np.empty_like(innov)
    out[0] = innov[0]
    for t in range(1, innov.shape[0]):
        out[t] = phi * out[t - 1] + innov[t]
    return out


def auc_pairs_np(pos, neg):
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0)
    ties = np.count_nonzero(diff == 0)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit
    def _splitmix64_nb(seed, start, n):
        out = np.empty(n, dtype=np.uint64)
        for i in range(n):
            z = seed + (start + np.uint64(i + 1)) * _GAMMA
            z = (z ^ (z >> _S30)) * _M1
            z = (z ^ (z >> _S27)) * _M2
            out[i] = z ^ (z >> _S31)
        return out

    def splitmix64_nb(seed, start, n):
        return _splitmix64_nb(np.uint64(seed), np.uint64(start), n)

    @njit
    def layer_norm_fwd_nb(x, gain, bias, eps):
        rows, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[r, j] - mu
                var += c * c
            s = 1.0 / np.sqrt(var / d + eps)
            inv[r] = s
            for j in range(d):
                h = (x[r, j] - mu) * s
                xhat[r, j] = h
                y[r, j] = h * gain[j] + bias[j]
        return y, xhat, inv

    @njit
    def layer_norm_bwd_nb(dy, xhat, inv, gain):
        rows, d = dy.shape
        dx = np.empty_like(dy)
        dgain = np.zeros(d)
        dbias = np.zeros(d)
        for r in range(rows):
            sg = 0.0
            sgx = 0.0
            for j in range(d):
                g = dy[r, j] * gain[j]
                sg += g
                sgx += g * xhat[r, j]
                dgain[j] += dy[r, j] * xhat[r, j]
                dbias[j] += dy[r, j]
            k = inv[r] / d
            for j in range(d):
                dx[r, j] = k * (d * dy[r, j] * gain[j] - sg - xhat[r, j] * sgx)
        return dx, dgain, dbias

    @njit
    def softmax_fwd_nb(x):
        rows, d = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            mx = x[r, 0]
            for j in range(1, d):
                if x[r, j] > mx:
                    mx = x[r, j]
            s = 0.0
            for j in range(d):
                e = np.exp(x[r, j] - mx)
                y[r, j] = e
                s += e
            for j in range(d):
                y[r, j] /= s
        return y

    @njit
    def softmax_bwd_nb(y, dy):
        rows, d = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for j in range(d):
                s += dy[r, j] * y[r, j]
            for j in range(d):
                dx[r, j] = y[r, j] * (dy[r, j] - s)
        return dx

    @njit
    def _adamw_nb(theta, g, m, v, lr, wd, b1, b2, eps, c1, c2):
        for i in range(theta.size):
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            mhat = m[i] / c1
            vhat = v[i] / c2
            theta[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta[i])

    def adamw_nb(theta, g, m, v, lr, wd, b1, b2, eps, t):
        _adamw_nb(
            theta.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
            lr, wd, b1, b2, eps, 1.0 - b1**t, 1.0 - b2**t,
        )

    @njit
    def ar1_nb(innov, phi):
        out = np.empty_like(innov)
        n, k = innov.shape
        for j in range(k):
            out[0, j] = innov[0, j]
        for t in range(1, n):
            for j in range(k):
                out[t, j] = phi * out[t - 1, j] + innov[t, j]
        return out

    @njit
    def auc_pairs_nb(pos, neg):
        acc = 0.0
        for i in range(pos.size):
            for j in range(neg.size):
                if pos[i] > neg[j]:
                    acc += 1.0
                elif pos[i] == neg[j]:
                    acc += 0.5
        return acc / (pos.size * neg.size)

    splitmix64 = splitmix64_nb
    layer_norm_fwd = layer_norm_fwd_nb
    layer_norm_bwd = layer_norm_bwd_nb
    # numpy's vectorised exp beats the scalar loop (see benchmarks/)
    softmax_fwd = softmax_fwd_np
    softmax_bwd = softmax_bwd_nb
    adamw = adamw_nb
    ar1 = ar1_nb
    auc_pairs = auc_pairs_nb
else:
    splitmix64 = splitmix64_np
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    softmax_fwd = softmax_fwd_np
    softmax_bwd = softmax_bwd_np
    adamw = adamw_np
    ar1 = ar1_np
    auc_pairs = auc_pairs_np

BACKEND = "numba" if HAVE_NUMBA else "numpy"
