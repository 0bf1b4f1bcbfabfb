"""Vectorized NumPy implementations of the hot numeric kernels.

This is the fallback used when the compiled ``_ckernels`` extension is not
available (or when ``ADAPTER_UDA_PURE_PYTHON=1``). Every function here has a
twin with the identical signature in ``_ckernels.pyx``.

All 2-D kernels operate on C-contiguous float32/float64 arrays; row ``i`` is
one independent vector.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    return y, xhat, rstd.reshape(-1)


def layer_norm_backward(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def cross_entropy_forward(logits, targets, weights):
    """Return (weighted summed NLL, probabilities)."""
    probs = softmax_forward(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(targets)), targets]
    return float((nll * weights).sum()), probs


def cross_entropy_backward(probs, targets, weights, scale):
    g = probs.copy()
    g[np.arange(len(targets)), targets] -= 1.0
    g *= (weights * scale)[:, None]
    return g.astype(probs.dtype, copy=False)


def scatter_add_rows(n_rows, index, g):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    np.add.at(out, index, g)
    return out
