"""Backend selection for the hot numeric kernels.

The compiled extension is preferred; the NumPy fallback is used when the
extension is missing or ``ADAPTER_UDA_PURE_PYTHON`` is set to a truthy value.
Callers pass arrays of any shape to the elementwise kernels; 2-D kernels take
``(rows, features)`` arrays. This wrapper normalizes layout and dtype so both
backends see identical inputs.
"""

import os

import numpy as np

from . import _pykernels

_FORCE_PY = os.environ.get("ADAPTER_UDA_PURE_PYTHON", "").lower() in ("1", "true", "yes")

try:
    if _FORCE_PY:
        raise ImportError("pure-python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def gelu_forward(x, impl=None):
    impl = impl or _impl
    x = _c(x)
    return impl.gelu_forward(x.reshape(-1)).reshape(x.shape)


def gelu_backward(x, gy, impl=None):
    impl = impl or _impl
    x = _c(x)
    return impl.gelu_backward(x.reshape(-1), _c(gy, x.dtype).reshape(-1)).reshape(x.shape)


def layer_norm_forward(x2d, gamma, beta, eps, impl=None):
    impl = impl or _impl
    x2d = _c(x2d)
    dt = x2d.dtype
    return impl.layer_norm_forward(x2d, _c(gamma, dt), _c(beta, dt), float(eps))


def layer_norm_backward(gy2d, xhat, rstd, gamma, impl=None):
    impl = impl or _impl
    dt = xhat.dtype
    return impl.layer_norm_backward(_c(gy2d, dt), _c(xhat), _c(rstd, dt), _c(gamma, dt))


def softmax_forward(x2d, impl=None):
    impl = impl or _impl
    return impl.softmax_forward(_c(x2d))


def softmax_backward(y2d, gy2d, impl=None):
    impl = impl or _impl
    y2d = _c(y2d)
    return impl.softmax_backward(y2d, _c(gy2d, y2d.dtype))


def cross_entropy_forward(logits, targets, weights, impl=None):
    impl = impl or _impl
    logits = _c(logits)
    return impl.cross_entropy_forward(logits, _c(targets, np.int64), _c(weights, logits.dtype))


def cross_entropy_backward(probs, targets, weights, scale, impl=None):
    impl = impl or _impl
    probs = _c(probs)
    return impl.cross_entropy_backward(
        probs, _c(targets, np.int64), _c(weights, probs.dtype), float(scale)
    )


def scatter_add_rows(n_rows, index, g2d, impl=None):
    impl = impl or _impl
    return impl.scatter_add_rows(int(n_rows), _c(index, np.int64).reshape(-1), _c(g2d))
