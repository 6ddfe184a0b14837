import numpy as np

from .tensor import NumericError, Tensor, no_grad


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f()`` with respect to tensor ``x``.

    ``f`` is called with no arguments and must read ``x`` (it is perturbed in
    place and restored). Returns an array shaped like ``x``.
    """
    data = x.data
    grad = np.zeros(data.shape, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _value(f())
            flat[i] = orig - h
            fm = _value(f())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing coordinate {i}")
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def _value(v):
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).sum())


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
