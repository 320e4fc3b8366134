"""Small log-space helpers shared across modules."""

import numpy as np

# log of (roughly) the smallest positive double; likelihood floor before exponentiation
LOG_FLOOR = -745.0


def logsumexp(a, axis=None, keepdims=False):
    """Stable ``log(sum(exp(a)))``.

    Written as ``max + log(sum(exp(a - max)))`` so that the result is never
    below ``max(a)`` in floating point, which the contrastive bounds rely on
    for their exact ``log(L+1)`` cap.  All ``-inf`` slices give ``-inf``.
    """
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if np.ndim(out) else float(out)


def normalize_log_weights(log_weights):
    lw = np.asarray(log_weights, dtype=float)
    return lw - logsumexp(lw)


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - amax)
    return e / np.sum(e, axis=axis, keepdims=True)
