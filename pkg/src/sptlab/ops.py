"""Differentiable primitives with hand-written backward passes.

The whole training pipeline is built from a closed operator set: dense maps,
a tanh-form GELU, layer normalization, row-wise softmax, and L2 row
normalization.  Each ``*_bwd`` consumes the cache returned by its forward and
the upstream gradient, and returns exact analytic gradients.  Everything is
float64; gradient correctness is enforced against central finite differences
in the test suite.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "dense", "dense_bwd",
    "gelu", "gelu_bwd",
    "layer_norm", "layer_norm_bwd",
    "softmax_last",
    "normalize_rows", "normalize_rows_bwd",
    "fd_gradients", "max_relative_error",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b over the last axis."""
    return x @ w + b, (x, w)


def dense_bwd(cache, dy):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


def gelu(x: np.ndarray):
    """Smooth GELU (tanh form)."""
    x2 = x * x
    inner = x2 * x
    inner *= _GELU_A
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, (x, x2, t)


def gelu_bwd(cache, dy):
    x, x2, t = cache
    dinner = x2 * (3.0 * _GELU_A)
    dinner += 1.0
    dinner *= _GELU_C
    dinner *= 1.0 - t * t
    dinner *= x
    dinner += 1.0 + t
    dinner *= 0.5
    dinner *= dy
    return dinner


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return gain * x_hat + bias, (x_hat, inv_std, gain)


def layer_norm_bwd(cache, dy):
    x_hat, inv_std, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * x_hat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * x_hat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - x_hat * m2)
    return dx, dgain, dbias


def softmax_last(x: np.ndarray, overwrite: bool = False) -> np.ndarray:
    """Numerically stable softmax over the last axis; tolerates -inf entries.

    With ``overwrite`` the input buffer is consumed in place.
    """
    work = x if overwrite else x.copy()
    work -= np.max(work, axis=-1, keepdims=True)
    np.exp(work, out=work)
    work /= work.sum(axis=-1, keepdims=True)
    return work


def normalize_rows(z: np.ndarray, eps: float = 0.0):
    """L2-normalize rows of a 2-D array.  Zero-norm rows are an error."""
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms <= eps):
        raise ValueError("cannot L2-normalize a zero-norm row")
    return z / norms, (z / norms, norms)


def normalize_rows_bwd(cache, du):
    u, norms = cache
    return (du - u * (du * u).sum(axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# gradient verification helpers
# ---------------------------------------------------------------------------

def fd_gradients(fn, arrays: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function for every array entry.

    ``fn`` is called with the (mutated-in-place, then restored) dict; arrays
    must be float64.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(arrays)
            flat[i] = orig - step
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict[str, np.ndarray],
                       numeric: dict[str, np.ndarray]) -> dict[str, float]:
    """Per-tensor max |a - n| normalized by the larger tensor magnitude."""
    report = {}
    for name in analytic:
        a, n = analytic[name], numeric[name]
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
        diff = np.max(np.abs(a - n), initial=0.0)
        report[name] = float(diff / (scale + 1e-12))
    return report
