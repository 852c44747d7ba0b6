"""Dense-array primitives shared by every stage of the pipeline.

Arrays are plain ``numpy.ndarray`` objects (float64 by default).  Every
differentiable op comes as a forward function plus a ``*_backward``
companion that maps an upstream gradient to input gradients; nothing here
records a tape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float64
COSINE_EPS = 1e-8
FD_STEP = 1e-5


class NumericalError(ArithmeticError):
    """Raised when a NaN/Inf shows up where a finite value is required."""


def check_finite(name: str, x) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {name}")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; identical across platforms for a seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn_rng(rng: np.random.Generator) -> np.random.Generator:
    """Independent child stream drawn from ``rng``."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = np.asarray(x)
    check_finite("softmax input", x)
    z = x / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1, temperature=1.0, x=None):
    """Gradient of ``softmax(x / T)``.

    Returns ``dx``, or ``(dx, dT)`` when the pre-softmax input ``x`` is given.
    """
    dz = y * (dy - np.sum(dy * y, axis=axis, keepdims=True))
    dx = dz / temperature
    if x is None:
        return dx
    dT = -np.sum(dz * x) / temperature**2
    return dx, dT


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# layer norm (last axis)
# --------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale+shift.

    Returns ``(y, cache)``.  Rows with zero variance and ``eps == 0`` map to
    zero before the affine part.
    """
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over a zero-length axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    y = xhat * gain + bias
    return y, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    lead = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=lead)
    dbias = np.sum(dy, axis=lead)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain, dbias


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------

def scaled_dot_attention(Q, K, V):
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes.

    Leading axes are treated as batch.  Returns ``(out, weights)``.
    """
    d = Q.shape[-1]
    if d == 0:
        raise ValueError("attention with zero inner dimension")
    if K.shape[-1] != d:
        raise ValueError("Q and K inner dimensions differ")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError("K and V sequence lengths differ")
    scores = (Q @ np.swapaxes(K, -1, -2)) / np.sqrt(d)
    w = softmax(scores, axis=-1)
    return w @ V, w


def scaled_dot_attention_backward(dout, Q, K, V, w):
    d = Q.shape[-1]
    dV = np.swapaxes(w, -1, -2) @ dout
    dw = dout @ np.swapaxes(V, -1, -2)
    ds = softmax_backward(dw, w, axis=-1) / np.sqrt(d)
    dQ = ds @ K
    dK = np.swapaxes(ds, -1, -2) @ Q
    return dQ, dK, dV


# --------------------------------------------------------------------------
# cosine similarity (last axis)
# --------------------------------------------------------------------------

def cosine_similarity(a, b, eps=COSINE_EPS):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = np.maximum(na * nb, eps)
    return np.sum(a * b, axis=-1) / denom


def cosine_similarity_backward(dcos, a, b, eps=COSINE_EPS):
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    prod = na * nb
    dot = np.sum(a * b, axis=-1, keepdims=True)
    dcos = np.asarray(dcos)[..., None]
    live = prod > eps
    safe = np.where(live, prod, 1.0)
    na2 = np.where(na > 0, na * na, 1.0)
    nb2 = np.where(nb > 0, nb * nb, 1.0)
    cos = dot / safe
    da_live = b / safe - cos * a / na2
    db_live = a / safe - cos * b / nb2
    da = dcos * np.where(live, da_live, b / eps)
    db = dcos * np.where(live, db_live, a / eps)
    return da, db


# --------------------------------------------------------------------------
# small elementwise pieces
# --------------------------------------------------------------------------

def sigmoid(x):
    return expit(x)


def logit(p):
    p = np.asarray(p)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = FD_STEP):
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=float, copy=True)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.ravel(np.asarray(analytic, dtype=float))
    n = np.ravel(np.asarray(numeric, dtype=float))
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
