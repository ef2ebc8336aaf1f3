"""Forward primitives and their hand-derived gradients.

Everything here is float64 and row-oriented: a batch of vectors is an
``(n, d)`` array, one vector per row. Each primitive ``f`` has a matching
``f_backward`` (or ``f_grad`` for elementwise maps) that takes the upstream
gradient and returns the gradient with respect to the inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf, log1p

from .errors import DegenerateNorm, EmptyMask, NonPositiveTemperature, ShapeMismatch

EPS_NORM = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (or each row of ``v``) to unit L2 norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateNorm(f"cannot normalise a vector with norm <= {EPS_NORM}")
    return v / norms


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # J = I/|v| - v v^T/|v|^3, symmetric, so J^T g = (g - u (u.g)) / |v|
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norms
    proj = np.sum(u * grad_out, axis=-1, keepdims=True)
    return (grad_out - u * proj) / norms


def cosine(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine of unit vectors, i.e. their dot product (row-wise for batches)."""
    return np.sum(np.asarray(u, dtype=np.float64) * np.asarray(v, dtype=np.float64), axis=-1)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    """d gelu / dx = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {T}")


def softplus_t(x, T: float):
    """Temperature-smoothed hinge ``T * log(1 + exp(x / T))``, overflow-free."""
    _check_temperature(T)
    x = np.asarray(x, dtype=np.float64)
    # relu term kept in x units so the result never dips below max(x, 0)
    return np.maximum(x, 0.0) + T * log1p(np.exp(-np.abs(x) / T))


def softplus_t_grad(x, T: float):
    """Derivative of :func:`softplus_t` in ``x``: the logistic sigmoid of x/T."""
    _check_temperature(T)
    r = np.asarray(x, dtype=np.float64) / T
    e = np.exp(-np.abs(r))
    return np.where(r >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logsumexp_t(values, mask, T: float):
    """Masked ``(1/T) log sum exp(T v)`` along the last axis.

    Returns the reduced value(s). Every reduced row needs at least one true
    mask entry.
    """
    _check_temperature(T)
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if v.shape != m.shape:
        raise ShapeMismatch(f"values {v.shape} vs mask {m.shape}")
    if not np.all(np.any(m, axis=-1)):
        raise EmptyMask("logsumexp over an all-masked row")
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.where(m, T * v, -np.inf)
    top = np.max(scaled, axis=-1, keepdims=True)
    s = np.sum(np.where(m, np.exp(scaled - top), 0.0), axis=-1)
    return (np.squeeze(top, -1) + np.log(s)) / T


def logsumexp_t_grad(values, mask, T: float) -> np.ndarray:
    """Gradient of :func:`logsumexp_t` in ``values``: masked softmax(T v)."""
    _check_temperature(T)
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if not np.all(np.any(m, axis=-1)):
        raise EmptyMask("logsumexp over an all-masked row")
    scaled = np.where(m, T * v, -np.inf)
    top = np.max(scaled, axis=-1, keepdims=True)
    w = np.where(m, np.exp(scaled - top), 0.0)
    return w / np.sum(w, axis=-1, keepdims=True)


def linear(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``W x + b`` for a vector, or ``X W^T + b`` for a row batch."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"W {W.shape}, b {b.shape}, x {x.shape}")
    return x @ W.T + b


def linear_backward(W: np.ndarray, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(dW, db, dx)`` for :func:`linear`; batches are summed."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if x.ndim == 1:
        return np.outer(g, x), g.copy(), W.T @ g
    return g.T @ x, g.sum(axis=0), g @ W


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def grad_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-4,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    The error per coordinate is ``|a - fd| / max(1, |fd|)``. ``params`` must
    be the float64 array ``f`` reads; it is perturbed in place and restored.
    ``coords`` limits the check to that many randomly chosen coordinates.
    """
    if not (isinstance(params, np.ndarray) and params.dtype == np.float64):
        raise TypeError("grad_check perturbs params in place; pass a float64 ndarray")
    flat = params.reshape(-1)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=coords, replace=False)
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f(params)
        flat[i] = old - eps
        lo = f(params)
        flat[i] = old
        fd = (hi - lo) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
