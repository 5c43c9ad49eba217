"""Small numeric helpers used across engines.

Inner products that feed argmax decisions go through :func:`fsum_dot`, which
is correctly rounded. Zero entries contribute exactly nothing to a correctly
rounded sum, so a template and its zero-padded copy score bit-identically.
"""
import math

import numpy as np


def fsum_dot(weights, x):
    """Correctly rounded inner products of each row of ``weights`` with ``x``.

    ``weights`` has shape ``(..., D)`` and ``x`` shape ``(D,)``; the result has
    shape ``weights.shape[:-1]``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    prods = (weights * np.asarray(x, dtype=np.float64)).reshape(-1, weights.shape[-1])
    out = np.fromiter((math.fsum(row) for row in prods), dtype=np.float64, count=prods.shape[0])
    return out.reshape(weights.shape[:-1])


def fsum_sq(weights):
    """Correctly rounded squared norms of the rows of ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    return _fsum_rows(weights * weights)


def _fsum_rows(a):
    flat = a.reshape(-1, a.shape[-1])
    out = np.fromiter((math.fsum(row) for row in flat), dtype=np.float64, count=flat.shape[0])
    return out.reshape(a.shape[:-1])


def safe_log(p):
    """Elementwise log with ``log(0) = -inf`` and no warnings."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p)


def log_prior_product(class_prior, nuisance_prior):
    """``ln(pi_c * pi_g)`` as a ``(C, G)`` table."""
    return safe_log(np.outer(class_prior, nuisance_prior))


def logsumexp(a, axis=None):
    """Overflow-safe ``log(sum(exp(a)))``; all ``-inf`` input gives ``-inf``."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m_safe
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def first_argmax(a):
    """Index of the maximum, lowest flat index on ties (C order)."""
    a = np.asarray(a)
    return np.unravel_index(int(np.argmax(a)), a.shape)


def as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
