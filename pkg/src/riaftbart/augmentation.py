"""Imputation of right-censored log-times from lower-truncated normals."""

from __future__ import annotations

import numpy as np
from scipy import special

# standardized truncation point above which the exponential rejection sampler is used
TAIL_SWITCH = 4.0


def _std_tail(alpha, rng):
    """Standard normal draws conditioned on ``z > alpha``, elementwise.

    Inverse CDF on the upper tail for ``alpha < TAIL_SWITCH``; Robert's
    translated-exponential rejection sampler otherwise.
    """
    alpha = np.asarray(alpha, dtype=float)
    out = np.empty_like(alpha)
    body = alpha < TAIL_SWITCH
    if body.any():
        a = alpha[body]
        u = 1.0 - rng.random(a.size)  # in (0, 1]
        out[body] = -special.ndtri(u * special.ndtr(-a))
    tail = np.flatnonzero(~body)
    if tail.size:
        a = alpha[tail]
        lam = 0.5 * (a + np.sqrt(a * a + 4.0))
        todo = np.arange(tail.size)
        while todo.size:
            z = a[todo] + rng.exponential(size=todo.size) / lam[todo]
            ok = rng.random(todo.size) <= np.exp(-0.5 * (z - lam[todo]) ** 2)
            out[tail[todo[ok]]] = z[ok]
            todo = todo[~ok]
    return np.maximum(out, alpha)


def draw_truncated_normal(mean, sd, lower, rng):
    """Draw from ``N(mean, sd**2)`` conditioned on exceeding ``lower``.

    Vectorised over broadcastable arguments; the result is strictly above
    ``lower``.
    """
    mean, sd, lower = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, sd, lower)))
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    z = _std_tail((lower - mean) / sd, rng)
    x = mean + sd * z
    x = np.where(x > lower, x, np.nextafter(lower, np.inf))
    return x if x.ndim else float(x)


def impute_censored(z_obs, delta, mean, sigma2, rng, out=None):
    """Complete-data centered log-times.

    Event rows copy ``z_obs``; censored rows are drawn from
    ``N(mean, sigma2)`` truncated below at their observed value.
    """
    z_obs = np.asarray(z_obs, dtype=float)
    z = z_obs.copy() if out is None else out
    cens = np.flatnonzero(np.asarray(delta) == 0)
    if cens.size:
        z[cens] = draw_truncated_normal(np.asarray(mean)[cens], np.sqrt(sigma2), z_obs[cens], rng)
    return z
