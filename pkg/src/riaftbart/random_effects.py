"""Cluster random intercepts with a parameter-expanded variance.

``b_k ~ N(0, alpha * tau2)`` with independent ``IG(1, 1)`` priors on the
redundant scale ``alpha`` and on ``tau2``. ``alpha`` is one scalar shared by
all clusters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize, special

log = logging.getLogger(__name__)

TAU2_FLOOR = 1e-4


@dataclass
class RandomEffectsState:
    b: np.ndarray
    alpha: float = 1.0
    tau2: float = 1.0

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if not (self.alpha > 0 and self.tau2 > 0):
            raise ValueError("alpha and tau2 must be positive")

    @property
    def n_clusters(self) -> int:
        return self.b.size

    def copy(self) -> "RandomEffectsState":
        return RandomEffectsState(self.b.copy(), self.alpha, self.tau2)


def b_conditional(resid_sum, n_k, sigma2, tau2, alpha):
    """Mean and variance of ``b_k`` given the within-cluster residual sum."""
    v = tau2 * alpha
    denom = n_k * v + sigma2
    return v * resid_sum / denom, sigma2 * v / denom


def draw_b(partial_resid, state: RandomEffectsState, sigma2, rng) -> float:
    """Draw one cluster intercept from its normal full conditional.

    ``partial_resid`` holds ``y - f`` for the rows of that cluster.
    """
    partial_resid = np.asarray(partial_resid, dtype=float)
    if partial_resid.size < 1:
        raise ValueError("cluster has no rows")
    m, v = b_conditional(partial_resid.sum(), partial_resid.size, sigma2, state.tau2, state.alpha)
    return m + math.sqrt(v) * rng.standard_normal()


def draw_all_b(resid, cluster0, n_k, state: RandomEffectsState, sigma2, rng) -> np.ndarray:
    """Vectorised `draw_b` over clusters in index order (``cluster0`` is 0-based)."""
    sums = np.bincount(cluster0, weights=resid, minlength=n_k.size)
    m, v = b_conditional(sums, n_k, sigma2, state.tau2, state.alpha)
    return m + np.sqrt(v) * rng.standard_normal(n_k.size)


def alpha_conditional(state: RandomEffectsState, form: str = "exact"):
    """Shape and scale of the inverse-gamma full conditional of ``alpha``.

    ``form="exact"`` keeps the ``alpha**(-K/2)`` factor contributed by the
    ``K`` intercept densities; ``form="reduced"`` drops it (shape 1).
    """
    scale = 1.0 + float(state.b @ state.b) / (2.0 * state.tau2)
    if form == "exact":
        return 1.0 + 0.5 * state.n_clusters, scale
    if form == "reduced":
        return 1.0, scale
    raise ValueError(f"unknown alpha update form {form!r}")


def draw_alpha(state: RandomEffectsState, rng, form: str = "exact") -> float:
    shape, scale = alpha_conditional(state, form)
    return scale / rng.gamma(shape)


def tau2_conditional(state: RandomEffectsState):
    bb = float(state.b @ state.b)
    return 0.5 * state.n_clusters + 1.0, (bb + 2.0 * state.alpha) / (2.0 * state.alpha)


def draw_tau2(state: RandomEffectsState, rng) -> float:
    """Draw from ``IG(K/2 + 1, (sum b^2 + 2 alpha) / (2 alpha))``."""
    if not state.alpha > 0:
        raise ValueError("alpha must be positive")
    shape, scale = tau2_conditional(state)
    return scale / rng.gamma(shape)


def _censored_normal_regression(Z, logy, delta):
    """MLE of a lognormal AFT regression ``log T = Z beta + sigma eps``."""
    ev = delta == 1

    def nll(par):
        beta, th = par[:-1], par[-1]
        sig = math.exp(th)
        z = (logy - Z @ beta) / sig
        zc = z[~ev]
        logq = special.log_ndtr(-zc)
        val = ev.sum() * th + 0.5 * np.sum(z[ev] ** 2) - np.sum(logq)
        h = np.exp(-0.5 * zc**2 - 0.5 * math.log(2 * math.pi) - logq)
        w = np.where(ev, z, 0.0)
        w[~ev] = h
        g_beta = -(Z.T @ w) / sig
        g_th = ev.sum() - np.sum(z[ev] ** 2) - np.sum(h * zc)
        return val, np.append(g_beta, g_th)

    beta0, *_ = np.linalg.lstsq(Z, logy, rcond=None)
    sd0 = max(float(np.std(logy - Z @ beta0)), 1e-3)
    res = optimize.minimize(nll, np.append(beta0, math.log(sd0)), jac=True, method="L-BFGS-B")
    return res.x[:-1]


def _independent_columns(Z, rtol=1e-10):
    """Keep a maximal set of linearly independent columns, column 0 first."""
    if Z.shape[1] == 1:
        return Z
    _, R, piv = linalg.qr(Z[:, 1:] - Z[:, 1:].mean(axis=0), mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * max(d.max(initial=0.0), 1.0)))
    if rank < Z.shape[1] - 1:
        log.info("AFT design is rank deficient; dropping %d column(s)", Z.shape[1] - 1 - rank)
    keep = np.sort(piv[:rank]) + 1
    return Z[:, np.concatenate([[0], keep])]


def init_random_effects(data, centering, design=None):
    """Initial intercepts from a lognormal AFT regression on ``design``.

    Residuals ``log y - mu_aft - Z beta`` (censored rows as if events) are
    averaged per cluster to give ``b0``; ``tau2`` is their population
    variance floored at 1e-4, ``alpha = 1``. Also returns ``sigma0``, the
    s.d. of the pooled residuals. Linearly dependent columns of a
    rank-deficient design are dropped (pivoted QR, intercept kept).

    Returns
    -------
    (RandomEffectsState, sigma0)
    """
    logy = np.log(data.y) - centering.mu_aft
    X = data.x if design is None else np.asarray(design, dtype=float)
    Z = np.column_stack([np.ones(data.n), X]) if X.size else np.ones((data.n, 1))
    Z = _independent_columns(Z)
    if np.any(data.delta == 1) and Z.shape[1] > 1:
        beta = _censored_normal_regression(Z, logy, np.asarray(data.delta))
        fitted = Z @ beta
    else:
        fitted = np.zeros(data.n)  # intercept-only fit is the centering itself
    resid = logy - fitted
    cl = data.cluster - 1
    n_k = np.bincount(cl, minlength=data.n_clusters)
    b0 = np.bincount(cl, weights=resid, minlength=data.n_clusters) / n_k
    tau2 = max(float(np.var(b0)), TAU2_FLOOR)
    sigma0 = float(np.std(resid))
    return RandomEffectsState(b0, 1.0, tau2), sigma0
