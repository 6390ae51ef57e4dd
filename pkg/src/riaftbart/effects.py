"""Posterior causal contrasts between treatment arms.

All functionals are computed per retained draw from the counterfactual
``f`` evaluations in a `PosteriorStore`; a point estimate is the posterior
mean and the interval is equal-tailed over draws.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .exceptions import DataError

SCALES = ("logtime", "surv", "rmst")
DEFAULT_GRID = 2048


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    """Posterior summary of one pairwise contrast.

    Attributes
    ----------
    pair : (str, str)
        Treatment labels ``(a_j, a_j')``; the contrast is ``a_j - a_j'``.
    scale : str
        ``"logtime"``, ``"surv"`` or ``"rmst"``.
    estimate : float
        Posterior mean of ``draws``.
    lower, upper : float
        Equal-tail interval at ``level``.
    draws : ndarray
        One functional per posterior draw.
    """

    pair: tuple
    scale: str
    estimate: float
    lower: float
    upper: float
    level: float
    draws: np.ndarray = field(repr=False)
    t_star: float | None = None

    @classmethod
    def from_draws(cls, pair, scale, draws, level=0.95, t_star=None) -> "EffectEstimate":
        draws = np.asarray(draws, dtype=float)
        if not 0 < level < 1:
            raise ValueError("level must lie in (0, 1)")
        lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2])
        return cls(tuple(str(p) for p in pair), scale, float(draws.mean()), float(lo), float(hi), level, draws, t_star)

    @property
    def sd(self) -> float:
        return float(self.draws.std(ddof=1)) if self.draws.size > 1 else 0.0

    def row(self) -> dict:
        return {
            "pair": f"{self.pair[0]}:{self.pair[1]}", "scale": self.scale, "estimate": repr(self.estimate),
            "lower": repr(self.lower), "upper": repr(self.upper),
        }


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Group survival curve, one row of ``values`` per posterior draw."""

    arm: str
    grid: np.ndarray
    values: np.ndarray

    def summary(self, level=0.95):
        lo, hi = np.quantile(self.values, [(1 - level) / 2, (1 + level) / 2], axis=0)
        return self.values.mean(axis=0), lo, hi


def _arms(store, a_j, a_jp):
    return store.arm(a_j), store.arm(a_jp)


def _arm_means(store, rows=None) -> np.ndarray:
    """Per-draw mean of ``f`` under each arm, shape (D, J)."""
    f = store.f_cf if rows is None else store.f_cf[:, :, rows]
    return f.mean(axis=2)


def cate(store, a_j, a_jp, level=0.95) -> EffectEstimate:
    """Average over all N rows of ``f(a_j, x) - f(a_j', x)`` per draw.

    The cluster intercepts cancel in the difference.
    """
    j, jp = _arms(store, a_j, a_jp)
    m = _arm_means(store)
    return EffectEstimate.from_draws((a_j, a_jp), "logtime", m[:, j] - m[:, jp], level)


def catt(store, a_j, a_jp, level=0.95) -> EffectEstimate:
    """As `cate`, averaging only over rows observed on ``a_j``."""
    j, jp = _arms(store, a_j, a_jp)
    rows = np.flatnonzero(store.a == j + 1)
    if rows.size == 0:
        raise DataError(f"no rows observed on treatment {a_j!r}")
    m = _arm_means(store, rows)
    return EffectEstimate.from_draws((a_j, a_jp), "logtime", m[:, j] - m[:, jp], level)


def time_grid(t_star, size=DEFAULT_GRID) -> np.ndarray:
    """``size`` equally spaced points on ``[0, t_star]``."""
    if not t_star > 0:
        raise ValueError("t_star must be positive")
    if size < 2:
        raise ValueError("grid needs at least two points")
    return np.linspace(0.0, float(t_star), int(size))


def _survival_draws(store, j, grid) -> np.ndarray:
    """(D, G) matrix of group-averaged survival under arm index ``j``."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be ascending and non-negative")
    with np.errstate(divide="ignore"):
        logt = np.log(grid)
    cl = store.cluster - 1
    out = np.empty((store.n_draws, grid.size))
    sig = np.sqrt(store.sigma2)
    for d in range(store.n_draws):
        m = store.f_cf[d, j] + store.b[d, cl]
        z = (logt[:, None] - m[None, :]) / sig[d]
        out[d] = special.ndtr(-z).mean(axis=1)
    return out


def counterfactual_survival(store, arm, grid) -> SurvivalCurve:
    """Average over individuals of ``1 - Phi((log t - f - b_k) / sigma)``.

    Each individual's own cluster intercept draw enters. ``t = 0`` maps to
    survival 1; negative times are rejected.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0):
        raise ValueError("grid contains a negative time")
    return SurvivalCurve(str(arm), grid, _survival_draws(store, store.arm(arm), grid))


def rmst(curve: SurvivalCurve, t_star) -> np.ndarray:
    """Trapezoidal area under each draw's curve on ``[0, t_star]``."""
    g = curve.grid
    if not t_star > 0:
        raise ValueError("t_star must be positive")
    if g[0] > 0 or g[-1] < t_star * (1 - 1e-12):
        raise ValueError(f"grid [{g[0]}, {g[-1]}] does not cover [0, {t_star}]")
    keep = g <= t_star
    gg, vv = g[keep], curve.values[:, keep]
    if gg[-1] < t_star:  # close the last panel by linear interpolation
        nxt = np.searchsorted(g, t_star)
        w = (t_star - g[nxt - 1]) / (g[nxt] - g[nxt - 1])
        vend = curve.values[:, nxt - 1] * (1 - w) + curve.values[:, nxt] * w
        gg = np.append(gg, t_star)
        vv = np.column_stack([vv, vend])
    return integrate.trapezoid(vv, gg, axis=1)


def rmst_lognormal(mu, sigma, t_star):
    """Exact ``E[min(T, t_star)]`` for ``log T ~ N(mu, sigma^2)`` (vectorised)."""
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    lt = np.log(t_star)
    return (np.exp(mu + 0.5 * sigma**2) * special.ndtr((lt - mu - sigma**2) / sigma)
            + t_star * special.ndtr(-(lt - mu) / sigma))


def survival_prob_effect(store, a_j, a_jp, t_star, level=0.95) -> EffectEstimate:
    """Difference of group survival probabilities at ``t_star``."""
    j, jp = _arms(store, a_j, a_jp)
    g = np.array([float(t_star)])
    if not t_star > 0:
        raise ValueError("t_star must be positive")
    d = _survival_draws(store, j, g)[:, 0] - _survival_draws(store, jp, g)[:, 0]
    return EffectEstimate.from_draws((a_j, a_jp), "surv", d, level, float(t_star))


def rmst_effect(store, a_j, a_jp, t_star, level=0.95, grid_size=DEFAULT_GRID, method="trapezoid") -> EffectEstimate:
    """Difference of restricted mean survival times up to ``t_star``.

    ``method="trapezoid"`` integrates the group curves on a uniform grid;
    ``method="exact"`` uses the closed-form lognormal restricted mean of each
    individual (much cheaper for large stores).
    """
    j, jp = _arms(store, a_j, a_jp)
    if method == "trapezoid":
        grid = time_grid(t_star, grid_size)
        r = [rmst(SurvivalCurve("", grid, _survival_draws(store, k, grid)), t_star) for k in (j, jp)]
    elif method == "exact":
        cl = store.cluster - 1
        sig = np.sqrt(store.sigma2)[:, None]
        r = [rmst_lognormal(store.f_cf[:, k] + store.b[:, cl], sig, t_star).mean(axis=1) for k in (j, jp)]
    else:
        raise ValueError(f"unknown RMST method {method!r}")
    return EffectEstimate.from_draws((a_j, a_jp), "rmst", r[0] - r[1], level, float(t_star))


def estimate(store, a_j, a_jp, scale="logtime", t_star=None, level=0.95, **kw) -> EffectEstimate:
    """Dispatch on ``scale``."""
    if scale == "logtime":
        return cate(store, a_j, a_jp, level)
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}")
    if t_star is None:
        raise ValueError(f"scale {scale!r} needs t_star")
    if scale == "surv":
        return survival_prob_effect(store, a_j, a_jp, t_star, level)
    return rmst_effect(store, a_j, a_jp, t_star, level, **kw)


def write_effects(estimates, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["pair", "scale", "estimate", "lower", "upper"], lineterminator="\n")
        w.writeheader()
        for e in estimates:
            w.writerow(e.row())
    return path


def write_curves(curves, path, level=0.95) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "t", "mean", "lower", "upper"])
        for c in curves:
            m, lo, hi = c.summary(level)
            for i, t in enumerate(c.grid):
                w.writerow([c.arm, repr(float(t)), repr(float(m[i])), repr(float(lo[i])), repr(float(hi[i]))])
    return path
