"""Confounding-function sensitivity analysis for unmeasured confounding.

For each ordered arm pair ``(j, m)`` the confounding function

    c(j, m | x, v) = E[log T(j) | A=j, x, v] - E[log T(j) | A=m, x, v]

is a sensitivity parameter. Given generalized propensity scores ``p`` the
complete-data log-time of a row on arm ``j`` is shifted by

    s = sum_{m != j} p_m c(j, m),

which removes the confounding bias from the outcome-model contrasts. The
analysis repeats the fit over ``Q1`` GPS draws times ``Q2`` confounding
draws and pools the posterior draws.
"""

from __future__ import annotations

import configparser
import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special, stats

from . import effects
from .exceptions import DataError, NumericalError
from .rng import CONFOUNDING, GPS, stream
from .sampler import SamplerConfig, fit

SIGNS = ("+", "-", "free")


# ---------------------------------------------------------------------------
# confounding-function priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CfPrior:
    """Prior of one confounding function.

    A uniform prior on ``[0, B]`` (sign ``+``), ``[-B, 0]`` (``-``) or
    ``[-B, B]`` (``free``). With ``relative=True`` the bound is in units of
    the residual standard deviation ``sigma_hat``. A ``value`` (scalar or one
    entry per row) makes the prior a point mass.
    """

    sign: str = "free"
    bound: float = 0.0
    relative: bool = False
    value: object = None

    def __post_init__(self):
        if self.sign not in SIGNS:
            raise ValueError(f"sign must be one of {SIGNS}, got {self.sign!r}")
        if not self.bound >= 0:
            raise ValueError("bound must be non-negative")

    @property
    def is_point(self) -> bool:
        return self.value is not None

    def interval(self, sigma_hat=None):
        b = self.bound
        if self.relative:
            if sigma_hat is None:
                raise ValueError("relative bounds need sigma_hat")
            b *= sigma_hat
        return {"+": (0.0, b), "-": (-b, 0.0), "free": (-b, b)}[self.sign]

    def describe(self) -> str:
        if self.is_point:
            v = np.asarray(self.value)
            return f"point {float(v)!r}" if v.ndim == 0 else "point per-row"
        return f"{self.sign} {self.bound!r}{' sd' if self.relative else ''}"


@dataclass(frozen=True)
class ConfoundingSpec:
    """Priors for all ``J (J - 1)`` ordered pairs (missing pairs use ``default``)."""

    J: int
    priors: dict = field(default_factory=dict)
    default: CfPrior = CfPrior()
    name: str = "spec"

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("need at least two arms")
        for (j, m) in self.priors:
            if not (1 <= j <= self.J and 1 <= m <= self.J) or j == m:
                raise ValueError(f"invalid ordered pair ({j}, {m}) for J={self.J}")

    def prior(self, j, m) -> CfPrior:
        return self.priors.get((j, m), self.default)

    @property
    def pairs(self):
        return [(j, m) for j in range(1, self.J + 1) for m in range(1, self.J + 1) if j != m]

    @property
    def needs_sigma(self) -> bool:
        return any(self.prior(j, m).relative and not self.prior(j, m).is_point for j, m in self.pairs)

    @classmethod
    def zero(cls, J, name="zero") -> "ConfoundingSpec":
        return cls(J, {}, CfPrior("free", 0.0), name)

    @classmethod
    def point_mass(cls, values: dict, J, name="point") -> "ConfoundingSpec":
        """Degenerate priors at known confounding functions (scalars or per-row arrays)."""
        return cls(J, {k: CfPrior(value=v) for k, v in values.items()}, CfPrior("free", 0.0), name)

    def signs_text(self) -> str:
        return ";".join(f"{j}:{m}={self.prior(j, m).sign}" for j, m in self.pairs)

    def bounds_text(self) -> str:
        return ";".join(f"{j}:{m}={self.prior(j, m).describe()}" for j, m in self.pairs)


def _parse_prior(text: str) -> CfPrior:
    tok = text.split()
    if not tok:
        raise ValueError("empty prior")
    if tok[0] == "point":
        if len(tok) != 2:
            raise ValueError(f"expected 'point <value>', got {text!r}")
        return CfPrior(value=float(tok[1]))
    if tok[0] not in SIGNS or len(tok) not in (2, 3) or (len(tok) == 3 and tok[2] != "sd"):
        raise ValueError(f"expected '<+|-|free> <bound> [sd]', got {text!r}")
    return CfPrior(tok[0], float(tok[1]), len(tok) == 3)


def load_spec_file(path, J: int) -> list:
    """Read scenario sections from an INI file.

    Each ``[name]`` section maps ordered pairs to priors, e.g.::

        [healthier-on-1]
        1:2 = + 0.675
        2:1 = - 0.675
        default = free 0

    A bound followed by ``sd`` is relative to the residual s.d.;
    ``point <value>`` gives a point mass.
    """
    cp = configparser.ConfigParser(delimiters=("=",))  # keys contain ':'
    try:
        if not cp.read(path):
            raise DataError(f"confounding spec file not found: {path}")
    except configparser.Error as e:
        raise DataError(f"malformed confounding spec file: {e}") from None
    out = []
    for sec in cp.sections():
        priors, default = {}, CfPrior("free", 0.0)
        for key, val in cp[sec].items():
            try:
                pr = _parse_prior(val)
                if key == "default":
                    default = pr
                    continue
                j, m = (int(t) for t in key.split(":"))
                priors[(j, m)] = pr
            except ValueError as e:
                raise DataError(f"malformed entry {key!r} in section [{sec}]: {e}") from None
        try:
            out.append(ConfoundingSpec(J, priors, default, sec))
        except ValueError as e:
            raise DataError(f"section [{sec}]: {e}") from None
    if not out:
        raise DataError("confounding spec file has no scenario sections")
    return out


def draw_confounding(spec: ConfoundingSpec, Q2: int, rng, sigma_hat=None) -> list:
    """``Q2`` sets of confounding values, one dict ``{(j, m): value}`` per set.

    Uniform draws are constants in ``(x, v)``; point masses are returned as
    given. Pairs are drawn in a fixed order.
    """
    if Q2 < 1:
        raise ValueError("Q2 must be at least 1")
    out = []
    for _ in range(Q2):
        g = {}
        for j, m in spec.pairs:
            pr = spec.prior(j, m)
            if pr.is_point:
                g[(j, m)] = pr.value
            else:
                lo, hi = pr.interval(sigma_hat)
                g[(j, m)] = lo + (hi - lo) * rng.random() if hi > lo else 0.0
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# generalized propensity scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GpsDraws:
    """``Q1`` matrices of ``P(A = a_m | x, v)``, shape (Q1, N, J)."""

    probs: np.ndarray
    method: str = "multilogit"

    def __post_init__(self):
        p = self.probs
        if p.ndim != 3:
            raise ValueError("GPS draws must have shape (Q1, N, J)")
        if np.any(p <= 0) or np.any(p >= 1) or np.max(np.abs(p.sum(axis=2) - 1)) > 1e-10:
            raise NumericalError("GPS draws are not strictly inside the simplex")

    @property
    def Q1(self) -> int:
        return self.probs.shape[0]


def _standardize(x):
    if x.shape[1] == 0:
        return x
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd


def fit_multilogit(Z, a, cluster, J, K, weights, cluster_sd=1.0, ridge=1e-4, max_coef=30.0, labels=None):
    """Weighted multinomial logit with penalized cluster intercepts.

    Arm ``J`` is the reference. ``Z`` includes the intercept column. The
    cluster intercepts (one per non-reference arm) carry a Gaussian penalty
    with s.d. ``cluster_sd``; the slope coefficients a small ridge.

    Returns the fitted (N, J) probability matrix.
    """
    N, P = Z.shape
    L = J - 1
    Y = np.zeros((N, J))
    Y[np.arange(N), a - 1] = 1.0
    cl = cluster - 1
    pen = np.full(P, ridge)
    pen[0] = 0.0
    prec_u = 1.0 / cluster_sd**2 if K > 1 and cluster_sd > 0 else 0.0

    def unpack(th):
        return th[: P * L].reshape(P, L), th[P * L:].reshape(K, L)

    def obj(th):
        B, U = unpack(th)
        eta = np.column_stack([Z @ B + U[cl], np.zeros(N)])
        lse = special.logsumexp(eta, axis=1)
        val = -np.sum(weights * (np.sum(Y * eta, axis=1) - lse))
        val += 0.5 * np.sum(pen[:, None] * B**2) + 0.5 * prec_u * np.sum(U**2)
        Pm = np.exp(eta - lse[:, None])
        R = weights[:, None] * (Pm[:, :L] - Y[:, :L])
        gB = Z.T @ R + pen[:, None] * B
        gU = np.stack([np.bincount(cl, weights=R[:, l], minlength=K) for l in range(L)], axis=1) + prec_u * U
        return val, np.concatenate([gB.ravel(), gU.ravel()])

    th0 = np.zeros(P * L + K * L)
    share = np.array([np.sum(weights * (a == j)) for j in range(1, J + 1)]) / weights.sum()
    th0[:L] = np.log(share[:L] / share[L])  # intercepts at the marginal log-odds
    res = optimize.minimize(obj, th0, jac=True, method="L-BFGS-B", options={"maxiter": 2000})
    B, U = unpack(res.x)
    big = np.abs(np.vstack([B[1:], U])) > max_coef if P > 1 or K > 1 else np.zeros((1, L), bool)
    if not np.all(np.isfinite(res.x)) or big.any():
        arm = int(np.argmax(big.any(axis=0))) if big.any() else 0
        lab = labels[arm] if labels else str(arm + 1)
        raise NumericalError(f"GPS fit degenerate (separation) for treatment level {lab!r}", res.x)
    eta = np.column_stack([Z @ B + U[cl], np.zeros(N)])
    return special.softmax(eta, axis=1)


def estimate_gps(data, Q1: int = 30, seed: int = 0, method="multilogit", cluster_sd=1.0, clip=1e-12) -> GpsDraws:
    """``Q1`` GPS matrices by Bayesian-bootstrap refits of the estimator.

    Draw ``q`` reweights the rows with ``N * Dirichlet(1, ..., 1)`` weights
    from the ``(seed, 1, q)`` stream and refits. Unmeasured columns are not
    used. ``method`` may also be a
    callable ``(data, weights) -> (N, J) probabilities``.
    """
    if Q1 < 1:
        raise ValueError("Q1 must be at least 1")
    J, K = data.n_treatments, data.n_clusters
    counts = np.bincount(data.a, minlength=J + 1)[1:]
    for j in range(J):
        if counts[j] < 2:
            raise DataError(f"treatment level {data.trt_labels[j]!r} has fewer than 2 rows; GPS not estimable")
    if callable(method):
        estimator, name = method, getattr(method, "__name__", "custom")
    elif method == "multilogit":
        x = data.measured().x if data.unmeasured else np.asarray(data.x)
        Z = np.column_stack([np.ones(data.n), _standardize(x)])

        def estimator(d, w):
            return fit_multilogit(Z, np.asarray(d.a), np.asarray(d.cluster), J, K, w, cluster_sd, labels=d.trt_labels)

        name = method
    else:
        raise ValueError(f"unknown GPS method {method!r}")
    out = np.empty((Q1, data.n, J))
    for q in range(Q1):
        w = stream(seed, GPS, q).dirichlet(np.ones(data.n)) * data.n
        p = np.clip(np.asarray(estimator(data, w), dtype=float), clip, None)
        out[q] = p / p.sum(axis=1, keepdims=True)
    return GpsDraws(out, name)


# ---------------------------------------------------------------------------
# bias and adjustment
# ---------------------------------------------------------------------------


def _c(gamma, j, m, rows=None):
    v = np.asarray(gamma.get((j, m), 0.0), dtype=float)
    return v if v.ndim == 0 or rows is None else v[rows]


def adjustment_offset(a, gps, gamma) -> np.ndarray:
    """Per-row shift ``sum_{m != A_i} p_im c(A_i, m)``."""
    a = np.asarray(a)
    N, J = gps.shape
    s = np.zeros(N)
    for j in range(1, J + 1):
        rows = np.flatnonzero(a == j)
        if rows.size == 0:
            continue
        acc = np.zeros(rows.size)
        for m in range(1, J + 1):
            if m != j:
                acc = acc + gps[rows, m - 1] * _c(gamma, j, m, rows)
        s[rows] = acc
    return s


def adjust_outcomes(z, a, gps, gamma) -> np.ndarray:
    """Confounding-adjusted complete-data log-times ``z - s``."""
    return np.asarray(z, dtype=float) - adjustment_offset(a, gps, gamma)


def bias_formula(p, gamma, j, jp) -> float:
    """Confounding bias of the naive contrast ``a_j - a_j'`` at GPS row ``p``.

    ``-p_j c(j', j) + p_j' c(j, j') - sum_{m not in {j, j'}} p_m (c(j', m) - c(j, m))``.
    """
    p = np.asarray(p, dtype=float)
    if j == jp:
        return 0.0
    c = lambda u, v: float(gamma.get((u, v), 0.0))  # noqa: E731
    out = -p[j - 1] * c(jp, j) + p[jp - 1] * c(j, jp)
    for m in range(1, p.size + 1):
        if m not in (j, jp):
            out -= p[m - 1] * (c(jp, m) - c(j, m))
    return out


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PooledEstimate:
    """Pooled sensitivity-adjusted contrast for one pair."""

    effect: effects.EffectEstimate  # quantiles of the union of draws
    moment_lower: float
    moment_upper: float
    replicate_means: np.ndarray  # (Q1, Q2)


@dataclass(frozen=True, eq=False)
class SensitivityResult:
    spec: ConfoundingSpec
    Q1: int
    Q2: int
    estimates: dict  # (j, jp) -> PooledEstimate
    scale: str = "logtime"
    t_star: float | None = None


def _functionals(store, pairs, scale, t_star, level):
    lab = store.trt_labels
    return {pr: effects.estimate(store, lab[pr[0] - 1], lab[pr[1] - 1], scale, t_star, level).draws for pr in pairs}


def _replicate_job(args):
    data, cfg, offset, rep, pairs, scale, t_star, level = args
    try:
        store = fit(data, cfg, offset=offset, replicate=rep)
    except Exception as e:  # re-raised with the replicate index by the caller
        return rep, e
    return rep, _functionals(store, pairs, scale, t_star, level)


def pool(draw_sets, level=0.95):
    """Union-quantile interval plus a normal interval from the pooled moments."""
    allv = np.concatenate(draw_sets)
    z = stats.norm.ppf(0.5 + level / 2)
    m, sd = allv.mean(), allv.std(ddof=1) if allv.size > 1 else 0.0
    return allv, m - z * sd, m + z * sd


def run_sensitivity(data, cfg: SamplerConfig, spec: ConfoundingSpec, Q1=30, Q2=30, pairs=None, scale="logtime",
                    t_star=None, level=0.95, gps=None, gps_method="multilogit", sigma_hat=None, workers=1,
                    progress=None) -> SensitivityResult:
    """Fit each of the ``Q1 x Q2`` adjusted datasets and pool the draws.

    Replicate ``(q1, q2)`` uses the GPS draw ``q1``, confounding set
    ``(q1, q2)`` and the sampler stream ``(seed, 0, q1, q2, chain)``. With
    all confounding values zero and ``Q1 = Q2 = 1`` this reproduces the plain
    fit exactly.
    """
    if Q1 < 1 or Q2 < 1:
        raise ValueError("Q1 and Q2 must be at least 1")
    J = data.n_treatments
    if spec.J != J:
        raise ValueError(f"spec is for {spec.J} arms, data has {J}")
    pairs = pairs or [(j, jp) for j in range(1, J + 1) for jp in range(j + 1, J + 1)]
    if spec.needs_sigma and sigma_hat is None:
        raise ValueError("spec has bounds relative to sigma_hat; pass sigma_hat")
    if gps is None:
        gps = estimate_gps(data, Q1, cfg.seed, gps_method)
    if gps.Q1 < Q1:
        raise ValueError(f"only {gps.Q1} GPS draws for Q1={Q1}")
    rng = stream(cfg.seed, CONFOUNDING)
    gammas = [draw_confounding(spec, Q2, rng, sigma_hat) for _ in range(Q1)]
    jobs = []
    for q1 in range(Q1):
        for q2 in range(Q2):
            off = adjustment_offset(data.a, gps.probs[q1], gammas[q1][q2])
            jobs.append((data, cfg, off, (q1, q2), pairs, scale, t_star, level))
    results = {}
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rep, out in ex.map(_replicate_job, jobs):
                results[rep] = out
    else:
        for job in jobs:
            rep, out = _replicate_job(job)
            results[rep] = out
            if progress:
                progress(rep)
    for rep in sorted(results):
        if isinstance(results[rep], Exception):
            raise type(results[rep])(f"sensitivity replicate {rep} failed: {results[rep]}") from results[rep]
    est = {}
    for pr in pairs:
        sets = [results[(q1, q2)][pr] for q1 in range(Q1) for q2 in range(Q2)]
        allv, mlo, mhi = pool(sets, level)
        eff = effects.EffectEstimate.from_draws((data.trt_labels[pr[0] - 1], data.trt_labels[pr[1] - 1]), scale, allv,
                                                level, t_star)
        means = np.array([s.mean() for s in sets]).reshape(Q1, Q2)
        est[pr] = PooledEstimate(eff, float(mlo), float(mhi), means)
    return SensitivityResult(spec, Q1, Q2, est, scale, t_star)


REPORT_FIELDS = ("scenario", "pair", "scale", "estimate", "lower", "upper", "moment_lower", "moment_upper",
                 "Q1", "Q2", "bounds", "signs")


def write_report(results, path) -> Path:
    """One row per (scenario, pair)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for res in results:
            for pr, pe in res.estimates.items():
                e = pe.effect
                w.writerow({
                    "scenario": res.spec.name, "pair": f"{e.pair[0]}:{e.pair[1]}", "scale": res.scale,
                    "estimate": repr(e.estimate), "lower": repr(e.lower), "upper": repr(e.upper),
                    "moment_lower": repr(pe.moment_lower), "moment_upper": repr(pe.moment_upper),
                    "Q1": res.Q1, "Q2": res.Q2, "bounds": res.spec.bounds_text(), "signs": res.spec.signs_text(),
                })
    return path
