"""Simulation designs with known potential outcomes.

Two designs are provided.

*Main design.* Ten confounders (five standard normal, two three-level
categorical, three binary), a random-intercept multinomial logit treatment
model over three arms and Weibull potential survival times

    T(a) = (-log U / (lam_a * exp(X beta_a + G beta_a^NL + b_k))) ** (1 / eta)

with one ``U`` and ``b_k`` per individual shared across arms. The linear and
nonlinear coefficients ship in ``data/dgp_coefficients.csv``; ``eta = 2``
gives proportional hazards and ``eta = exp(0.7 + 0.5 x1)`` does not.

*Sensitivity design.* One measured binary confounder ``x1`` and one
unmeasured binary confounder ``x2``, used to check the confounding-function
adjustment against its exact per-row confounding functions.

Right censoring is exponential with a rate tuned to a target fraction.
"""

from __future__ import annotations

import functools
import hashlib
import math
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import special

from .data import SurvivalDataset
from .exceptions import NumericalError
from .rng import SIMULATION, TUNING, stream

COEF_FILE = "dgp_coefficients.csv"
COEF_SHA256 = "9e37ef9c17472b7d53c4c5101ec0e96b07a21cc3602ffb7f1396dc575b2da64c"
PAIRS = ((1, 2), (1, 3), (2, 3))
SCENARIOS = {
    "ph10": ("PH", 0.10),
    "ph40": ("PH", 0.40),
    "nph10": ("nPH", 0.10),
    "nph40": ("nPH", 0.40),
}
SA_SCENARIO = "sa-illustrative"
CENSORING_MODES = ("population", "dataset")


# ---------------------------------------------------------------------------
# coefficient table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coefficients:
    terms: tuple
    xi: np.ndarray  # (T, 2) treatment model, arms 1 and 2 against arm 3
    beta: np.ndarray  # (T, 3) outcome model, one column per arm


def coefficient_bytes() -> bytes:
    return resources.files("riaftbart").joinpath("data", COEF_FILE).read_bytes()


@functools.lru_cache(maxsize=1)
def load_coefficients(verify: bool = True) -> Coefficients:
    """Read the embedded coefficient table, checking its pinned SHA-256."""
    raw = coefficient_bytes()
    if verify and hashlib.sha256(raw).hexdigest() != COEF_SHA256:
        raise ValueError("coefficient table checksum mismatch")
    lines = raw.decode().strip().splitlines()
    terms, xi, beta = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        terms.append(parts[0])
        vals = [float(v) for v in parts[1:]]
        xi.append(vals[:2])
        beta.append(vals[2:])
    return Coefficients(tuple(terms), np.array(xi), np.array(beta))


_FACTOR = re.compile(r"^(?:(?P<num>\d+(?:\.\d*)?)|(?P<pi>pi)|x(?P<var>\d+)(?:\^(?P<pow>\d+))?)$")


def eval_term(term: str, X: np.ndarray) -> np.ndarray:
    """Evaluate a product term such as ``x2^2*x5`` or ``sin(2*pi*x1*x3)``.

    ``X`` columns are ``x1, x2, ...`` in order.
    """
    term = term.replace(" ", "")
    wrap = None
    m = re.fullmatch(r"sin\((.*)\)", term)
    if m:
        wrap, term = np.sin, m.group(1)
    out = np.ones(X.shape[0])
    for fac in term.split("*"):
        g = _FACTOR.match(fac)
        if g is None:
            raise ValueError(f"cannot parse term factor {fac!r}")
        if g["num"]:
            out = out * float(g["num"])
        elif g["pi"]:
            out = out * math.pi
        else:
            col = X[:, int(g["var"]) - 1]
            out = out * (col ** int(g["pow"]) if g["pow"] else col)
    return wrap(out) if wrap else out


def term_matrix(X: np.ndarray, coef: Coefficients | None = None) -> np.ndarray:
    coef = coef or load_coefficients()
    return np.column_stack([eval_term(t, X) for t in coef.terms])


# ---------------------------------------------------------------------------
# main design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpConfig:
    """Main simulation design.

    ``censoring`` is the target censored fraction (``None`` for no
    censoring); ``cens_rate`` overrides the tuned exponential rate.
    ``censoring_mode="population"`` tunes one rate on a large fresh sample
    of the design; ``"dataset"`` solves the rate on each replicate's own
    event times, so every replicate hits the target in expectation over
    ``C`` alone.
    """

    K: int = 20
    n_k: int = 500
    hazards: str = "PH"
    censoring: float | None = 0.10
    lam: tuple = (3000.0, 1200.0, 2000.0)
    xi0: tuple = (0.9, -1.0)
    tau_sd: float = 1.0
    b_sd: float = 4.0
    cat_probs: tuple = (0.3, 0.3, 0.4)
    seed: int = 0
    cens_rate: float | None = None
    tuning_n: int = 200_000
    censoring_mode: str = "population"

    def __post_init__(self):
        if self.censoring_mode not in CENSORING_MODES:
            raise ValueError(f"censoring_mode must be one of {CENSORING_MODES}")
        if self.K < 1 or self.n_k < 1:
            raise ValueError("K and n_k must be at least 1")
        if self.hazards not in ("PH", "nPH"):
            raise ValueError(f"hazards must be 'PH' or 'nPH', got {self.hazards!r}")
        if self.censoring is not None and not 0 < self.censoring < 1:
            raise ValueError("censoring target must lie strictly between 0 and 1")

    @property
    def n(self) -> int:
        return self.K * self.n_k


def scenario_config(name: str, **kw) -> DgpConfig:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS) + [SA_SCENARIO]}")
    hz, cens = SCENARIOS[name]
    return DgpConfig(hazards=hz, censoring=cens, **kw)


def cluster_index(K: int, n_k: int) -> np.ndarray:
    return np.repeat(np.arange(1, K + 1), n_k)


def gen_covariates(cfg: DgpConfig, rng, n: int | None = None) -> np.ndarray:
    """Raw covariates ``x1..x10``; ``x6`` and ``x7`` are category codes 0/1/2."""
    n = cfg.n if n is None else n
    X = np.empty((n, 10))
    X[:, :5] = rng.standard_normal((n, 5))
    X[:, 5] = rng.choice(3, size=n, p=cfg.cat_probs)
    X[:, 6] = rng.choice(3, size=n, p=cfg.cat_probs)
    X[:, 7] = rng.random(n) < 0.6
    X[:, 8] = rng.random(n) < 0.4
    X[:, 9] = rng.random(n) < 0.5
    return X


def analysis_covariates(X: np.ndarray):
    """Analysis design: categorical codes expanded to one indicator per level."""
    cols, names = [], []
    for j in range(10):
        if j in (5, 6):
            for lev in range(3):
                cols.append((X[:, j] == lev).astype(float))
                names.append(f"x{j + 1}={lev + 1}")
        else:
            cols.append(X[:, j])
            names.append(f"x{j + 1}")
    return np.column_stack(cols), tuple(names)


def softmax_ref(eta: np.ndarray) -> np.ndarray:
    """Row-wise probabilities from logits of arms 1..J-1 against arm J."""
    full = np.column_stack([eta, np.zeros(eta.shape[0])])
    return special.softmax(full, axis=1)


def true_gps(X, tau_row, cfg: DgpConfig, G=None, coef=None) -> np.ndarray:
    coef = coef or load_coefficients()
    G = term_matrix(X, coef) if G is None else G
    # linear terms occupy the first ten rows of the table
    eta = np.asarray(cfg.xi0)[None, :] + G @ coef.xi + np.asarray(tau_row)[:, None]
    return softmax_ref(eta)


def draw_categorical(p: np.ndarray, rng) -> np.ndarray:
    """One 1-based category per row of the probability matrix ``p``."""
    u = rng.random(p.shape[0])
    c = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(c, p.shape[1] - 1) + 1


def gen_treatment(X, cluster, cfg: DgpConfig, rng, tau=None):
    """Treatments (1..3) and the true GPS.

    ``tau`` holds the cluster effects (drawn ``N(0, tau_sd^2)`` when omitted)
    shared by both logit equations.
    """
    K = int(cluster.max())
    if tau is None:
        tau = cfg.tau_sd * rng.standard_normal(K)
    gps = true_gps(X, tau[cluster - 1], cfg)
    return draw_categorical(gps, rng), gps, tau


def eta_shape(X, cfg: DgpConfig):
    return 2.0 if cfg.hazards == "PH" else np.exp(0.7 + 0.5 * X[:, 0])


def potential_times(X, b_row, U, cfg: DgpConfig, G=None, coef=None) -> np.ndarray:
    """(n, 3) potential survival times from one shared ``U`` per row."""
    coef = coef or load_coefficients()
    G = term_matrix(X, coef) if G is None else G
    lin = G @ coef.beta + np.asarray(b_row)[:, None]
    eta = eta_shape(X, cfg)
    eta = eta if np.ndim(eta) == 0 else eta[:, None]
    return (-np.log(U)[:, None] / (np.asarray(cfg.lam)[None, :] * np.exp(lin))) ** (1.0 / eta)


def gen_outcomes(X, A, cluster, cfg: DgpConfig, rng, rate=None, b=None):
    """Potential times, observed time and event indicator.

    Returns ``(T_all, y, delta, b)``. With ``rate=None`` no censoring.
    """
    K = int(cluster.max())
    if b is None:
        b = cfg.b_sd * rng.standard_normal(K)
    U = 1.0 - rng.random(X.shape[0])  # in (0, 1]
    U = np.where(U == 1.0, np.nextafter(1.0, 0.0), U)
    T_all = potential_times(X, b[cluster - 1], U, cfg)
    T = T_all[np.arange(X.shape[0]), A - 1]
    if rate is None:
        return T_all, T.copy(), np.ones(T.size, dtype=np.int64), b
    C = rng.exponential(1.0 / rate, size=T.size)
    return T_all, np.minimum(T, C), (T <= C).astype(np.int64), b


def _expected_censoring(rate, T):
    return float(np.mean(-np.expm1(-rate * T)))


def solve_rate(T, target, max_iter=200, tol=1e-6) -> float:
    """Exponential rate giving mean ``P(C < T) = target`` over the sample ``T``.

    Bisection on log(rate).
    """
    if not 0 < target < 1:
        raise ValueError("censoring target must lie strictly between 0 and 1")
    T = np.asarray(T, dtype=float)
    med = float(np.median(T))
    lo, hi = math.log(1e-8 / med), math.log(1e8 / med)
    if not (_expected_censoring(math.exp(lo), T) < target < _expected_censoring(math.exp(hi), T)):
        raise NumericalError("censoring-rate bracket does not contain the target", (lo, hi))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = _expected_censoring(math.exp(mid), T)
        if abs(f - target) < tol:
            return math.exp(mid)
        if f < target:
            lo = mid
        else:
            hi = mid
    raise NumericalError(f"censoring-rate bisection did not converge in {max_iter} iterations", math.exp(mid))


def _tuning_sample(cfg: DgpConfig, rng, n):
    # one row per cluster: the marginal law of T does not depend on cluster
    # size, and independent intercepts make the tuning sample far less noisy
    cl = np.arange(1, n + 1)
    X = gen_covariates(cfg, rng, n)
    A, _, _ = gen_treatment(X, cl, cfg, rng)
    _, T, _, _ = gen_outcomes(X, A, cl, cfg, rng)
    return T


@functools.lru_cache(maxsize=32)
def tune_censoring(cfg: DgpConfig, target: float) -> float:
    """Exponential censoring rate for ``target`` on a fresh tuning sample.

    The sample (``cfg.tuning_n`` rows, each its own fresh cluster) is
    drawn from the ``(seed, 4)`` stream; the censored fraction is averaged
    analytically over ``C`` given each sampled ``T``.
    """
    if not 0 < target < 1:
        raise ValueError("censoring target must lie strictly between 0 and 1")
    return solve_rate(_tuning_sample(cfg, stream(cfg.seed, TUNING), cfg.tuning_n), target)


def censoring_fraction(cfg: DgpConfig, rate: float, n=200_000, seed=None) -> float:
    """Realized censoring fraction on a fresh sample (for checking a rate)."""
    rng = stream(cfg.seed if seed is None else seed, SIMULATION, 10**6)
    T = _tuning_sample(cfg, rng, n)
    C = rng.exponential(1.0 / rate, size=T.size)
    return float(np.mean(C < T))


@dataclass(frozen=True, eq=False)
class SimResult:
    """A simulated dataset plus the latent quantities behind it."""

    dataset: SurvivalDataset
    T_all: np.ndarray
    gps: np.ndarray
    tau: np.ndarray
    b: np.ndarray
    rate: float | None
    X_raw: np.ndarray
    extra: dict = field(default_factory=dict)


def _censor(T, rate, rng):
    C = rng.exponential(1.0 / rate, size=T.size)
    return np.minimum(T, C), (T <= C).astype(np.int64)


def gen_dataset(cfg: DgpConfig, replicate: int = 0) -> SimResult:
    """One replicate of the main design on the ``(seed, 3, replicate)`` stream."""
    per_dataset = cfg.cens_rate is None and cfg.censoring is not None and cfg.censoring_mode == "dataset"
    rate = cfg.cens_rate
    if rate is None and cfg.censoring is not None and not per_dataset:
        rate = tune_censoring(cfg, cfg.censoring)
    rng = stream(cfg.seed, SIMULATION, replicate)
    cl = cluster_index(cfg.K, cfg.n_k)
    X = gen_covariates(cfg, rng)
    A, gps, tau = gen_treatment(X, cl, cfg, rng)
    T_all, y, delta, b = gen_outcomes(X, A, cl, cfg, rng, rate)
    if per_dataset:
        rate = solve_rate(y, cfg.censoring)
        y, delta = _censor(y, rate, rng)
    x, names = analysis_covariates(X)
    ds = SurvivalDataset(x=x, a=A, y=y, delta=delta, cluster=cl, names=names)
    return SimResult(ds, T_all, gps, tau, b, rate, X)


@dataclass(frozen=True)
class SimTruth:
    """Pairwise population contrasts ``E[g(T(a_j))] - E[g(T(a_j'))]``."""

    scale: str
    values: np.ndarray  # (J, J), antisymmetric
    se: np.ndarray  # (J, J)
    n_mc: int
    t_star: float | None = None

    def value(self, j, jp) -> float:
        return float(self.values[j - 1, jp - 1])

    def stderr(self, j, jp) -> float:
        return float(self.se[j - 1, jp - 1])

    def as_dict(self) -> dict:
        J = self.values.shape[0]
        return {
            "scale": self.scale, "n_mc": self.n_mc, "t_star": self.t_star,
            "pairs": {f"{j}:{jp}": {"truth": self.value(j, jp), "mc_se": self.stderr(j, jp)}
                      for j in range(1, J + 1) for jp in range(1, J + 1) if j < jp},
        }


def transform_times(T_all, scale, t_star=None):
    if scale == "logtime":
        return np.log(T_all)
    if t_star is None or not t_star > 0:
        raise ValueError(f"scale {scale!r} needs a positive t_star")
    if scale == "surv":
        return (T_all > t_star).astype(float)
    if scale == "rmst":
        return np.minimum(T_all, t_star)
    raise ValueError(f"unknown scale {scale!r}")


def contrast_matrix(g, group, n_groups) -> tuple:
    """Pairwise mean differences of the columns of ``g`` and their MC SEs.

    SEs use group (cluster) means as independent units.
    """
    J = g.shape[1]
    vals, se = np.zeros((J, J)), np.zeros((J, J))
    for j in range(J):
        for jp in range(J):
            if j == jp:
                continue
            d = g[:, j] - g[:, jp]
            vals[j, jp] = d.mean()
            gm = np.bincount(group, weights=d, minlength=n_groups) / np.bincount(group, minlength=n_groups)
            se[j, jp] = gm.std(ddof=1) / math.sqrt(n_groups) if n_groups > 1 else math.nan
    return vals, se


def compute_truth(cfg: DgpConfig, scale="logtime", n_mc=1_000_000, t_star=None, seed=None, chunk=250_000) -> SimTruth:
    """Monte Carlo population contrasts from uncensored potential times.

    ``n_mc`` individuals in fresh clusters of ``cfg.n_k`` rows; computed in
    chunks of whole clusters.
    """
    rng = stream(cfg.seed if seed is None else seed, SIMULATION, 2**31)
    per = max(1, chunk // cfg.n_k) * cfg.n_k
    done = 0
    gsum = np.zeros((3, 3))
    unit_means = []
    while done < n_mc:
        n = min(per, n_mc - done)
        K = math.ceil(n / cfg.n_k)
        cl = cluster_index(K, cfg.n_k)[:n]
        X = gen_covariates(cfg, rng, n)
        b = cfg.b_sd * rng.standard_normal(K)
        U = 1.0 - rng.random(n)
        U = np.where(U == 1.0, np.nextafter(1.0, 0.0), U)
        g = transform_times(potential_times(X, b[cl - 1], U, cfg), scale, t_star)
        gsum += np.array([[np.sum(g[:, j] - g[:, jp]) for jp in range(3)] for j in range(3)])
        unit = np.stack([np.bincount(cl - 1, weights=g[:, j]) / np.bincount(cl - 1) for j in range(3)], axis=1)
        unit_means.append(unit)
        done += n
    vals = gsum / n_mc
    unit = np.concatenate(unit_means)
    se = np.zeros((3, 3))
    for j in range(3):
        for jp in range(3):
            if j != jp:
                se[j, jp] = (unit[:, j] - unit[:, jp]).std(ddof=1) / math.sqrt(unit.shape[0])
    return SimTruth(scale, vals, se, int(n_mc), t_star)


# ---------------------------------------------------------------------------
# sensitivity-analysis design
# ---------------------------------------------------------------------------

SA_XI0 = (1.6, -0.2)
SA_XI = np.array([[0.2, 0.3], [0.4, -0.3]])  # rows x1, x2; columns arm 1, 2 vs 3
SA_LAM = (6.0, 2.0, 4.0)
SA_BETA = np.array([[-0.8, -0.5, -0.3], [-1.2, -2.2, 1.0]])  # rows x1, x2; columns arms


@dataclass(frozen=True)
class SaConfig:
    K: int = 20
    n_k: int = 500
    censoring: float | None = 0.10
    tau_sd: float = 1.0
    b_sd: float = 4.0
    p_x1: float = 0.4
    p_x2: float = 0.5
    seed: int = 0
    tuning_n: int = 200_000
    censoring_mode: str = "population"

    def __post_init__(self):
        if self.censoring_mode not in CENSORING_MODES:
            raise ValueError(f"censoring_mode must be one of {CENSORING_MODES}")
        if self.censoring is not None and not 0 < self.censoring < 1:
            raise ValueError("censoring target must lie strictly between 0 and 1")

    @property
    def n(self) -> int:
        return self.K * self.n_k


def sa_gps(x1, x2, tau_row) -> np.ndarray:
    eta = np.asarray(SA_XI0)[None, :] + np.column_stack([x1, x2]) @ SA_XI + np.asarray(tau_row)[:, None]
    return softmax_ref(eta)


def sa_potential_times(x1, x2, b_row, U) -> np.ndarray:
    lin = np.column_stack([x1, x2]) @ SA_BETA + np.asarray(b_row)[:, None]
    return np.sqrt(-np.log(U)[:, None] / (np.asarray(SA_LAM)[None, :] * np.exp(lin)))


def _sa_sample(cfg: SaConfig, rng, n, K=None, n_k=None):
    n_k = cfg.n_k if n_k is None else n_k
    K = math.ceil(n / n_k) if K is None else K
    cl = cluster_index(K, n_k)[:n]
    x1 = (rng.random(n) < cfg.p_x1).astype(float)
    x2 = (rng.random(n) < cfg.p_x2).astype(float)
    tau = cfg.tau_sd * rng.standard_normal(K)
    gps = sa_gps(x1, x2, tau[cl - 1])
    A = draw_categorical(gps, rng)
    b = cfg.b_sd * rng.standard_normal(K)
    U = 1.0 - rng.random(n)
    U = np.where(U == 1.0, np.nextafter(1.0, 0.0), U)
    T_all = sa_potential_times(x1, x2, b[cl - 1], U)
    return cl, x1, x2, tau, gps, A, b, T_all


@functools.lru_cache(maxsize=8)
def tune_sa_censoring(cfg: SaConfig, target: float) -> float:
    rng = stream(cfg.seed, TUNING)
    *_, A, _, T_all = _sa_sample(cfg, rng, cfg.tuning_n, n_k=1)
    return solve_rate(T_all[np.arange(A.size), A - 1], target)


def sa_true_confounding(x1, tau_row) -> dict:
    """Exact confounding functions per row given the measured ``x1`` and the
    cluster effect.

    ``c(j, m) = E[log T(j) | A=j, x1, v] - E[log T(j) | A=m, x1, v]``; only the
    unmeasured ``x2`` differs between the two conditioning groups, so
    ``c(j, m) = -beta_{2j} / 2 * (P(x2=1 | A=j) - P(x2=1 | A=m))``.
    """
    x1 = np.asarray(x1, dtype=float)
    p1 = sa_gps(x1, np.ones_like(x1), tau_row)
    p0 = sa_gps(x1, np.zeros_like(x1), tau_row)
    post = 0.5 * p1 / (0.5 * p1 + 0.5 * p0)  # P(x2 = 1 | A = a, x1, v), columns a
    out = {}
    for j in range(3):
        for m in range(3):
            if j != m:
                out[(j + 1, m + 1)] = -0.5 * SA_BETA[1, j] * (post[:, j] - post[:, m])
    return out


def sa_truth_closed_form(cfg: SaConfig = SaConfig()) -> np.ndarray:
    """(3, 3) log-time contrasts of the sensitivity design in closed form."""
    lam = np.log(SA_LAM)
    ex = np.array([cfg.p_x1, cfg.p_x2]) @ SA_BETA  # E[linear predictor] per arm
    m = -0.5 * (lam + ex)
    return m[:, None] - m[None, :]


def gen_sa_illustrative(cfg: SaConfig = SaConfig(), replicate: int = 0) -> SimResult:
    """One replicate of the sensitivity design.

    The dataset carries ``x1`` and ``x2`` with ``x2`` flagged unmeasured;
    ``extra`` holds the exact per-row confounding functions (given ``x1`` and
    the cluster) under ``"confounding"`` and the closed-form truth under
    ``"truth"``.
    """
    per_dataset = cfg.censoring is not None and cfg.censoring_mode == "dataset"
    rate = tune_sa_censoring(cfg, cfg.censoring) if cfg.censoring is not None and not per_dataset else None
    rng = stream(cfg.seed, SIMULATION, replicate)
    cl, x1, x2, tau, gps, A, b, T_all = _sa_sample(cfg, rng, cfg.n, cfg.K)
    T = T_all[np.arange(A.size), A - 1]
    if per_dataset:
        rate = solve_rate(T, cfg.censoring)
    if rate is None:
        y, delta = T.copy(), np.ones(T.size, dtype=np.int64)
    else:
        y, delta = _censor(T, rate, rng)
    ds = SurvivalDataset(x=np.column_stack([x1, x2]), a=A, y=y, delta=delta, cluster=cl,
                         names=("x1", "x2"), unmeasured=("x2",))
    extra = {"confounding": sa_true_confounding(x1, tau[cl - 1]), "truth": sa_truth_closed_form(cfg)}
    return SimResult(ds, T_all, gps, tau, b, rate, np.column_stack([x1, x2]), extra)


def compute_sa_truth(cfg: SaConfig = SaConfig(), n_mc=1_000_000, seed=None) -> SimTruth:
    """Monte Carlo log-time contrasts of the sensitivity design."""
    rng = stream(cfg.seed if seed is None else seed, SIMULATION, 2**31 + 1)
    cl, *_, T_all = _sa_sample(cfg, rng, n_mc)
    vals, se = contrast_matrix(np.log(T_all), cl - 1, int(cl.max()))
    return SimTruth("logtime", vals, se, int(n_mc))
