"""Clustered right-censored survival data: ingest, validation and centering."""

from __future__ import annotations

import csv
import hashlib
import math
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .exceptions import DataError, NumericalError

REQUIRED = ("time", "event", "cluster", "trt")


def _freeze(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Validated clustered survival data with dense 1-based indices.

    Attributes
    ----------
    x : (N, P) float array
        Covariates; categorical columns are already expanded to 0/1 indicators.
    a : (N,) int array
        Treatment index in ``1..J``.
    y : (N,) float array
        Observed time, strictly positive.
    delta : (N,) int array
        1 = event, 0 = right censored.
    cluster : (N,) int array
        Cluster index in ``1..K``.
    names : tuple of str
        Covariate labels.
    trt_labels, cluster_labels : tuple of str
        Original labels; ``trt_labels[j - 1]`` is the label of treatment ``j``.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    cluster: np.ndarray
    names: tuple = ()
    trt_labels: tuple = ()
    cluster_labels: tuple = ()
    unmeasured: tuple = field(default=())

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        object.__setattr__(self, "x", _freeze(x, float))
        for name, dtype in (("a", np.int64), ("y", float), ("delta", np.int64), ("cluster", np.int64)):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise DataError(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, _freeze(arr, dtype))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{j + 1}" for j in range(x.shape[1])))
        if len(self.names) != x.shape[1]:
            raise DataError("number of covariate names does not match columns of x")
        J = int(self.a.max()) if n else 0
        K = int(self.cluster.max()) if n else 0
        if not self.trt_labels:
            object.__setattr__(self, "trt_labels", tuple(str(j) for j in range(1, J + 1)))
        if not self.cluster_labels:
            object.__setattr__(self, "cluster_labels", tuple(str(k) for k in range(1, K + 1)))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "trt_labels", tuple(self.trt_labels))
        object.__setattr__(self, "cluster_labels", tuple(self.cluster_labels))
        object.__setattr__(self, "unmeasured", tuple(self.unmeasured))
        self.validate()

    def validate(self):
        if self.n < 1:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(self.x)):
            bad = np.argwhere(~np.isfinite(self.x))[0]
            raise DataError(f"missing or non-finite covariate, row {bad[0] + 1}, column {self.names[bad[1]]}")
        bad = np.flatnonzero(~(self.y > 0) | ~np.isfinite(self.y))
        if bad.size:
            raise DataError(f"non-positive time, row {bad[0] + 1}")
        if not np.isin(self.delta, (0, 1)).all():
            raise DataError("event indicator must be 0 or 1")
        if self.n_treatments < 2:
            raise DataError("need at least two treatment levels")
        counts = np.bincount(self.a, minlength=self.n_treatments + 1)[1:]
        if self.a.min() < 1 or (counts == 0).any():
            raise DataError("treatment indices must be dense in 1..J")
        ccounts = np.bincount(self.cluster, minlength=self.n_clusters + 1)[1:]
        if self.cluster.min() < 1 or (ccounts == 0).any():
            raise DataError("cluster indices must be dense in 1..K")
        if len(self.trt_labels) != self.n_treatments or len(self.cluster_labels) != self.n_clusters:
            raise DataError("label maps do not match the number of levels")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_treatments(self) -> int:
        return int(self.a.max())

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max())

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster - 1, minlength=self.n_clusters)

    def measured(self) -> "SurvivalDataset":
        """Copy without the columns flagged as unmeasured."""
        keep = [j for j, nm in enumerate(self.names) if nm not in self.unmeasured]
        return SurvivalDataset(
            x=self.x[:, keep], a=self.a, y=self.y, delta=self.delta, cluster=self.cluster,
            names=tuple(self.names[j] for j in keep), trt_labels=self.trt_labels,
            cluster_labels=self.cluster_labels,
        )

    def trt_index(self, label) -> int:
        """Dense index of a treatment given its original label (or index)."""
        label = str(label)
        if label in self.trt_labels:
            return self.trt_labels.index(label) + 1
        raise DataError(f"unknown treatment label {label!r}")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.a, self.y, self.delta, self.cluster):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x1f".join(self.names + self.trt_labels + self.cluster_labels).encode())
        return h.hexdigest()

    def equals(self, other: "SurvivalDataset") -> bool:
        return (
            self.names == other.names
            and self.trt_labels == other.trt_labels
            and self.cluster_labels == other.cluster_labels
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("x", "a", "y", "delta", "cluster")
            )
        )


def _dense_labels(values: Sequence[str]):
    """Map raw labels to 1..L, sorting numerically when every label is numeric."""
    uniq = set(values)
    try:
        order = sorted(uniq, key=lambda s: (float(s), s))
    except ValueError:
        order = sorted(uniq)
    index = {lab: i + 1 for i, lab in enumerate(order)}
    return np.array([index[v] for v in values], dtype=np.int64), tuple(order)


def load_dataset(
    path,
    schema: Mapping[str, str] | None = None,
    categorical: Sequence[str] = (),
    exclude: Sequence[str] = (),
) -> SurvivalDataset:
    """Read a CSV file into a validated `SurvivalDataset`.

    ``schema`` maps the logical roles ``time``, ``event``, ``cluster`` and
    ``trt`` to CSV header names. Every other column (minus ``exclude``) is a
    covariate; columns named in ``categorical`` are expanded to one 0/1
    indicator per level, named ``<col>=<level>``.
    """
    schema = {r: r for r in REQUIRED} | dict(schema or {})
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    col = {h: i for i, h in enumerate(header)}
    for role in REQUIRED:
        if schema[role] not in col:
            raise DataError(f"unknown column {schema[role]!r} for role {role!r}")
    for c in list(categorical) + list(exclude):
        if c not in col:
            raise DataError(f"unknown column {c!r}")
    role_cols = {schema[r] for r in REQUIRED}
    cov_cols = [h for h in header if h not in role_cols and h not in exclude]

    times, events, clusters, trts = [], [], [], []
    raw = {c: [] for c in cov_cols}
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"malformed row {r}: expected {len(header)} fields, got {len(row)}")
        cells = [c.strip() for c in row]

        def cell(name):
            v = cells[col[name]]
            if v == "" or v.upper() in ("NA", "NAN"):
                raise DataError(f"missing value, row {r}, column {name}")
            return v

        try:
            t = float(cell(schema["time"]))
        except ValueError:
            raise DataError(f"malformed time, row {r}, column {schema['time']}") from None
        if not (t > 0) or not math.isfinite(t):
            raise DataError(f"non-positive time, row {r}")
        ev = cell(schema["event"])
        if ev not in ("0", "1", "0.0", "1.0"):
            raise DataError(f"event must be 0/1, row {r}, column {schema['event']}")
        times.append(t)
        events.append(int(float(ev)))
        clusters.append(cell(schema["cluster"]))
        trts.append(cell(schema["trt"]))
        for c in cov_cols:
            v = cell(c)
            if c in categorical:
                raw[c].append(v)
            else:
                try:
                    raw[c].append(float(v))
                except ValueError:
                    raise DataError(f"malformed value {v!r}, row {r}, column {c}") from None

    if not rows:
        raise DataError(f"{path}: no data rows")
    columns, names = [], []
    for c in cov_cols:
        if c in categorical:
            codes, levels = _dense_labels(raw[c])
            for i, lev in enumerate(levels, start=1):
                columns.append((codes == i).astype(float))
                names.append(f"{c}={lev}")
        else:
            columns.append(np.asarray(raw[c], dtype=float))
            names.append(c)
    x = np.column_stack(columns) if columns else np.zeros((len(rows), 0))
    cl, cl_labels = _dense_labels(clusters)
    a, a_labels = _dense_labels(trts)
    return SurvivalDataset(
        x=x, a=a, y=np.asarray(times), delta=np.asarray(events), cluster=cl,
        names=tuple(names), trt_labels=a_labels, cluster_labels=cl_labels,
    )


def save_dataset(data: SurvivalDataset, path) -> Path:
    """Write ``data`` in the ingest CSV schema (floats written round-trip exact)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED) + list(data.names))
        for i in range(data.n):
            w.writerow(
                [repr(float(data.y[i])), int(data.delta[i]), data.cluster_labels[data.cluster[i] - 1],
                 data.trt_labels[data.a[i] - 1]]
                + [repr(float(v)) for v in data.x[i]]
            )
    return path


@dataclass(frozen=True)
class CenteringInfo:
    """Intercept-only lognormal AFT fit used to center log-times."""

    mu_aft: float
    sigma_aft: float
    se_mu: float = float("nan")
    se_sigma: float = float("nan")
    n_iter: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.mu_aft) and math.isfinite(self.sigma_aft) and self.sigma_aft > 0):
            raise NumericalError(f"invalid centering constants ({self.mu_aft}, {self.sigma_aft})")


def example_path() -> Path:
    """Path of the bundled 200-row example (3 arms, 5 clusters)."""
    return Path(str(resources.files("riaftbart").joinpath("data", "example.csv")))


def _lognormal_derivs(mu, theta, logy, delta):
    """Log-likelihood, gradient and Hessian in (mu, log sigma).

    The ``-log y`` Jacobian and ``2*pi`` constants are dropped.
    """
    sig = math.exp(theta)
    z = (logy - mu) / sig
    ev = delta == 1
    ze, zc = z[ev], z[~ev]
    # inverse Mills ratio phi/Q for censored rows, computed in log space
    logq = special.log_ndtr(-zc)
    h = np.exp(-0.5 * zc**2 - 0.5 * math.log(2 * math.pi) - logq)
    dh = h * (h - zc)

    ll = -theta * ze.size - 0.5 * np.sum(ze**2) + np.sum(logq)
    g_mu = np.sum(ze) / sig + np.sum(h) / sig
    g_th = -ze.size + np.sum(ze**2) + np.sum(h * zc)
    h_mumu = -ze.size / sig**2 - np.sum(dh) / sig**2
    h_muth = -2 * np.sum(ze) / sig - np.sum(dh * zc + h) / sig
    h_thth = -2 * np.sum(ze**2) - np.sum((dh * zc + h) * zc)
    return ll, np.array([g_mu, g_th]), np.array([[h_mumu, h_muth], [h_muth, h_thth]])


def fit_centering(data: SurvivalDataset, tol: float = 1e-8, max_iter: int = 100) -> CenteringInfo:
    """Maximum-likelihood intercept-only lognormal AFT fit.

    Newton-Raphson on ``(mu, log sigma)`` with step halving, started at the
    mean and (divisor-N) s.d. of log y with censored rows treated as events.
    With no censoring the solution is the sample mean and MLE s.d. of log y.

    Raises
    ------
    DataError
        Fewer than two rows or no events.
    NumericalError
        Zero spread in log y, or no convergence within ``max_iter``.
    """
    if data.n < 2:
        raise DataError("centering needs at least two rows")
    if not np.any(data.delta == 1):
        raise DataError("all rows censored: lognormal scale is not identified")
    logy = np.log(data.y)
    delta = np.asarray(data.delta)
    mu, sd = float(np.mean(logy)), float(np.std(logy))
    if not sd > 0:
        raise NumericalError("degenerate centering fit: zero variance of log times", (mu, sd))
    theta = math.log(sd)
    ll, g, H = _lognormal_derivs(mu, theta, logy, delta)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            break
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        if g @ step <= 0:  # not an ascent direction
            step = g
        t = 1.0
        while t > 1e-12:
            cand = _lognormal_derivs(mu + t * step[0], theta + t * step[1], logy, delta)
            if np.isfinite(cand[0]) and cand[0] >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        mu, theta = mu + t * step[0], theta + t * step[1]
        ll, g, H = cand
        if theta < -30:
            raise NumericalError("degenerate centering fit: scale collapsed to zero", (mu, math.exp(theta)))
    else:
        if np.max(np.abs(g)) >= tol:
            raise NumericalError(
                f"centering did not converge in {max_iter} iterations", (mu, math.exp(theta))
            )
        it = max_iter
    sig = math.exp(theta)
    try:
        cov = np.linalg.inv(-H)
        se_mu = math.sqrt(cov[0, 0])
        se_sig = sig * math.sqrt(cov[1, 1])  # delta method from log sigma
    except (np.linalg.LinAlgError, ValueError):
        se_mu = se_sig = float("nan")
    return CenteringInfo(mu, sig, se_mu, se_sig, it)


def center_responses(data: SurvivalDataset, c: CenteringInfo) -> np.ndarray:
    """Centered log-times ``log y - mu_aft``."""
    return np.log(data.y) - c.mu_aft
