"""Metropolis-within-Gibbs sampler for the random-intercept BART AFT model.

One sweep updates, in order,

1. the cluster intercepts ``b``, then ``tau2``, then ``alpha``;
2. the tree ensemble (Bayesian backfitting) and then ``sigma2``;
3. the latent log-times of censored rows.

Every retained state is evaluated on the counterfactual design (each row
copied once per treatment arm), with ``mu_aft`` added back, and collected in
a `PosteriorStore`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .augmentation import impute_censored
from .data import CenteringInfo, SurvivalDataset, center_responses, fit_centering
from .exceptions import CheckpointError, DataError, NumericalError
from .random_effects import RandomEffectsState, draw_all_b, draw_alpha, draw_tau2, init_random_effects
from .rng import chain_stream
from .trees import (
    Cutpoints,
    MoveProbs,
    SigmaPrior,
    TreeEnsemble,
    TreePrior,
    calibrate_lambda,
    draw_sigma2,
)

log = logging.getLogger(__name__)

STORE_VERSION = 1
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SamplerConfig:
    """Run length, priors and plumbing options for `fit`.

    ``n_draws`` are retained per chain after ``n_burn`` sweeps, keeping every
    ``thin``-th sweep. ``drop_reference`` codes the treatment with ``J - 1``
    indicator columns instead of ``J``. ``alpha_update`` selects the expansion
    parameter conditional (see `random_effects.alpha_conditional`).
    """

    n_draws: int = 3500
    n_burn: int = 1000
    thin: int = 1
    n_trees: int = 200
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    seed: int = 0
    chains: int = 1
    n_min: int = 5
    gamma: float = 0.95
    beta: float = 2.0
    max_depth: int = 8
    n_cut: int = 100
    moves: tuple = (0.25, 0.25, 0.40, 0.10)
    alpha_update: str = "exact"
    drop_reference: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.n_draws < 1 or self.n_burn < 0 or self.thin < 1 or self.chains < 1:
            raise ValueError("need n_draws >= 1, n_burn >= 0, thin >= 1, chains >= 1")
        if self.n_trees < 1 or not self.k > 0 or not self.nu > 0 or not 0 < self.q < 1:
            raise ValueError("invalid prior hyperparameters")
        if self.alpha_update not in ("exact", "reduced"):
            raise ValueError(f"unknown alpha_update {self.alpha_update!r}")
        object.__setattr__(self, "moves", tuple(float(m) for m in self.moves))
        MoveProbs(*self.moves)

    @property
    def tree_prior(self) -> TreePrior:
        return TreePrior(self.gamma, self.beta, self.n_min, self.max_depth)

    @property
    def move_probs(self) -> MoveProbs:
        return MoveProbs(*self.moves)

    @property
    def n_sweeps(self) -> int:
        return self.n_burn + self.n_draws * self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moves"] = list(self.moves)
        return d

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        d = dict(d)
        if "moves" in d:
            d["moves"] = tuple(d["moves"])
        return cls(**d)


def design_matrix(data: SurvivalDataset, arm=None, drop_reference=False) -> np.ndarray:
    """Treatment indicator columns followed by the measured covariates.

    ``arm`` overrides every row's treatment (counterfactual copy). Columns
    flagged unmeasured never enter the design.
    """
    a = data.a if arm is None else np.full(data.n, int(arm))
    first = 2 if drop_reference else 1
    ind = [(a == j).astype(float) for j in range(first, data.n_treatments + 1)]
    x = data.measured().x if data.unmeasured else data.x
    return np.column_stack(ind + [x]) if x.shape[1] else np.column_stack(ind)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------------------
# posterior storage
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PosteriorStore:
    """Retained draws.

    Attributes
    ----------
    f_cf : (D, J, N) array
        ``f`` (un-centered, log-time units) for each row under each arm.
    b : (D, K) array
    sigma2, tau2, alpha : (D,) arrays
    chain : (D,) int array
        Chain that produced each draw.
    a, cluster : (N,) int arrays
        Observed treatment and cluster (1-based).
    """

    f_cf: np.ndarray
    b: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    alpha: np.ndarray
    chain: np.ndarray
    a: np.ndarray
    cluster: np.ndarray
    trt_labels: tuple
    cluster_labels: tuple
    mu_aft: float
    sigma_aft: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        D = self.f_cf.shape[0]
        for name in ("b", "sigma2", "tau2", "alpha", "chain"):
            if getattr(self, name).shape[0] != D:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {D}")
        for name in ("sigma2", "tau2", "alpha"):
            if not np.all(getattr(self, name) > 0):
                raise NumericalError(f"non-positive {name} draw in store")
        self.trt_labels = tuple(self.trt_labels)
        self.cluster_labels = tuple(self.cluster_labels)
        self.mu_aft, self.sigma_aft = float(self.mu_aft), float(self.sigma_aft)

    @property
    def n_draws(self) -> int:
        return self.f_cf.shape[0]

    @property
    def n(self) -> int:
        return self.f_cf.shape[2]

    @property
    def n_treatments(self) -> int:
        return self.f_cf.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.b.shape[1]

    def arm(self, label) -> int:
        """0-based arm position of a treatment label."""
        s = str(label)
        if s in self.trt_labels:
            return self.trt_labels.index(s)
        raise DataError(f"unknown treatment label {label!r}")

    _ARRAYS = ("f_cf", "b", "sigma2", "tau2", "alpha", "chain", "a", "cluster")

    def save(self, path) -> Path:
        path = Path(path)
        head = {
            "store_version": STORE_VERSION,
            "trt_labels": list(self.trt_labels),
            "cluster_labels": list(self.cluster_labels),
            "mu_aft": self.mu_aft,
            "sigma_aft": self.sigma_aft,
            "meta": self.meta,
        }
        arrays = {k: getattr(self, k) for k in self._ARRAYS}
        with path.open("wb") as fh:
            np.savez(fh, header=np.array(json.dumps(head, sort_keys=True, default=_json_default)), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "PosteriorStore":
        try:
            with np.load(path, allow_pickle=False) as z:
                head = json.loads(str(z["header"]))
                arrays = {k: z[k] for k in cls._ARRAYS}
        except (OSError, ValueError, KeyError) as e:
            raise CheckpointError(f"cannot read posterior store {path}: {e}") from None
        if head.get("store_version") != STORE_VERSION:
            raise CheckpointError(f"store version {head.get('store_version')} != {STORE_VERSION}")
        return cls(
            **arrays, trt_labels=head["trt_labels"], cluster_labels=head["cluster_labels"],
            mu_aft=head["mu_aft"], sigma_aft=head["sigma_aft"], meta=head["meta"],
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in self._ARRAYS:
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        h.update(repr((self.mu_aft, self.sigma_aft, self.trt_labels, self.cluster_labels)).encode())
        return h.hexdigest()

    def equals(self, other: "PosteriorStore") -> bool:
        return self.checksum() == other.checksum()

    @classmethod
    def merge(cls, stores) -> "PosteriorStore":
        """Concatenate draws of several chains, in the given order."""
        stores = list(stores)
        first = stores[0]
        for s in stores[1:]:
            if s.f_cf.shape[1:] != first.f_cf.shape[1:] or s.mu_aft != first.mu_aft:
                raise ValueError("stores come from different datasets")
        cat = {k: np.concatenate([getattr(s, k) for s in stores]) for k in ("f_cf", "b", "sigma2", "tau2", "alpha", "chain")}
        meta = dict(first.meta)
        meta["chains"] = [s.meta.get("chain", i) for i, s in enumerate(stores)]
        return cls(**cat, a=first.a, cluster=first.cluster, trt_labels=first.trt_labels,
                   cluster_labels=first.cluster_labels, mu_aft=first.mu_aft, sigma_aft=first.sigma_aft, meta=meta)


def export_trace(store: PosteriorStore, path) -> Path:
    """Write one row per retained draw: draw, sigma, tau, alpha, b_1..b_K."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", "sigma", "tau", "alpha"] + [f"b_{k}" for k in range(1, store.n_clusters + 1)])
        sig, tau = np.sqrt(store.sigma2), np.sqrt(store.tau2)
        for d in range(store.n_draws):
            w.writerow([d + 1, repr(float(sig[d])), repr(float(tau[d])), repr(float(store.alpha[d]))]
                       + [repr(float(v)) for v in store.b[d]])
    return path


def read_trace(path) -> dict:
    """Columns of a trace file as float arrays (``draw`` as int)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}
    cols["draw"] = cols["draw"].astype(np.int64)
    return cols


# ---------------------------------------------------------------------------
# the chain
# ---------------------------------------------------------------------------


@dataclass
class SamplerState:
    """Markov-chain state (the ensemble holds the trees and current fit)."""

    ensemble: TreeEnsemble
    re: RandomEffectsState
    sigma2: float
    z: np.ndarray  # complete-data centered log-times, unadjusted
    sweep: int = 0


class Chain:
    """One Markov chain bound to a dataset.

    ``offset`` is a per-row shift subtracted from the complete-data
    log-times before the model sees them (used by the sensitivity
    analysis); ``None`` means no shift.
    """

    def __init__(self, data, cfg: SamplerConfig, chain=0, replicate=(0, 0), offset=None):
        self.data = data
        self.cfg = cfg
        self.chain = int(chain)
        self.replicate = tuple(int(r) for r in replicate)
        self.offset = None if offset is None else np.asarray(offset, dtype=float).copy()
        if self.offset is not None and self.offset.shape != (data.n,):
            raise ValueError("offset must have one entry per row")
        self.centering: CenteringInfo = fit_centering(data)
        self.z_obs = center_responses(data, self.centering)
        self.delta = np.asarray(data.delta)
        self.cl = np.asarray(data.cluster) - 1
        self.n_k = data.cluster_sizes()
        W = design_matrix(data, drop_reference=cfg.drop_reference)
        self.cutpoints = Cutpoints.from_design(W, cfg.n_cut)
        self.Xb = self.cutpoints.bin(W)
        J = data.n_treatments
        self.Xb_cf = np.concatenate(
            [self.cutpoints.bin(design_matrix(data, j, cfg.drop_reference)) for j in range(1, J + 1)], axis=1
        )
        self.rng = chain_stream(cfg.seed, self.chain, self.replicate)
        self.step_log = None
        self._init_state()
        self._alloc()

    # -- setup ---------------------------------------------------------
    def _init_state(self):
        cfg, data = self.cfg, self.data
        W0 = design_matrix(data, drop_reference=True)
        re, sigma0 = init_random_effects(data, self.centering, design=W0)
        if not sigma0 > 0:
            sigma0 = self.centering.sigma_aft
        self.sigma_prior = SigmaPrior(cfg.nu, calibrate_lambda(sigma0, cfg.nu, cfg.q))
        leaf_sd = 4.0 * self.centering.sigma_aft / (2.0 * cfg.k * math.sqrt(cfg.n_trees))
        ens = TreeEnsemble(cfg.n_trees, self.cutpoints, leaf_sd, cfg.tree_prior, cfg.move_probs)
        ens.attach(Xb=self.Xb)
        self.state = SamplerState(ens, re, sigma0**2, self.z_obs.copy(), 0)

    def _alloc(self):
        D, J, N, K = self.cfg.n_draws, self.data.n_treatments, self.data.n, self.data.n_clusters
        self.f_cf = np.empty((D, J, N))
        self.b = np.empty((D, K))
        self.sigma2 = np.empty(D)
        self.tau2 = np.empty(D)
        self.alpha = np.empty(D)
        self.kept = 0

    # -- one sweep -----------------------------------------------------
    def _log(self, name):
        if self.step_log is not None:
            self.step_log.append(name)

    def responses(self) -> np.ndarray:
        z = self.state.z
        return z if self.offset is None else z - self.offset

    def sweep(self):
        st, rng, ens = self.state, self.rng, self.state.ensemble
        y = self.responses()
        # 1. random effects
        st.re.b = draw_all_b(y - ens.fit, self.cl, self.n_k, st.re, st.sigma2, rng)
        self._log("b")
        st.re.tau2 = draw_tau2(st.re, rng)
        self._log("tau2")
        st.re.alpha = draw_alpha(st.re, rng, self.cfg.alpha_update)
        self._log("alpha")
        # 2. trees and residual variance
        bvec = st.re.b[self.cl]
        ens.backfit_step(y - bvec, st.sigma2, rng)
        self._log("trees")
        st.sigma2 = draw_sigma2(y - ens.fit - bvec, self.sigma_prior, rng)
        self._log("sigma2")
        # 3. latent censored log-times
        mean = ens.fit + bvec
        if self.offset is not None:
            mean = mean + self.offset
        impute_censored(self.z_obs, self.delta, mean, st.sigma2, rng, out=st.z)
        self._log("impute")
        st.sweep += 1
        if not (math.isfinite(st.sigma2) and np.all(np.isfinite(st.re.b)) and 0 < st.re.tau2 < math.inf):
            raise NumericalError(
                f"non-finite state at sweep {st.sweep}",
                {"sigma2": st.sigma2, "tau2": st.re.tau2, "alpha": st.re.alpha},
            )

    def _retain(self):
        st, d = self.state, self.kept
        fcf = st.ensemble.evaluate(Xb=self.Xb_cf)
        self.f_cf[d] = fcf.reshape(self.data.n_treatments, self.data.n) + self.centering.mu_aft
        self.b[d] = st.re.b
        self.sigma2[d] = st.sigma2
        self.tau2[d] = st.re.tau2
        self.alpha[d] = st.re.alpha
        self.kept += 1

    def run(self, until=None, checkpoint=None, every=0):
        """Advance to sweep ``until`` (default: the end of the run).

        With ``checkpoint`` and ``every > 0`` the state is written every
        ``every`` sweeps.
        """
        cfg = self.cfg
        stop = cfg.n_sweeps if until is None else min(int(until), cfg.n_sweeps)
        while self.state.sweep < stop:
            self.sweep()
            s = self.state.sweep
            if s > cfg.n_burn and (s - cfg.n_burn) % cfg.thin == 0:
                self._retain()
            if checkpoint is not None and every > 0 and s % every == 0:
                self.save_checkpoint(checkpoint)
        return self

    @property
    def done(self) -> bool:
        return self.state.sweep >= self.cfg.n_sweeps

    def result(self) -> PosteriorStore:
        if self.kept != self.cfg.n_draws:
            raise RuntimeError(f"chain has {self.kept} of {self.cfg.n_draws} draws; run it first")
        data = self.data
        meta = {
            "config": self.cfg.to_dict(),
            "chain": self.chain,
            "replicate": list(self.replicate),
            "data_checksum": data.checksum(),
            "lambda": self.sigma_prior.lam,
            "leaf_sd": self.state.ensemble.leaf_sd,
            "accept": (self.state.ensemble.accepted / np.maximum(self.state.ensemble.proposed, 1)).tolist(),
            "adjusted": self.offset is not None,
        }
        return PosteriorStore(
            f_cf=self.f_cf, b=self.b, sigma2=self.sigma2, tau2=self.tau2, alpha=self.alpha,
            chain=np.full(self.cfg.n_draws, self.chain, dtype=np.int64), a=np.asarray(data.a),
            cluster=np.asarray(data.cluster), trt_labels=data.trt_labels, cluster_labels=data.cluster_labels,
            mu_aft=self.centering.mu_aft, sigma_aft=self.centering.sigma_aft, meta=meta,
        )

    # -- checkpointing -------------------------------------------------
    def save_checkpoint(self, path) -> Path:
        """Write the full chain state, retained draws and RNG state.

        The write goes through a temporary file and an atomic rename.
        """
        path = Path(path)
        st = self.state
        rec = st.ensemble.to_records()
        head = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "chain": self.chain,
            "replicate": list(self.replicate),
            "data_checksum": self.data.checksum(),
            "sweep": st.sweep,
            "kept": self.kept,
            "sigma2": st.sigma2,
            "alpha": st.re.alpha,
            "tau2": st.re.tau2,
            "rng": self.rng.bit_generator.state,
            "ensemble": {k: v for k, v in rec.items() if k != "nodes"},
        }
        arrays = {
            "nodes": rec["nodes"], "fit": st.ensemble.fit, "z": st.z, "b_state": st.re.b,
            "f_cf": self.f_cf[: self.kept], "b": self.b[: self.kept], "sigma2": self.sigma2[: self.kept],
            "tau2": self.tau2[: self.kept], "alpha": self.alpha[: self.kept],
            "accepted": st.ensemble.accepted, "proposed": st.ensemble.proposed,
            "offset": np.empty(0) if self.offset is None else self.offset,
        }
        tmp = path.with_name(path.name + ".tmp")
        try:
            with tmp.open("wb") as fh:
                np.savez(fh, header=np.array(json.dumps(head, default=_json_default)), **arrays)
            os.replace(tmp, path)
        except OSError as e:
            raise CheckpointError(f"checkpoint write failed: {e}") from e
        return path

    @classmethod
    def resume(cls, path, data) -> "Chain":
        """Rebuild a chain from `save_checkpoint` output; continues bit-exactly."""
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as z:
                head = json.loads(str(z["header"]))
                arr = {k: z[k] for k in z.files if k != "header"}
        except Exception as e:  # zip, pickle and JSON errors all mean "unreadable"
            raise CheckpointError(f"corrupt checkpoint {path}: {e}") from None
        ver = head.get("checkpoint_version")
        if ver != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {ver} is not supported (expected {CHECKPOINT_VERSION})")
        if head["data_checksum"] != data.checksum():
            raise CheckpointError("checkpoint was written for a different dataset")
        cfg = SamplerConfig.from_dict(head["config"])
        offset = arr["offset"] if arr["offset"].size else None
        ch = cls(data, cfg, head["chain"], tuple(head["replicate"]), offset)
        rec = dict(head["ensemble"], nodes=arr["nodes"])
        ens = TreeEnsemble.from_records(rec, ch.cutpoints)
        ens.attach(Xb=ch.Xb)
        ens.fit = arr["fit"].copy()
        ens.accepted, ens.proposed = arr["accepted"].copy(), arr["proposed"].copy()
        re = RandomEffectsState(arr["b_state"].copy(), head["alpha"], head["tau2"])
        ch.state = SamplerState(ens, re, head["sigma2"], arr["z"].copy(), head["sweep"])
        k = head["kept"]
        ch.kept = k
        for name in ("f_cf", "b", "sigma2", "tau2", "alpha"):
            getattr(ch, name)[:k] = arr[name]
        ch.rng.bit_generator.state = head["rng"]
        return ch


def _run_chain(args):
    data, cfg, chain, replicate, offset = args
    return Chain(data, cfg, chain, replicate, offset).run().result()


def fit(data: SurvivalDataset, cfg: SamplerConfig = SamplerConfig(), offset=None, replicate=(0, 0)) -> PosteriorStore:
    """Run ``cfg.chains`` chains and merge their draws (chain order).

    Chains run in worker processes when ``cfg.workers > 1``.
    """
    jobs = [(data, cfg, c, replicate, offset) for c in range(cfg.chains)]
    if cfg.workers > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.chains)) as ex:
            stores = list(ex.map(_run_chain, jobs))
    else:
        stores = [_run_chain(j) for j in jobs]
    return stores[0] if len(stores) == 1 else PosteriorStore.merge(stores)


def run_manifest(command, cfg: SamplerConfig | None, data: SurvivalDataset | None, outputs, wall_time, extra=None) -> dict:
    """Reproducibility record for one run."""
    out = {
        "command": command,
        "config": None if cfg is None else cfg.to_dict(),
        "seed": None if cfg is None else cfg.seed,
        "data_checksum": None if data is None else data.checksum(),
        "versions": {
            "riaftbart": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": wall_time,
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    if extra:
        out.update(extra)
    return out


def write_manifest(manifest: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
