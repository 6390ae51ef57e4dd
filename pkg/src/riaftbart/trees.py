"""Sum-of-trees mean function: tree prior, Metropolis-Hastings structure
moves, conjugate leaf updates and the residual-variance draw.

Trees are stored as complete binary heaps (children of node ``i`` are
``2i+1`` and ``2i+2``) over a binned design matrix. A split ``(v, j)`` sends
a row right when its bin index in column ``v`` exceeds ``j``, i.e. when the
raw value is ``>= cuts[v][j]``.

Tree prior: a node at depth ``d`` with at least one available rule splits
with probability ``gamma * (1 + d) ** -beta``; the rule is a uniformly chosen
available variable and then a uniformly chosen available cut index. Nodes at
``max_depth`` are always leaves. Trees with a leaf holding fewer than
``n_min`` training rows get zero posterior mass (the sampler rejects them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreePrior:
    gamma: float = 0.95
    beta: float = 2.0
    n_min: int = 5
    max_depth: int = 8

    def p_split(self, depth: int) -> float:
        if depth >= self.max_depth:
            return 0.0
        return self.gamma * (1.0 + depth) ** (-self.beta)


@dataclass(frozen=True)
class MoveProbs:
    grow: float = 0.25
    prune: float = 0.25
    change: float = 0.40
    swap: float = 0.10

    def __post_init__(self):
        tot = self.grow + self.prune + self.change + self.swap
        if abs(tot - 1.0) > 1e-9 or min(self.grow, self.prune, self.change, self.swap) < 0:
            raise ValueError("move probabilities must be non-negative and sum to 1")
        if (self.grow > 0) != (self.prune > 0):
            raise ValueError("grow and prune are mutual reverses: both or neither must be positive")

    def cumulative(self):
        return np.cumsum([self.grow, self.prune, self.change, self.swap])


@dataclass(frozen=True)
class SigmaPrior:
    """Inverse-gamma ``IG(nu/2, nu*lam/2)`` prior on the residual variance."""

    nu: float = 3.0
    lam: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.lam > 0):
            raise ValueError("nu and lambda must be positive")


class Cutpoints:
    """Per-column split values of a design matrix."""

    def __init__(self, cuts):
        self.cuts = [np.asarray(c, dtype=float) for c in cuts]
        self.ncuts = np.array([c.size for c in self.cuts], dtype=np.int64)

    @classmethod
    def from_design(cls, W, n_cut: int = 100) -> "Cutpoints":
        """Binary columns get the cut 0.5; columns with at most ``n_cut + 1``
        distinct values get the midpoints between them; others get ``n_cut``
        equally spaced interior quantiles."""
        W = np.asarray(W, dtype=float)
        cuts = []
        for v in range(W.shape[1]):
            u = np.unique(W[:, v])
            if u.size <= 1:
                cuts.append(np.empty(0))
            elif u.size == 2 and u[0] == 0 and u[1] == 1:
                cuts.append(np.array([0.5]))
            elif u.size <= n_cut + 1:
                cuts.append((u[:-1] + u[1:]) / 2)
            else:
                q = np.quantile(W[:, v], np.linspace(0, 1, n_cut + 2)[1:-1])
                cuts.append(np.unique(q))
        return cls(cuts)

    @property
    def width(self) -> int:
        return len(self.cuts)

    def bin(self, W) -> np.ndarray:
        """Bin indices, shape ``(P, N)`` (column-major for fast row gathers)."""
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[1] != self.width:
            raise ValueError(f"design has width {W.shape[-1]}, expected {self.width}")
        out = np.empty((self.width, W.shape[0]), dtype=np.int32)
        for v, c in enumerate(self.cuts):
            out[v] = np.searchsorted(c, W[:, v], side="right")
        return out


def _depth(i: int) -> int:
    return (i + 1).bit_length() - 1


class DecisionTree:
    """One regression tree in heap layout.

    ``var[i] >= 0`` marks an internal node, ``var[i] == -1`` a leaf and
    ``var[i] == -2`` an absent slot.
    """

    __slots__ = ("var", "cut", "value")

    def __init__(self, max_depth: int, value: float = 0.0):
        m = 2 ** (max_depth + 1) - 1
        self.var = np.full(m, -2, dtype=np.int64)
        self.cut = np.zeros(m, dtype=np.int64)
        self.value = np.zeros(m)
        self.var[0] = -1
        self.value[0] = value

    def copy(self) -> "DecisionTree":
        t = DecisionTree.__new__(DecisionTree)
        t.var, t.cut, t.value = self.var.copy(), self.cut.copy(), self.value.copy()
        return t

    @property
    def size(self) -> int:
        return self.var.size

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.var == -1)

    def internal(self) -> np.ndarray:
        return np.flatnonzero(self.var >= 0)

    def nogs(self) -> np.ndarray:
        """Internal nodes whose children are both leaves."""
        inner = self.internal()
        return inner[(self.var[2 * inner + 1] == -1) & (self.var[2 * inner + 2] == -1)]

    def depth(self) -> int:
        leaves = self.leaves()
        return max(_depth(int(i)) for i in leaves)

    def region(self, i: int, ncuts: np.ndarray):
        """Available cut-index range ``[lo, hi)`` per variable at node ``i``."""
        lo = np.zeros_like(ncuts)
        hi = ncuts.copy()
        while i > 0:
            parent = (i - 1) // 2
            v, c = self.var[parent], self.cut[parent]
            if i == 2 * parent + 1:
                hi[v] = min(hi[v], c)
            else:
                lo[v] = max(lo[v], c + 1)
            i = parent
        return lo, hi

    def route(self, Xb: np.ndarray) -> np.ndarray:
        """Leaf index of each column of the binned design ``Xb`` (P, N)."""
        n = Xb.shape[1]
        idx = np.zeros(n, dtype=np.int64)
        if self.var[0] < 0:
            return idx
        cols = np.arange(n)
        for _ in range(self.depth()):
            v = self.var[idx]
            inner = v >= 0
            if not inner.any():
                break
            right = Xb[np.where(inner, v, 0), cols] > self.cut[idx]
            idx = np.where(inner, 2 * idx + 1 + right, idx)
        return idx

    def predict(self, Xb: np.ndarray) -> np.ndarray:
        return self.value[self.route(Xb)]

    def log_prior(self, prior: TreePrior, ncuts: np.ndarray) -> float:
        """Log prior mass of the tree structure (leaf values excluded)."""
        total = 0.0
        stack = [(0, np.zeros_like(ncuts), ncuts.copy())]
        while stack:
            i, lo, hi = stack.pop()
            d = _depth(i)
            avail = hi - lo
            nvars = int(np.count_nonzero(avail > 0))
            ps = prior.p_split(d) if nvars else 0.0
            if self.var[i] == -1:
                if ps:
                    total += math.log1p(-ps)
                continue
            v, c = int(self.var[i]), int(self.cut[i])
            if ps == 0.0 or not (lo[v] <= c < hi[v]):
                return -math.inf
            total += math.log(ps) - math.log(nvars) - math.log(avail[v])
            lhi = hi.copy()
            lhi[v] = c
            rlo = lo.copy()
            rlo[v] = c + 1
            stack.append((2 * i + 1, lo, lhi))
            stack.append((2 * i + 2, rlo, hi))
        return total


def _splittable(tree: DecisionTree, i: int, prior: TreePrior, ncuts: np.ndarray) -> bool:
    if _depth(i) >= prior.max_depth:
        return False
    lo, hi = tree.region(i, ncuts)
    return bool(np.any(hi > lo))


def _draw_rule(rng, lo, hi):
    avail = np.flatnonzero(hi > lo)
    v = int(avail[rng.integers(avail.size)])
    c = int(lo[v] + rng.integers(hi[v] - lo[v]))
    return v, c


def leaf_loglik(n, s, sigma2, leaf_var):
    """Partition-dependent part of the leaf-marginal log likelihood.

    For a leaf with ``n`` responses summing to ``s``, leaf value
    ``mu ~ N(0, leaf_var)`` and noise variance ``sigma2``.
    """
    n = np.asarray(n, dtype=float)
    denom = sigma2 + n * leaf_var
    return -0.5 * np.log(denom / sigma2) + 0.5 * leaf_var * np.square(s) / (sigma2 * denom)


def leaf_posterior(n, s, sigma2, leaf_var):
    """Mean and variance of the conjugate normal leaf update (prior mean 0)."""
    denom = n * leaf_var + sigma2
    return leaf_var * s / denom, sigma2 * leaf_var / denom


class TreeEnsemble:
    """``H`` trees plus the bookkeeping needed for backfitting on one design.

    Parameters
    ----------
    n_trees : int
    cutpoints : Cutpoints
    leaf_sd : float
        Prior s.d. of every leaf value.
    prior : TreePrior
    moves : MoveProbs
    """

    def __init__(self, n_trees, cutpoints, leaf_sd, prior=TreePrior(), moves=MoveProbs()):
        if n_trees < 1:
            raise ValueError("need at least one tree")
        if not leaf_sd > 0:
            raise ValueError("leaf prior s.d. must be positive")
        self.cutpoints = cutpoints
        self.leaf_sd = float(leaf_sd)
        self.prior = prior
        self.moves = moves
        self.trees = [DecisionTree(prior.max_depth) for _ in range(n_trees)]
        self.Xb = None
        self.leaf_idx = None
        self.tree_fit = None
        self.fit = None
        self.accepted = np.zeros(4, dtype=np.int64)
        self.proposed = np.zeros(4, dtype=np.int64)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def leaf_var(self) -> float:
        return self.leaf_sd**2

    def attach(self, W=None, Xb=None):
        """Bind the training design; recomputes the per-tree routing and fits."""
        self.Xb = self.cutpoints.bin(W) if Xb is None else Xb
        n = self.Xb.shape[1]
        self.leaf_idx = np.empty((self.n_trees, n), dtype=np.int64)
        self.tree_fit = np.empty((self.n_trees, n))
        for h, t in enumerate(self.trees):
            self.leaf_idx[h] = t.route(self.Xb)
            self.tree_fit[h] = t.value[self.leaf_idx[h]]
        self.fit = self.tree_fit.sum(axis=0)
        return self

    def evaluate(self, W=None, Xb=None) -> np.ndarray:
        """Sum over trees of the leaf value each row reaches."""
        if Xb is None:
            Xb = self.cutpoints.bin(W)
        out = np.zeros(Xb.shape[1])
        for t in self.trees:
            out += t.predict(Xb)
        return out

    def depths(self) -> np.ndarray:
        return np.array([t.depth() for t in self.trees])

    def log_prior(self) -> float:
        return sum(t.log_prior(self.prior, self.cutpoints.ncuts) for t in self.trees)

    def copy(self) -> "TreeEnsemble":
        new = TreeEnsemble.__new__(TreeEnsemble)
        new.__dict__.update(self.__dict__)
        new.trees = [t.copy() for t in self.trees]
        for k in ("leaf_idx", "tree_fit", "fit", "accepted", "proposed"):
            v = getattr(self, k)
            setattr(new, k, None if v is None else v.copy())
        return new

    # -- serialization -------------------------------------------------
    def to_records(self) -> dict:
        """Node list per tree: tree, node id, parent, split var, cut index,
        cut value and leaf value (``var == -1`` marks leaves)."""
        rows = []
        for h, t in enumerate(self.trees):
            for i in np.flatnonzero(t.var != -2):
                v = int(t.var[i])
                cv = float(self.cutpoints.cuts[v][t.cut[i]]) if v >= 0 else math.nan
                rows.append((h, i, (i - 1) // 2 if i else -1, v, int(t.cut[i]) if v >= 0 else -1, cv, t.value[i]))
        arr = np.array(rows, dtype=float).reshape(-1, 7)
        return {
            "format_version": FORMAT_VERSION,
            "n_trees": self.n_trees,
            "leaf_sd": self.leaf_sd,
            "prior": [self.prior.gamma, self.prior.beta, self.prior.n_min, self.prior.max_depth],
            "moves": [self.moves.grow, self.moves.prune, self.moves.change, self.moves.swap],
            "nodes": arr,
        }

    @classmethod
    def from_records(cls, rec: dict, cutpoints: Cutpoints) -> "TreeEnsemble":
        if int(rec["format_version"]) != FORMAT_VERSION:
            raise ValueError(f"ensemble format version {rec['format_version']} != {FORMAT_VERSION}")
        g, b, nmin, md = rec["prior"]
        prior = TreePrior(float(g), float(b), int(nmin), int(md))
        ens = cls(int(rec["n_trees"]), cutpoints, float(rec["leaf_sd"]), prior, MoveProbs(*map(float, rec["moves"])))
        for h, i, _parent, v, c, _cv, val in np.asarray(rec["nodes"]):
            t = ens.trees[int(h)]
            t.var[int(i)] = int(v)
            t.cut[int(i)] = max(int(c), 0)
            t.value[int(i)] = val
        return ens

    # -- MCMC ----------------------------------------------------------
    def backfit_step(self, responses, sigma2, rng, use_likelihood=True):
        """One Bayesian-backfitting pass over all trees.

        For each tree: form the partial residual against the other trees,
        propose one structure move (accepted by Metropolis-Hastings with
        leaves integrated out), then redraw every leaf value from its
        conjugate normal conditional. ``use_likelihood=False`` targets the
        prior (used to check the move kernels). Requires `attach` first.
        """
        if self.fit is None:
            raise RuntimeError("attach a design before backfitting")
        responses = np.asarray(responses, dtype=float)
        if responses.shape != self.fit.shape:
            raise ValueError("responses length does not match the design")
        if not sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        for h in range(self.n_trees):
            partial = responses - self.fit + self.tree_fit[h]
            self._update_tree(h, partial, sigma2, rng, use_likelihood)
        return self

    def _update_tree(self, h, r, sigma2, rng, use_likelihood):
        tree = self.trees[h]
        idx = self.leaf_idx[h]
        prior, ncuts, lv = self.prior, self.cutpoints.ncuts, self.leaf_var
        m = tree.size
        cnt = np.bincount(idx, minlength=m)
        sums = np.bincount(idx, weights=r, minlength=m)
        ll = leaf_loglik if use_likelihood else (lambda n, s, s2, v: 0.0 * np.asarray(n, float))

        move = int(np.searchsorted(self.moves.cumulative(), rng.random(), side="right"))
        move = min(move, 3)
        self.proposed[move] += 1
        new_tree, new_idx = None, None

        if move == 0:  # GROW
            leaves = tree.leaves()
            ok = [int(i) for i in leaves if _splittable(tree, int(i), prior, ncuts)]
            if ok:
                eta = ok[rng.integers(len(ok))]
                lo, hi = tree.region(eta, ncuts)
                v, c = _draw_rule(rng, lo, hi)
                rows = np.flatnonzero(idx == eta)
                right = self.Xb[v, rows] > c
                nr = int(np.count_nonzero(right))
                nl = rows.size - nr
                if min(nl, nr) >= max(prior.n_min, 1):
                    sr = float(r[rows[right]].sum())
                    sl = float(sums[eta] - sr)
                    d = _depth(eta)
                    lhi = hi.copy()
                    lhi[v] = c
                    rlo = lo.copy()
                    rlo[v] = c + 1
                    p_child = prior.p_split(d + 1)
                    lp = math.log(prior.p_split(d)) - math.log1p(-prior.p_split(d))
                    for a, b_ in ((lo, lhi), (rlo, hi)):
                        if p_child and np.any(b_ > a):
                            lp += math.log1p(-p_child)
                    sib = eta - 1 if eta % 2 == 0 else eta + 1
                    parent_was_nog = eta > 0 and tree.var[sib] == -1
                    n_nogs_new = tree.nogs().size - int(parent_was_nog) + 1
                    log_a = (
                        float(ll(nl, sl, sigma2, lv) + ll(nr, sr, sigma2, lv) - ll(cnt[eta], sums[eta], sigma2, lv))
                        + lp + math.log(len(ok)) - math.log(n_nogs_new)
                        + math.log(self.moves.prune / self.moves.grow)
                    )
                    if math.log(rng.random()) < log_a:
                        tree.var[eta], tree.cut[eta] = v, c
                        tree.var[2 * eta + 1] = tree.var[2 * eta + 2] = -1
                        new_idx = idx.copy()
                        new_idx[rows] = 2 * eta + 1 + right
                        self.accepted[0] += 1
        elif move == 1:  # PRUNE
            nogs = tree.nogs()
            if nogs.size:
                eta = int(nogs[rng.integers(nogs.size)])
                lc, rc = 2 * eta + 1, 2 * eta + 2
                d = _depth(eta)
                lo, hi = tree.region(eta, ncuts)
                v, c = int(tree.var[eta]), int(tree.cut[eta])
                lhi = hi.copy()
                lhi[v] = c
                rlo = lo.copy()
                rlo[v] = c + 1
                p_child = prior.p_split(d + 1)
                lp = math.log(prior.p_split(d)) - math.log1p(-prior.p_split(d))
                n_child_split = 0
                for a, b_ in ((lo, lhi), (rlo, hi)):
                    if p_child and np.any(b_ > a):
                        lp += math.log1p(-p_child)
                    if d + 1 < prior.max_depth and np.any(b_ > a):
                        n_child_split += 1
                n_split_pruned = sum(
                    _splittable(tree, int(i), prior, ncuts) for i in tree.leaves()
                ) - n_child_split + 1
                n = cnt[lc] + cnt[rc]
                s = sums[lc] + sums[rc]
                log_a = -(
                    float(ll(cnt[lc], sums[lc], sigma2, lv) + ll(cnt[rc], sums[rc], sigma2, lv) - ll(n, s, sigma2, lv))
                    + lp + math.log(n_split_pruned) - math.log(nogs.size)
                    + math.log(self.moves.prune / self.moves.grow)
                )
                if math.log(rng.random()) < log_a:
                    tree.var[eta] = -1
                    tree.var[lc] = tree.var[rc] = -2
                    new_idx = np.where((idx == lc) | (idx == rc), eta, idx)
                    self.accepted[1] += 1
        else:  # CHANGE or SWAP: same structure, new rules
            inner = tree.internal()
            cand = None
            if move == 2 and inner.size:
                eta = int(inner[rng.integers(inner.size)])
                lo, hi = tree.region(eta, ncuts)
                v, c = _draw_rule(rng, lo, hi)
                cand = tree.copy()
                cand.var[eta], cand.cut[eta] = v, c
            elif move == 3 and inner.size:
                pairs = [(int(p), int(ch)) for p in inner for ch in (2 * p + 1, 2 * p + 2) if tree.var[ch] >= 0]
                if pairs:
                    p, ch = pairs[rng.integers(len(pairs))]
                    cand = tree.copy()
                    cand.var[p], cand.var[ch] = tree.var[ch], tree.var[p]
                    cand.cut[p], cand.cut[ch] = tree.cut[ch], tree.cut[p]
            if cand is not None:
                lp_new = cand.log_prior(prior, ncuts)
                if lp_new > -math.inf:
                    cidx = cand.route(self.Xb)
                    ccnt = np.bincount(cidx, minlength=m)
                    leaves = cand.leaves()
                    if ccnt[leaves].min() >= max(prior.n_min, 1):
                        csums = np.bincount(cidx, weights=r, minlength=m)
                        old_leaves = tree.leaves()
                        log_a = (
                            float(np.sum(ll(ccnt[leaves], csums[leaves], sigma2, lv)))
                            - float(np.sum(ll(cnt[old_leaves], sums[old_leaves], sigma2, lv)))
                            + lp_new - tree.log_prior(prior, ncuts)
                        )
                        if math.log(rng.random()) < log_a:
                            tree.var[:], tree.cut[:] = cand.var, cand.cut
                            new_idx = cidx
                            self.accepted[move] += 1

        if new_idx is not None:
            idx = new_idx
            self.leaf_idx[h] = idx
            cnt = np.bincount(idx, minlength=m)
            sums = np.bincount(idx, weights=r, minlength=m)
        leaves = tree.leaves()
        if use_likelihood:
            mean, var = leaf_posterior(cnt[leaves], sums[leaves], sigma2, lv)
        else:
            mean, var = np.zeros(leaves.size), np.full(leaves.size, lv)
        tree.value[leaves] = mean + np.sqrt(var) * rng.standard_normal(leaves.size)
        new_fit = tree.value[idx]
        self.fit += new_fit - self.tree_fit[h]
        self.tree_fit[h] = new_fit


def sample_tree_from_prior(rng, cutpoints: Cutpoints, prior: TreePrior, leaf_sd: float, Xb=None, max_tries=10_000):
    """Draw one tree (structure and leaves) from the prior.

    With a binned design ``Xb`` the draw is conditioned on every leaf holding
    at least ``prior.n_min`` rows (rejection sampling), matching the
    sampler's target.
    """
    ncuts = cutpoints.ncuts
    for _ in range(max_tries):
        t = DecisionTree(prior.max_depth)
        stack = [(0, np.zeros_like(ncuts), ncuts.copy())]
        while stack:
            i, lo, hi = stack.pop(0)
            ps = prior.p_split(_depth(i)) if np.any(hi > lo) else 0.0
            if ps and rng.random() < ps:
                v, c = _draw_rule(rng, lo, hi)
                t.var[i], t.cut[i] = v, c
                t.var[2 * i + 1] = t.var[2 * i + 2] = -1
                lhi = hi.copy()
                lhi[v] = c
                rlo = lo.copy()
                rlo[v] = c + 1
                stack.append((2 * i + 1, lo, lhi))
                stack.append((2 * i + 2, rlo, hi))
        leaves = t.leaves()
        if Xb is not None:
            cnt = np.bincount(t.route(Xb), minlength=t.size)
            if cnt[leaves].min() < max(prior.n_min, 1):
                continue
        t.value[leaves] = leaf_sd * rng.standard_normal(leaves.size)
        return t
    raise RuntimeError("could not draw a valid tree from the prior")


def draw_sigma2(residuals, prior: SigmaPrior, rng) -> float:
    """Draw from ``IG((N + nu)/2, (SSR + nu*lam)/2)``."""
    residuals = np.asarray(residuals, dtype=float)
    if residuals.size == 0:
        raise ValueError("residual vector is empty")
    shape = 0.5 * (residuals.size + prior.nu)
    scale = 0.5 * (float(residuals @ residuals) + prior.nu * prior.lam)
    return scale / rng.gamma(shape)


def calibrate_lambda(sigma0: float, nu: float = 3.0, q: float = 0.9, rtol: float = 1e-10) -> float:
    """Scale ``lam`` such that ``P(sigma < sigma0) = q`` under ``IG(nu/2, nu*lam/2)``.

    Solved by bisection in log-space on the inverse-gamma CDF.
    """
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    a = nu / 2.0

    def prob(lam):  # P(sigma^2 < sigma0^2), decreasing in lam
        return special.gammaincc(a, (nu * lam / 2.0) / sigma0**2)

    lo, hi = sigma0**2, sigma0**2
    while prob(lo) < q:
        lo /= 2.0
    while prob(hi) > q:
        hi *= 2.0
    while hi - lo > rtol * lo:
        mid = math.sqrt(lo * hi)
        if mid <= lo or mid >= hi:
            break
        if prob(mid) > q:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)
