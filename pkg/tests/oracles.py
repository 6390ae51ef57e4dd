"""Shared reference computations for the test suites."""

import math

import numpy as np

from riaftbart.data import SurvivalDataset
from riaftbart.sampler import Chain, SamplerConfig
from riaftbart.trees import sample_tree_from_prior

GEWEKE_STATS = ("log sigma2", "log tau2", "log alpha", "atan b_1", "log sum b^2", "mean f")


def _stats(ens_fit, b, sigma2, tau2, alpha):
    return np.array([math.log(sigma2), math.log(tau2), math.log(alpha), math.atan(b[0]),
                     math.log(float(b @ b)), float(np.mean(ens_fit))])


def _batch_se(x, n_batch=50):
    m = x.size // n_batch
    means = x[: m * n_batch].reshape(n_batch, m).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batch)


def geweke(n_mc=20_000, n_sc=40_000, seed=0, alpha_form="exact", N=12, K=3, H=3):
    """Geweke joint-distribution test on an uncensored toy problem.

    Hyperparameters (centering, variance prior scale, leaf s.d.) are fixed
    from an initial dataset so the prior does not move with the data.
    Heavy-tailed quantities enter through log or arctan transforms so each
    statistic has a finite variance. Returns ``{name: z}``.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(N, 1))
    a = np.resize([1, 2], N)
    cl = np.resize(np.arange(1, K + 1), N)
    data = SurvivalDataset(x, a, np.exp(rng.normal(size=N)), np.ones(N, int), cl)
    cfg = SamplerConfig(n_trees=H, n_draws=1, n_burn=0, n_min=1, alpha_update=alpha_form, seed=seed)
    ch = Chain(data, cfg)
    ens = ch.state.ensemble
    nu, lam, lsd, prior = ch.sigma_prior.nu, ch.sigma_prior.lam, ens.leaf_sd, ens.prior

    def prior_draw():
        al, t2 = 1.0 / rng.gamma(1.0), 1.0 / rng.gamma(1.0)
        b = math.sqrt(al * t2) * rng.standard_normal(K)
        s2 = 0.5 * nu * lam / rng.gamma(0.5 * nu)
        trees = [sample_tree_from_prior(rng, ch.cutpoints, prior, lsd, Xb=ch.Xb) for _ in range(H)]
        return al, t2, b, s2, trees

    mc = np.empty((n_mc, len(GEWEKE_STATS)))
    for i in range(n_mc):
        al, t2, b, s2, trees = prior_draw()
        fit = sum(t.predict(ch.Xb) for t in trees)
        mc[i] = _stats(fit, b, s2, t2, al)

    al, t2, b, s2, trees = prior_draw()
    st = ch.state
    ens.trees = trees
    ens.attach(Xb=ch.Xb)
    st.re.alpha, st.re.tau2, st.re.b, st.sigma2 = al, t2, b, s2
    sc = np.empty((n_sc, len(GEWEKE_STATS)))
    c0 = cl - 1
    for i in range(n_sc):
        z = ens.fit + st.re.b[c0] + math.sqrt(st.sigma2) * rng.standard_normal(N)
        ch.z_obs[:] = z
        st.z[:] = z
        ch.sweep()
        sc[i] = _stats(ens.fit, st.re.b, st.sigma2, st.re.tau2, st.re.alpha)

    out = {}
    for j, name in enumerate(GEWEKE_STATS):
        se = math.hypot(mc[:, j].std(ddof=1) / math.sqrt(n_mc), _batch_se(sc[:, j]))
        out[name] = (mc[:, j].mean() - sc[:, j].mean()) / se
    return out


def lognormal_toy(n=20, seed=0, mu=1.0, sd=0.5, K=2, J=2, p=1):
    rng = np.random.default_rng(seed)
    return SurvivalDataset(rng.normal(size=(n, p)), np.resize(np.arange(1, J + 1), n),
                           np.exp(mu + sd * rng.normal(size=n)), np.ones(n, int),
                           np.resize(np.arange(1, K + 1), n))
