"""Effect-recovery benchmark at the default design and sampler scale.

Opt-in and slow (hours on one core). Prints relative bias, interval
coverage and runtime over ``--reps`` replicates of a scenario::

    python scripts/benchmark.py --scenario ph10 --reps 25 --workers 8
"""

import argparse
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from riaftbart import effects, simulation as sim
from riaftbart.sampler import SamplerConfig, fit


def one(args):
    scenario, rep, cfg = args
    res = sim.gen_dataset(sim.scenario_config(scenario, censoring_mode="dataset"), rep)
    logT = np.log(res.T_all)
    truth = float(np.mean(logT[:, 0] - logT[:, 1]))
    e = effects.cate(fit(res.dataset, cfg), "1", "2")
    return truth, e.estimate, e.lower, e.upper


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="ph10", choices=sim.SCENARIOS)
    ap.add_argument("--reps", type=int, default=25)
    ap.add_argument("--draws", type=int, default=SamplerConfig.n_draws)
    ap.add_argument("--burnin", type=int, default=SamplerConfig.n_burn)
    ap.add_argument("--trees", type=int, default=SamplerConfig.n_trees)
    ap.add_argument("--workers", type=int, default=1)
    a = ap.parse_args()
    t0 = time.time()
    jobs = [(a.scenario, r, SamplerConfig(n_draws=a.draws, n_burn=a.burnin, n_trees=a.trees, seed=r))
            for r in range(a.reps)]
    with ProcessPoolExecutor(a.workers) as ex:
        out = np.array(list(ex.map(one, jobs)))
    truth, est, lo, hi = out.T
    print(f"scenario {a.scenario}: {a.reps} replicates")
    print(f"mean relative bias {np.mean((est - truth) / truth):+.4f}")
    print(f"coverage {np.mean((lo <= truth) & (truth <= hi)):.3f}")
    print(f"runtime {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
