"""Random stream derivation.

Every stochastic task gets its own PCG64 generator seeded by
``SeedSequence(seed, spawn_key=key)``. Keys are tuples of non-negative ints
whose first element names the task family:

- ``(0, q1, q2, chain)``: one MCMC chain. A plain fit is replicate ``(0, 0)``.
- ``(1, q1)``: generalized propensity score draw ``q1``.
- ``(2,)``: confounding-function prior draws.
- ``(3, rep)``: simulation replicate ``rep``.
- ``(4,)``: censoring-rate tuning sample.

Streams with distinct keys are statistically independent and never overlap.
"""

import numpy as np

FIT, GPS, CONFOUNDING, SIMULATION, TUNING = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def chain_stream(seed: int, chain: int = 0, replicate=(0, 0)) -> np.random.Generator:
    return stream(seed, FIT, replicate[0], replicate[1], chain)
