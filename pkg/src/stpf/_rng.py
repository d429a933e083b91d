"""Keyed random streams.

Every draw made by a filter comes from a generator keyed by
``(seed, n, j, purpose, extra)``.  Two algorithms that request the same key
receive the same stream, which is what the reduction tests rely on.
"""

import numpy as np

PROPOSE = 0
LOCAL = 1
GLOBAL = 2
MUTATE = 3
REFRESH = 4
CORRECT = 5
SIMULATE = 6


def stream(seed, n=0, j=0, purpose=0, extra=0):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(n), int(j), int(purpose), int(extra)))
    return np.random.Generator(np.random.PCG64(ss))
