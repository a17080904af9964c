"""
Named random streams derived from a master seed.
Each concern draws from its own stream so enabling one method never shifts
the randomness seen by another.
"""

import numpy as np

STREAMS = {
    "init": 1,
    "de_init": 2,
    "negatives": 3,
    "gumbel": 4,
    "rrd": 5,
    "eval_pool": 6,
    "kd": 7,
    "shuffle": 8,
    "synthetic": 9,
}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for stream ``name`` keyed by extra integers (epoch, user, ...)."""
    return np.random.default_rng([int(seed), STREAMS[name], *(int(k) for k in keys)])
