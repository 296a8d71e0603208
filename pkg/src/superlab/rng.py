"""Deterministic per-replica random streams."""

import numpy as np


def seed_stream(master_seed: int, replica_id: int) -> np.random.Generator:
    """PCG64 generator for ``replica_id`` under ``master_seed``.

    The stream is keyed by ``SeedSequence(master_seed, spawn_key=(replica_id,))``,
    i.e. the same derivation ``SeedSequence(master_seed).spawn`` uses for its
    ``replica_id``-th child, so streams are independent across ids and do not
    depend on how many replicas are run.
    """
    if master_seed < 0 or replica_id < 0:
        raise ValueError("seed and replica id must be non-negative")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(replica_id),))
    return np.random.Generator(np.random.PCG64(ss))
