"""Seed key schedule.

Every consumer gets an independent generator derived from the single root
seed and a fixed key, so the order in which workers run never changes the
draws any of them see.
"""

import numpy as np

DATA = 1
CLIENT_BASE = 2
SERVER_BASE = 1000
REGULARIZER = 2000


def stream(root_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(root_seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def client_stream(root_seed: int, client: int, *extra: int) -> np.random.Generator:
    return stream(root_seed, CLIENT_BASE + client, *extra)


def server_stream(root_seed: int, cluster: int, *extra: int) -> np.random.Generator:
    return stream(root_seed, SERVER_BASE + cluster, *extra)


def regularizer_stream(root_seed: int, owner: int, *extra: int) -> np.random.Generator:
    return stream(root_seed, REGULARIZER, owner, *extra)
