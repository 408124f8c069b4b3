"""Desk-scale synthetic instance used by the acceptance suite and the example config."""

from __future__ import annotations

from dataclasses import replace

from .data import Partition, PartitionSpec, generate_synthetic, partition
from .protocol import ProtocolConfig

NUM_CLASSES = 6
FEATURES = 16
GROUPS = 3
CLIENTS = 12
POOL_SIZE = 300
PER_CLASS = 250
SEPARATION = 2.0
ALPHA = 5.0
TEST_FRACTION = 0.25

# Longer local pretraining than the library default: clustering quality in
# round 1 depends on converged local models.
DESK_CONFIG = ProtocolConfig(
    num_rounds=5,
    local_pretrain_epochs=300,
    local_finetune_epochs=20,
    server_distill_epochs=200,
    client_distill_epochs=20,
    lr_soft=1e-3,
)


def desk_partition(seed: int) -> Partition:
    ds = generate_synthetic(NUM_CLASSES, FEATURES, PER_CLASS, SEPARATION, seed)
    spec = PartitionSpec(
        num_clients=CLIENTS,
        dirichlet_alpha=ALPHA,
        num_groups=GROUPS,
        public_fraction=POOL_SIZE / len(ds),
        test_fraction=TEST_FRACTION,
        seed=seed,
    )
    return partition(ds, spec)


def desk_config(seed: int, **overrides) -> ProtocolConfig:
    return replace(DESK_CONFIG, seed=seed, **overrides)
