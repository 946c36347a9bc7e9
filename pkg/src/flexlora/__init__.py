"""Federated aggregation of heterogeneous-rank LoRA adapters on a toy simulator."""

from .adapter import LayerShape, LoraAdapter, compose, decompose, init_adapter
from .aggregate import (
    Contribution,
    GlobalDelta,
    aggregate_flexlora,
    aggregate_hetlora,
    aggregate_naive,
    hetlora_prune,
    redistribute,
)
from .errors import (
    DatasetTooSmall,
    EmptyBatch,
    FlexLoraError,
    HeterogeneousRanksUnsupported,
    InvalidConfig,
    InvalidDecay,
    InvalidDistribution,
    InvalidMatrix,
    NoContributions,
    PoolExhausted,
    RankOutOfRange,
    ShapeMismatch,
)
from .federation import (
    FedConfig,
    ResourceDistribution,
    assign_resources,
    client_scaling_experiment,
    run_experiment,
    run_round,
)
from .lowrank import SvdFactors, svd, truncate, truncation_error
from .simmodel import Batch, OptimizerConfig, ToyModel, forward, grads, local_update, loss
from .taskgen import WorldConfig, gen_client_dataset, gen_world, unseen_pool

__version__ = "0.1.0"
