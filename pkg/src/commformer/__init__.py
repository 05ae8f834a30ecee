"""Cooperative multi-agent policy whose inter-agent communication topology is
a learnable sparse directed graph, optimized jointly with the policy by
bi-level gradient descent."""

from .graph import (
    AdjacencyParams,
    CommGraph,
    EdgeEmbeddingTable,
    RelaxedGraph,
    budget_k,
    build_mask,
    edge_features,
    gumbel_noise,
    infer_graph,
    init_adjacency,
    relax_graph,
    sample_graph,
)
from .model import ActionSequence, CommFormerModel, ModelConfig
from .training import (
    NonFiniteLossError,
    RolloutBuffer,
    TrainConfig,
    Trainer,
    compute_gae,
    decoder_loss,
    encoder_loss,
    gradient_check,
)

__all__ = [
    "AdjacencyParams",
    "CommGraph",
    "RelaxedGraph",
    "EdgeEmbeddingTable",
    "budget_k",
    "build_mask",
    "edge_features",
    "gumbel_noise",
    "infer_graph",
    "init_adjacency",
    "relax_graph",
    "sample_graph",
    "ActionSequence",
    "CommFormerModel",
    "ModelConfig",
    "NonFiniteLossError",
    "RolloutBuffer",
    "TrainConfig",
    "Trainer",
    "compute_gae",
    "decoder_loss",
    "encoder_loss",
    "gradient_check",
]

__version__ = "0.1.0"
