"""Learnable communication graph: adjacency logits, sampling, relaxation, masks.

Edge convention: ``edges[i][j] = 1`` means agent ``j``'s message reaches agent
``i`` (row ``i`` lists the senders agent ``i`` receives from).  Every row holds
exactly ``k`` ones, where ``k`` is the per-agent bandwidth budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

__all__ = [
    "AdjacencyParams",
    "CommGraph",
    "RelaxedGraph",
    "EdgeEmbeddingTable",
    "budget_k",
    "init_adjacency",
    "gumbel_noise",
    "sample_graph",
    "infer_graph",
    "relax_graph",
    "build_mask",
    "edge_features",
]


@dataclass
class AdjacencyParams:
    """Real-valued N x N logit matrix scoring directed edges j -> i."""

    alpha: Tensor
    n_agents: int

    def __post_init__(self) -> None:
        n = self.n_agents
        if self.alpha.shape != (n, n):
            raise ValueError(f"alpha must be {n}x{n}, got {tuple(self.alpha.shape)}")
        if not torch.isfinite(self.alpha).all():
            raise ValueError("alpha entries must be finite")


@dataclass
class CommGraph:
    """Binary N x N matrix with exactly k ones per row."""

    edges: Tensor
    k: int

    @property
    def n_agents(self) -> int:
        return self.edges.shape[0]

    def values(self) -> Tensor:
        return self.edges


@dataclass
class RelaxedGraph:
    """Hard k-hot graph paired with its softmax relaxation.

    Forward consumers see the hard {0,1} entries; gradients flow through the
    soft rows (straight-through).  Each soft row sums to k.
    """

    hard: CommGraph
    soft: Tensor
    temperature: float

    @property
    def k(self) -> int:
        return self.hard.k

    @property
    def n_agents(self) -> int:
        return self.hard.n_agents

    def values(self) -> Tensor:
        hard = self.hard.edges.to(self.soft.dtype)
        # Grouping keeps the forward value exactly equal to the hard entries.
        return hard.detach() + (self.soft - self.soft.detach())


@dataclass
class EdgeEmbeddingTable:
    """Two-row table: row 0 embeds edge-absent, row 1 edge-present."""

    table: Tensor

    def __post_init__(self) -> None:
        if self.table.shape[0] != 2:
            raise ValueError("edge embedding table must have exactly 2 rows")
        if not torch.isfinite(self.table).all():
            raise ValueError("edge embedding table entries must be finite")

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def budget_k(sparsity: float, n_agents: int) -> int:
    """Per-row edge budget k for a sparsity fraction, at least 1."""
    if not 0.0 < sparsity <= 1.0:
        raise ValueError(f"sparsity must be in (0, 1], got {sparsity}")
    import math

    return max(1, min(n_agents, int(math.floor(sparsity * n_agents + 0.5))))


def init_adjacency(
    n_agents: int, seed: int, dtype: torch.dtype = torch.float32
) -> AdjacencyParams:
    """Seeded i.i.d. uniform [-0.01, 0.01] initialization of the logits."""
    if n_agents < 1:
        raise ValueError(f"n_agents must be >= 1, got {n_agents}")
    gen = torch.Generator().manual_seed(seed)
    alpha = (torch.rand(n_agents, n_agents, generator=gen, dtype=torch.float64) * 2 - 1) * 0.01
    return AdjacencyParams(alpha=alpha.to(dtype), n_agents=n_agents)


def gumbel_noise(
    n_agents: int,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """N x N draws from Gumbel(0, 1)."""
    u = torch.rand(n_agents, n_agents, generator=generator, dtype=torch.float64)
    eps = 1e-20
    g = -torch.log(-torch.log(u + eps) + eps)
    return g.to(dtype)


def _khot_rows(values: Tensor, k: int) -> Tensor:
    """Row-wise k-hot of the k largest entries; ties go to the lowest column."""
    # Stable descending sort keeps the lowest index first among equal values.
    order = torch.argsort(values, dim=-1, descending=True, stable=True)
    edges = torch.zeros_like(values)
    edges.scatter_(-1, order[:, :k], 1.0)
    return edges


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")


def sample_graph(alpha: AdjacencyParams, k: int, noise: Tensor) -> CommGraph:
    """Sample a k-hot graph by perturbing logits with Gumbel noise.

    Row-wise: perturb alpha[i][j] + g[i][j], softmax, keep the k largest.
    Softmax is monotone per row, so the selection is the top-k of the
    perturbed logits.
    """
    n = alpha.n_agents
    _check_k(k, n)
    if noise.shape != (n, n):
        raise ValueError(f"noise must be {n}x{n}, got {tuple(noise.shape)}")
    if not torch.isfinite(noise).all():
        raise ValueError("noise entries must be finite")
    with torch.no_grad():
        edges = _khot_rows(alpha.alpha + noise.to(alpha.alpha.dtype), k)
    return CommGraph(edges=edges, k=k)


def infer_graph(alpha: AdjacencyParams, k: int) -> CommGraph:
    """Deterministic k-hot graph: row-wise top-k of the raw logits."""
    _check_k(k, alpha.n_agents)
    with torch.no_grad():
        edges = _khot_rows(alpha.alpha, k)
    return CommGraph(edges=edges, k=k)


def relax_graph(
    alpha: AdjacencyParams, k: int, noise: Tensor, temperature: float = 1.0
) -> RelaxedGraph:
    """Straight-through pair: hard k-hot forward, k * softmax backward."""
    n = alpha.n_agents
    _check_k(k, n)
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if noise.shape != (n, n):
        raise ValueError(f"noise must be {n}x{n}, got {tuple(noise.shape)}")
    if not torch.isfinite(noise).all():
        raise ValueError("noise entries must be finite")
    logits = (alpha.alpha + noise.to(alpha.alpha.dtype)) / temperature
    soft = k * torch.softmax(logits, dim=-1)
    with torch.no_grad():
        hard = CommGraph(edges=_khot_rows(soft, k), k=k)
    return RelaxedGraph(hard=hard, soft=soft, temperature=temperature)


def build_mask(graph: CommGraph | RelaxedGraph) -> Tensor:
    """Boolean pass mask: position (i, j) passes when edges[i][j] = 1 or i = j.

    The diagonal always passes so no softmax row is fully blocked.
    """
    edges = graph.hard.edges if isinstance(graph, RelaxedGraph) else graph.edges
    n = edges.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=edges.device)
    return (edges > 0.5) | eye


def edge_features(graph: CommGraph | RelaxedGraph, table: EdgeEmbeddingTable) -> Tensor:
    """Per-pair embeddings r[i][j] for edge value edges[i][j].

    Returns an N x N x d tensor; with a RelaxedGraph, gradients flow into the
    table rows and into alpha through the straight-through path.
    """
    e = graph.values().to(table.table.dtype)
    absent, present = table.table[0], table.table[1]
    return (1.0 - e).unsqueeze(-1) * absent + e.unsqueeze(-1) * present
