"""Encoder-decoder transformer with relation-enhanced, graph-masked attention.

The encoder maps the joint observation sequence to per-agent representations
and value estimates; the decoder emits per-agent action logits
autoregressively.  Attention between agents i and j is gated by the
communication graph: scores use pair embeddings for the two edge directions,
and blocked positions receive zero post-softmax weight.  The gating is
multiplicative on the unnormalized softmax weights, which is exact for binary
graphs and lets gradients reach the graph logits through a straight-through
relaxation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .graph import CommGraph, EdgeEmbeddingTable, RelaxedGraph

__all__ = [
    "ModelConfig",
    "ActionSequence",
    "CommFormerModel",
    "Encoder",
    "Decoder",
    "gated_softmax",
    "relation_scores",
]

GraphLike = CommGraph | RelaxedGraph

# Blocked positions keep a finite exp argument so that 0-gates never meet inf.
_SCORE_CLAMP = 30.0


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    n_agents: int
    action_dims: tuple[int, ...]
    classes: tuple[str, ...]
    hidden: int = 64
    blocks: int = 1
    heads: int = 1
    gain: float = 0.01

    def __post_init__(self) -> None:
        if len(self.action_dims) != self.n_agents or len(self.classes) != self.n_agents:
            raise ValueError("action_dims and classes must have one entry per agent")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")


@dataclass
class ActionSequence:
    actions: Tensor  # [batch, N] int64
    log_probs: Tensor  # [batch, N]
    values: Tensor  # [batch, N]


def _graph_values(graph: GraphLike, dtype: torch.dtype) -> Tensor:
    return graph.values().to(dtype)


def relation_scores(
    x_q: Tensor,
    x_k: Tensor,
    w_q: nn.Linear,
    w_k: nn.Linear,
    r_q: Tensor,
    r_k: Tensor,
    heads: int,
) -> Tensor:
    """Pairwise attention scores (x_i + r_q[i,j]) Wq . Wk (x_j + r_k[i,j]).

    x_q: [B, N, d] queries, x_k: [B, M, d] keys, r_*: [N, M, d] pair
    embeddings.  Returns [B, heads, N, M], scaled by 1/sqrt(d_head).
    """
    b, n, d = x_q.shape
    m = x_k.shape[1]
    dh = d // heads
    q = w_q(x_q.unsqueeze(2) + r_q)  # [B, N, M, d]
    k = w_k(x_k.unsqueeze(1) + r_k)  # [B, N, M, d]
    q = q.view(b, n, m, heads, dh)
    k = k.view(b, n, m, heads, dh)
    scores = (q * k).sum(-1) / math.sqrt(dh)  # [B, N, M, heads]
    return scores.permute(0, 3, 1, 2)


def gated_softmax(scores: Tensor, gate: Tensor) -> Tensor:
    """Masked softmax via multiplicative gating.

    gate: [N, M] with forward values in {0, 1} (diagonal handling is the
    caller's concern).  For binary gates this equals replacing blocked scores
    with -inf before softmax; a row with a single open position yields exactly
    1.0 there.  Gradients w.r.t. fractional (straight-through) gate values
    remain finite.
    """
    allow = gate.detach() > 0.5
    masked = scores.masked_fill(~allow, float("-inf"))
    m = masked.amax(dim=-1, keepdim=True).detach()
    w = gate * torch.exp((scores - m).clamp(max=_SCORE_CLAMP))
    return w / w.sum(dim=-1, keepdim=True)


class RelationAttention(nn.Module):
    """Single attention layer with edge-feature-augmented scores and gating."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)

    def forward(self, x_q: Tensor, x_kv: Tensor, r_q: Tensor, r_k: Tensor, gate: Tensor) -> Tensor:
        b, n, d = x_q.shape
        m = x_kv.shape[1]
        dh = d // self.heads
        scores = relation_scores(x_q, x_kv, self.w_q, self.w_k, r_q, r_k, self.heads)
        attn = gated_softmax(scores, gate)  # [B, h, N, M]
        v = self.w_v(x_kv).view(b, m, self.heads, dh).permute(0, 2, 1, 3)  # [B, h, M, dh]
        out = attn @ v  # [B, h, N, dh]
        out = out.permute(0, 2, 1, 3).reshape(b, n, d)
        return self.w_o(out)


def _mlp(dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))


def _pair_features(e: Tensor, table: EdgeEmbeddingTable) -> tuple[Tensor, Tensor]:
    """Edge embeddings for the two directions of each (receiver i, sender j)
    pair: query side uses e_{i->j} (= e.T), key side uses e_{j->i} (= e)."""
    t0, t1 = table.table[0], table.table[1]

    def embed(vals: Tensor) -> Tensor:
        v = vals.unsqueeze(-1)
        return (1.0 - v) * t0 + v * t1

    return embed(e.transpose(0, 1)), embed(e)


class Encoder(nn.Module):
    """Observation encoder; doubles as the critic through the value head."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.class_names = tuple(dict.fromkeys(cfg.classes))
        self.obs_embed = nn.ModuleDict(
            {cls: nn.Linear(cfg.obs_dim, d) for cls in self.class_names}
        )
        self.edge_table = nn.Parameter(torch.zeros(2, d))
        nn.init.normal_(self.edge_table, std=0.02)
        self.blocks = nn.ModuleList()
        for _ in range(cfg.blocks):
            self.blocks.append(
                nn.ModuleDict(
                    {
                        "ln_attn": nn.LayerNorm(d),
                        "attn": RelationAttention(d, cfg.heads),
                        "ln_mlp": nn.LayerNorm(d),
                        "mlp": _mlp(d),
                    }
                )
            )
        self.ln_out = nn.LayerNorm(d)
        self.value_head = nn.Linear(d, 1)
        nn.init.orthogonal_(self.value_head.weight, gain=cfg.gain)
        nn.init.zeros_(self.value_head.bias)
        self.to(dtype)

    def _gate(self, graph: GraphLike, dtype: torch.dtype) -> Tensor:
        e = _graph_values(graph, dtype)
        eye = torch.eye(e.shape[0], dtype=dtype, device=e.device)
        return e * (1.0 - eye) + eye  # diagonal always passes

    def embed_obs(self, obs: Tensor) -> Tensor:
        cols = []
        for i, cls in enumerate(self.cfg.classes):
            cols.append(self.obs_embed[cls](obs[:, i]))
        return torch.stack(cols, dim=1)

    def forward(self, obs: Tensor, graph: GraphLike) -> tuple[Tensor, Tensor]:
        """obs: [B, N, obs_dim] -> representations [B, N, d], values [B, N]."""
        dtype = self.value_head.weight.dtype
        x = self.embed_obs(obs.to(dtype))
        e = _graph_values(graph, dtype)
        gate = self._gate(graph, dtype)
        table = EdgeEmbeddingTable(self.edge_table)
        r_q, r_k = _pair_features(e, table)
        for blk in self.blocks:
            h = blk["ln_attn"](x)
            x = x + blk["attn"](h, h, r_q, r_k, gate)
            x = x + blk["mlp"](blk["ln_mlp"](x))
        rep = self.ln_out(x)
        values = self.value_head(rep).squeeze(-1)
        return rep, values


class Decoder(nn.Module):
    """Autoregressive action decoder over the encoded observation sequence."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        max_actions = max(cfg.action_dims)
        self.action_embed = nn.Embedding(max_actions, d)
        self.start_token = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.start_token, std=0.02)
        self.agent_embed = nn.Embedding(cfg.n_agents, d)
        self.edge_table = nn.Parameter(torch.zeros(2, d))
        nn.init.normal_(self.edge_table, std=0.02)
        self.blocks = nn.ModuleList()
        for _ in range(cfg.blocks):
            self.blocks.append(
                nn.ModuleDict(
                    {
                        "ln_self": nn.LayerNorm(d),
                        "self_attn": RelationAttention(d, cfg.heads),
                        "ln_q": nn.LayerNorm(d),
                        "cross_attn": RelationAttention(d, cfg.heads),
                        "ln_mlp": nn.LayerNorm(d),
                        "mlp": _mlp(d),
                    }
                )
            )
        self.ln_out = nn.LayerNorm(d)
        self.heads_out = nn.ModuleList([nn.Linear(d, a) for a in cfg.action_dims])
        for head in self.heads_out:
            nn.init.orthogonal_(head.weight, gain=cfg.gain)
            nn.init.zeros_(head.bias)
        self.to(dtype)

    def embed_slots(self, prev_actions: Tensor) -> Tensor:
        """prev_actions: [B, N] where slot m holds a^{m-1}; slot 0 is ignored
        and replaced by the start token.  Negative entries mean `unfilled` and
        embed as zero (they are always causally masked out)."""
        b, n = prev_actions.shape
        dtype = self.start_token.dtype
        safe = prev_actions.clamp(min=0)
        emb = self.action_embed(safe)
        emb = torch.where((prev_actions >= 0).unsqueeze(-1), emb, torch.zeros_like(emb))
        emb = emb.to(dtype)
        start = self.start_token.expand(b, -1)
        emb = torch.cat([start.unsqueeze(1), emb[:, 1:]], dim=1)
        idx = torch.arange(n, device=prev_actions.device)
        return emb + self.agent_embed(idx).to(dtype)

    def forward(self, rep: Tensor, prev_actions: Tensor, graph: GraphLike) -> Tensor:
        """Returns stacked per-slot hidden states [B, N, d]; slot m feeds the
        logit head for agent m."""
        dtype = self.start_token.dtype
        n = self.cfg.n_agents
        e = _graph_values(graph, dtype)
        eye = torch.eye(n, dtype=dtype, device=e.device)
        strict_lower = torch.tril(torch.ones(n, n, dtype=dtype, device=e.device), diagonal=-1)
        # self-attention: adjacency AND strictly-causal, self always allowed
        gate_self = e * strict_lower + eye
        # cross-attention to encoder outputs: adjacency, self always allowed
        gate_cross = e * (1.0 - eye) + eye
        table = EdgeEmbeddingTable(self.edge_table)
        r_q, r_k = _pair_features(e, table)
        x = self.embed_slots(prev_actions)
        rep = rep.to(dtype)
        for blk in self.blocks:
            h = blk["ln_self"](x)
            x = x + blk["self_attn"](h, h, r_q, r_k, gate_self)
            q = blk["ln_q"](x)
            x = x + blk["cross_attn"](q, rep, r_q, r_k, gate_cross)
            x = x + blk["mlp"](blk["ln_mlp"](x))
        return self.ln_out(x)

    def logits_for(self, hidden: Tensor, agent: int) -> Tensor:
        return self.heads_out[agent](hidden[:, agent])


class CommFormerModel(nn.Module):
    """Encoder + decoder + target-network copy of the encoder value path."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, dtype)
        self.decoder = Decoder(cfg, dtype)
        self.target_encoder = Encoder(cfg, dtype)
        self.sync_target()
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.value_head.weight.dtype

    def sync_target(self) -> None:
        self.target_encoder.load_state_dict(self.encoder.state_dict())

    def ema_target(self, rho: float) -> None:
        with torch.no_grad():
            for tp, p in zip(self.target_encoder.parameters(), self.encoder.parameters()):
                tp.mul_(1.0 - rho).add_(p, alpha=rho)

    def target_values(self, obs: Tensor, graph: GraphLike) -> Tensor:
        with torch.no_grad():
            _, values = self.target_encoder(obs, graph)
        return values

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    @torch.no_grad()
    def act(
        self,
        obs: Tensor,
        graph: GraphLike,
        mode: str = "sample",
        generator: torch.Generator | None = None,
    ) -> ActionSequence:
        """Autoregressive rollout: encode once, then one decode per agent."""
        if mode not in ("sample", "greedy"):
            raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
        rep, values = self.encoder(obs, graph)
        b, n = obs.shape[0], self.cfg.n_agents
        prev = torch.full((b, n), -1, dtype=torch.int64, device=obs.device)
        actions = torch.zeros(b, n, dtype=torch.int64, device=obs.device)
        log_probs = torch.zeros(b, n, dtype=self.dtype, device=obs.device)
        for m in range(n):
            hidden = self.decoder(rep, prev, graph)
            logits = self.decoder.logits_for(hidden, m)
            logp = torch.log_softmax(logits, dim=-1)
            if mode == "greedy":
                a = logits.argmax(dim=-1)
            else:
                a = torch.multinomial(
                    logp.exp(), 1, generator=generator
                ).squeeze(-1)
            actions[:, m] = a
            log_probs[:, m] = logp.gather(-1, a.unsqueeze(-1)).squeeze(-1)
            if m + 1 < n:
                prev[:, m + 1] = a
        return ActionSequence(actions=actions, log_probs=log_probs, values=values)

    def evaluate_actions(
        self, obs: Tensor, actions: Tensor, graph: GraphLike
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Teacher-forced parallel decode.

        Returns log-probs of the given actions, per-agent entropy, and values,
        each [B, N].
        """
        rep, values = self.encoder(obs, graph)
        b, n = actions.shape
        prev = torch.full((b, n), -1, dtype=torch.int64, device=actions.device)
        if n > 1:
            prev[:, 1:] = actions[:, :-1]
        hidden = self.decoder(rep, prev, graph)
        log_probs = torch.zeros(b, n, dtype=self.dtype, device=obs.device)
        entropy = torch.zeros(b, n, dtype=self.dtype, device=obs.device)
        for m in range(n):
            logp = torch.log_softmax(self.decoder.logits_for(hidden, m), dim=-1)
            log_probs[:, m] = logp.gather(-1, actions[:, m : m + 1]).squeeze(-1)
            entropy[:, m] = -(logp.exp() * logp).sum(-1)
        return log_probs, entropy, values
