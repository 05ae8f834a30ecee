"""Losses, GAE, the bi-level alternating optimizer, and the training loop.

The inner step updates encoder/decoder weights on the training half of each
minibatch; the outer step updates the graph logits alpha on the validation
half, with gradients arriving through the straight-through relaxed graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import Tensor

from .envs import EnvSpec, VecEnv
from .graph import (
    AdjacencyParams,
    CommGraph,
    RelaxedGraph,
    budget_k,
    gumbel_noise,
    infer_graph,
    init_adjacency,
    relax_graph,
    sample_graph,
)
from .model import CommFormerModel, ModelConfig

__all__ = [
    "TrainConfig",
    "RolloutBuffer",
    "NonFiniteLossError",
    "compute_gae",
    "encoder_loss",
    "decoder_loss",
    "inner_step",
    "outer_step",
    "target_update",
    "Trainer",
    "gradient_check",
    "fixed_graph",
    "param_fingerprint",
]


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss turns NaN/Inf; carries diagnostics."""


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.05
    ppo_epochs: int = 10
    entropy_coef: float = 0.01
    max_grad_norm: float = 10.0
    critic_lr: float = 5e-4
    actor_lr: float = 5e-4
    graph_lr: float = 5e-4
    optim_eps: float = 1e-5
    batch_size: int = 512
    num_mini_batch: int = 1
    rollout_envs: int = 8
    rollout_steps: int = 100
    total_steps: int = 200_000
    sparsity: float = 1.0
    temperature: float = 1.0
    target_mode: str = "hard"  # "hard" | "ema"
    target_interval: int = 200
    target_ema: float = 0.01
    use_gae: bool = True
    use_huber_loss: bool = False
    huber_delta: float = 10.0
    advantage_norm: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.target_mode not in ("hard", "ema"):
            raise ValueError("target_mode must be 'hard' or 'ema'")
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError("sparsity must be in (0, 1]")


@dataclass
class RolloutBuffer:
    """Per-step joint transitions for one collection phase.

    obs and values carry one extra (bootstrap) entry past the final step.
    """

    obs: np.ndarray  # [T+1, E, N, obs_dim]
    actions: np.ndarray  # [T, E, N]
    log_probs: np.ndarray  # [T, E, N]
    values: np.ndarray  # [T+1, E, N]
    rewards: np.ndarray  # [T, E]
    dones: np.ndarray  # [T, E]

    @property
    def n_steps(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[1]


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE over joint values.

    rewards, dones: [T, ...]; values: [T+1, ...] with the bootstrap entry
    last.  Advantages never bootstrap across a done flag.  Returned
    advantages are unnormalized; returns = advantages + values[:-1].
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = rewards.shape[0]
    if values.shape[0] != t_len + 1 or dones.shape[0] != t_len:
        raise ValueError(
            f"length mismatch: rewards {t_len}, values {values.shape[0]}, dones {dones.shape[0]}"
        )
    advantages = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0] if rewards.ndim > 1 else np.float64(0.0))
    for t in reversed(range(t_len)):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    returns = advantages + values[:-1]
    return advantages, returns


def encoder_loss(
    model: CommFormerModel,
    graph: CommGraph | RelaxedGraph,
    obs: Tensor,
    next_obs: Tensor,
    rewards: Tensor,
    dones: Tensor,
    gamma: float,
    use_huber: bool = False,
    huber_delta: float = 10.0,
) -> Tensor:
    """TD critic loss: mean over agents and steps of the squared one-step
    error against the target network's value of the next observation."""
    _, v = model.encoder(obs, graph)
    v_next = model.target_values(next_obs, graph)
    nonterminal = (1.0 - dones.to(v.dtype)).unsqueeze(-1)
    target = rewards.to(v.dtype).unsqueeze(-1) + gamma * v_next * nonterminal
    td = target - v
    if use_huber:
        return torch.nn.functional.huber_loss(v, target, delta=huber_delta)
    return (td**2).mean()


def decoder_loss(
    model: CommFormerModel,
    graph: CommGraph | RelaxedGraph,
    obs: Tensor,
    actions: Tensor,
    old_log_probs: Tensor,
    advantages: Tensor,
    clip: float,
    entropy_coef: float,
) -> tuple[Tensor, dict]:
    """Clipped PPO surrogate with entropy bonus; advantages are joint (one
    scalar per step) and broadcast across agents."""
    new_logp, entropy, _ = model.evaluate_actions(obs, actions, graph)
    adv = advantages.to(new_logp.dtype).unsqueeze(-1)
    # clamp keeps exp() finite when the policy has drifted far from old_log_probs
    log_ratio = (new_logp - old_log_probs.to(new_logp.dtype)).clamp(-20.0, 20.0)
    ratio = torch.exp(log_ratio)
    surr1 = ratio * adv
    surr2 = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv
    policy_loss = -torch.minimum(surr1, surr2).mean()
    mean_entropy = entropy.mean()
    loss = policy_loss - entropy_coef * mean_entropy
    stats = {
        "policy_loss": float(policy_loss.detach()),
        "entropy": float(mean_entropy.detach()),
        "ratio_mean": float(ratio.detach().mean()),
    }
    return loss, stats


def _check_finite(loss: Tensor, where: str, context: dict | None = None) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss in {where}: {float(loss)} ({context or {}})")


def inner_step(
    loss: Tensor,
    optimizer: torch.optim.Optimizer,
    model: CommFormerModel,
    alpha: Tensor | None,
    max_grad_norm: float,
) -> float:
    """One Adam step on encoder/decoder weights; alpha stays frozen."""
    _check_finite(loss, "inner_step")
    optimizer.zero_grad(set_to_none=True)
    if alpha is not None and alpha.grad is not None:
        alpha.grad = None
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), max_grad_norm)
    optimizer.step()
    if alpha is not None:
        alpha.grad = None  # gradients may have reached alpha; discard them
    return float(grad_norm)


def outer_step(
    loss: Tensor,
    optimizer: torch.optim.Optimizer,
    model: CommFormerModel,
    alpha: Tensor,
) -> None:
    """One Adam step on alpha only; encoder/decoder weights stay frozen."""
    _check_finite(loss, "outer_step")
    optimizer.zero_grad(set_to_none=True)
    for p in model.trainable_parameters():
        p.grad = None
    loss.backward()
    optimizer.step()
    for p in model.trainable_parameters():
        p.grad = None


def target_update(
    model: CommFormerModel, mode: str, step: int, interval: int = 200, rho: float = 0.01
) -> None:
    """Hard mode copies the encoder into the target every `interval` steps;
    EMA mode blends every step."""
    if mode == "hard":
        if interval > 0 and step % interval == 0:
            model.sync_target()
    elif mode == "ema":
        model.ema_target(rho)
    else:
        raise ValueError(f"unknown target update mode {mode!r}")


def fixed_graph(mode: str, n_agents: int, k: int, graph_seed: int | None = None) -> CommGraph:
    """Frozen graphs for the non-learned ablation modes."""
    if mode == "fully-connected":
        return CommGraph(edges=torch.ones(n_agents, n_agents), k=n_agents)
    if mode == "diagonal-only":
        return CommGraph(edges=torch.eye(n_agents), k=1)
    if mode == "fixed-random":
        if graph_seed is None:
            raise ValueError("fixed-random mode requires a graph seed")
        gen = torch.Generator().manual_seed(graph_seed)
        scores = torch.rand(n_agents, n_agents, generator=gen)
        alpha = AdjacencyParams(alpha=scores, n_agents=n_agents)
        return infer_graph(alpha, k)
    raise ValueError(f"unknown graph mode {mode!r}")


def param_fingerprint(tensors: list[Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class IterationMetrics:
    iter: int
    env_steps: int
    mean_return: float
    mean_ep_len: float
    success_rate: float
    L_enc: float
    L_dec: float
    entropy: float
    grad_norm: float
    alpha_drift: float
    edges_changed: int


class Trainer:
    """Algorithm driver: collect rollouts, alternate inner/outer steps,
    maintain the target network, and stream metrics."""

    def __init__(
        self,
        spec: EnvSpec,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        mode: str = "learned",
        graph_seed: int | None = None,
        device: str = "cpu",
    ) -> None:
        self.spec = spec
        self.cfg = train_cfg
        self.mode = mode
        self.device = device
        torch.manual_seed(train_cfg.seed)
        self.model = CommFormerModel(model_cfg)
        self.k = budget_k(train_cfg.sparsity, spec.n_agents)
        self.alpha_params = init_adjacency(spec.n_agents, train_cfg.seed)
        self.alpha = self.alpha_params.alpha.clone().requires_grad_(True)
        self.model_opt = torch.optim.Adam(
            [
                {"params": list(self.model.encoder.parameters()), "lr": train_cfg.critic_lr},
                {"params": list(self.model.decoder.parameters()), "lr": train_cfg.actor_lr},
            ],
            eps=train_cfg.optim_eps,
        )
        self.graph_opt = torch.optim.Adam(
            [self.alpha], lr=train_cfg.graph_lr, eps=train_cfg.optim_eps
        )
        self.torch_gen = torch.Generator().manual_seed(train_cfg.seed + 1)
        self.env = VecEnv(spec, train_cfg.rollout_envs, train_cfg.seed)
        self._frozen_graph: CommGraph | None = None
        if mode != "learned":
            self._frozen_graph = fixed_graph(mode, spec.n_agents, self.k, graph_seed)
        self.inner_steps_done = 0
        self.env_steps = 0
        self.iteration = 0
        self._last_edges = self.current_graph().edges.clone()
        self._last_obs: np.ndarray | None = None

    # -- graph handling -------------------------------------------------

    def adjacency(self) -> AdjacencyParams:
        return AdjacencyParams(alpha=self.alpha.detach(), n_agents=self.spec.n_agents)

    def current_graph(self) -> CommGraph:
        """Deterministic graph used for execution/evaluation."""
        if self._frozen_graph is not None:
            return self._frozen_graph
        return infer_graph(self.adjacency(), self.k)

    def _draw_noise(self) -> Tensor:
        return gumbel_noise(self.spec.n_agents, generator=self.torch_gen)

    def _rollout_graph(self, noise: Tensor) -> CommGraph:
        if self._frozen_graph is not None:
            return self._frozen_graph
        return sample_graph(self.adjacency(), self.k, noise)

    def _loss_graph(self, noise: Tensor) -> CommGraph | RelaxedGraph:
        if self._frozen_graph is not None:
            return self._frozen_graph
        live = AdjacencyParams(alpha=self.alpha, n_agents=self.spec.n_agents)
        return relax_graph(live, self.k, noise, self.cfg.temperature)

    # -- collection ------------------------------------------------------

    def collect(self, graph: CommGraph) -> RolloutBuffer:
        cfg, spec = self.cfg, self.spec
        t_len, n_envs = cfg.rollout_steps, cfg.rollout_envs
        if self._last_obs is None:
            self._last_obs = self.env.reset()
        obs = np.zeros((t_len + 1, n_envs, spec.n_agents, spec.obs_dim), dtype=np.float32)
        actions = np.zeros((t_len, n_envs, spec.n_agents), dtype=np.int64)
        log_probs = np.zeros((t_len, n_envs, spec.n_agents), dtype=np.float32)
        values = np.zeros((t_len + 1, n_envs, spec.n_agents), dtype=np.float32)
        rewards = np.zeros((t_len, n_envs), dtype=np.float32)
        dones = np.zeros((t_len, n_envs), dtype=bool)
        cur = self._last_obs
        for t in range(t_len):
            obs[t] = cur
            seq = self.model.act(
                torch.from_numpy(cur), graph, mode="sample", generator=self.torch_gen
            )
            a = seq.actions.numpy()
            actions[t] = a
            log_probs[t] = seq.log_probs.numpy()
            values[t] = seq.values.numpy()
            cur, rewards[t], dones[t], infos = self.env.step(a)
            # time-limit truncations bootstrap through the cutoff: fold the
            # value of the true final state into the reward so hitting the
            # step cap is not mistaken for a real terminal
            truncated = [
                (e, info["terminal_obs"]) for e, info in enumerate(infos)
                if info.get("truncated") and "terminal_obs" in info
            ]
            if truncated:
                term_obs = torch.from_numpy(np.stack([o for _, o in truncated]))
                with torch.no_grad():
                    _, v_term = self.model.encoder(term_obs, graph)
                v_joint = v_term.mean(dim=-1).numpy()
                for row, (e, _) in enumerate(truncated):
                    rewards[t, e] += cfg.gamma * v_joint[row]
        obs[t_len] = cur
        with torch.no_grad():
            _, v_last = self.model.encoder(torch.from_numpy(cur), graph)
        values[t_len] = v_last.numpy()
        self._last_obs = cur
        self.env_steps += t_len * n_envs
        return RolloutBuffer(
            obs=obs, actions=actions, log_probs=log_probs, values=values,
            rewards=rewards, dones=dones,
        )

    # -- update ----------------------------------------------------------

    def update(self, buffer: RolloutBuffer, noise: Tensor) -> dict:
        cfg = self.cfg
        joint_values = buffer.values.mean(axis=-1)  # [T+1, E]
        advantages, _ = compute_gae(
            buffer.rewards, joint_values, buffer.dones, cfg.gamma, cfg.gae_lambda
        )
        t_len, n_envs = buffer.n_steps, buffer.n_envs
        flat = lambda arr: arr[:t_len].reshape(t_len * n_envs, *arr.shape[2:])
        obs = torch.from_numpy(flat(buffer.obs))
        next_obs = torch.from_numpy(buffer.obs[1:].reshape(t_len * n_envs, *buffer.obs.shape[2:]))
        acts = torch.from_numpy(flat(buffer.actions))
        old_logp = torch.from_numpy(flat(buffer.log_probs))
        rews = torch.from_numpy(flat(buffer.rewards))
        dns = torch.from_numpy(flat(buffer.dones).astype(np.float32))
        adv = torch.from_numpy(advantages.reshape(-1).astype(np.float32))
        total = obs.shape[0]
        batch_size = min(cfg.batch_size, total)
        stats: dict[str, list[float]] = {"L_enc": [], "L_dec": [], "entropy": [], "grad_norm": []}
        perm_gen = self.torch_gen
        for _ in range(cfg.ppo_epochs):
            idx = torch.randperm(total, generator=perm_gen)[:batch_size]
            batch_adv = adv[idx]
            if cfg.advantage_norm:
                batch_adv = (batch_adv - batch_adv.mean()) / (batch_adv.std() + 1e-8)
            half = batch_size // 2
            train_idx, val_idx = idx[:half], idx[half:]
            adv_train, adv_val = batch_adv[:half], batch_adv[half:]

            graph = self._loss_graph(noise)
            l_enc = encoder_loss(
                self.model, graph, obs[train_idx], next_obs[train_idx], rews[train_idx],
                dns[train_idx], cfg.gamma, cfg.use_huber_loss, cfg.huber_delta,
            )
            l_dec, dec_stats = decoder_loss(
                self.model, graph, obs[train_idx], acts[train_idx], old_logp[train_idx],
                adv_train, cfg.clip, cfg.entropy_coef,
            )
            gn = inner_step(
                l_enc + l_dec, self.model_opt, self.model, self.alpha, cfg.max_grad_norm
            )
            self.inner_steps_done += 1
            target_update(
                self.model, cfg.target_mode, self.inner_steps_done,
                cfg.target_interval, cfg.target_ema,
            )
            stats["L_enc"].append(float(l_enc.detach()))
            stats["L_dec"].append(float(l_dec.detach()))
            stats["entropy"].append(dec_stats["entropy"])
            stats["grad_norm"].append(gn)

            if self.mode == "learned" and len(val_idx) > 0:
                graph = self._loss_graph(noise)
                l_enc_v = encoder_loss(
                    self.model, graph, obs[val_idx], next_obs[val_idx], rews[val_idx],
                    dns[val_idx], cfg.gamma, cfg.use_huber_loss, cfg.huber_delta,
                )
                l_dec_v, _ = decoder_loss(
                    self.model, graph, obs[val_idx], acts[val_idx], old_logp[val_idx],
                    adv_val, cfg.clip, cfg.entropy_coef,
                )
                outer_step(l_enc_v + l_dec_v, self.graph_opt, self.model, self.alpha)
        return {key: float(np.mean(vals)) for key, vals in stats.items()}

    # -- loop --------------------------------------------------------------

    def train_iteration(self) -> IterationMetrics:
        noise = self._draw_noise()
        graph = self._rollout_graph(noise)
        alpha_before = self.alpha.detach().clone()
        buffer = self.collect(graph)
        update_stats = self.update(buffer, noise)
        self.iteration += 1
        episodes = self.env.pop_episode_stats()
        if episodes:
            mean_return = float(np.mean([e["return"] for e in episodes]))
            mean_len = float(np.mean([e["length"] for e in episodes]))
            success = float(np.mean([e["success"] for e in episodes]))
        else:
            mean_return, mean_len, success = float("nan"), float("nan"), float("nan")
        edges_now = self.current_graph().edges
        edges_changed = int((edges_now != self._last_edges).sum())
        self._last_edges = edges_now.clone()
        alpha_drift = float((self.alpha.detach() - alpha_before).abs().sum())
        return IterationMetrics(
            iter=self.iteration,
            env_steps=self.env_steps,
            mean_return=mean_return,
            mean_ep_len=mean_len,
            success_rate=success,
            L_enc=update_stats["L_enc"],
            L_dec=update_stats["L_dec"],
            entropy=update_stats["entropy"],
            grad_norm=update_stats["grad_norm"],
            alpha_drift=alpha_drift,
            edges_changed=edges_changed,
        )

    def train(self, callback=None) -> list[IterationMetrics]:
        """Run until the env-step budget is exhausted; K=0 budgets return
        immediately with the initialized model untouched."""
        history: list[IterationMetrics] = []
        while self.env_steps + self.cfg.rollout_steps * self.cfg.rollout_envs <= self.cfg.total_steps:
            metrics = self.train_iteration()
            history.append(metrics)
            if callback is not None:
                callback(self, metrics)
        return history


# -- gradient verification ---------------------------------------------------


def _tensor_rel_err(analytic: Tensor, numeric: Tensor) -> float:
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def finite_difference_grad(loss_fn, tensor: Tensor, h: float = 1e-5) -> Tensor:
    """Central finite differences of a scalar loss w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_check(
    loss_fn,
    named_params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    alpha_name: str | None = None,
    alpha_tol: float = 1e-3,
) -> dict:
    """Analytic vs. central-difference gradients for every parameter group.

    loss_fn must rebuild the loss from the current parameter values on each
    call.  Returns {"groups": {name: rel_err}, "max_rel_err": .., "passed": ..}.
    """
    with torch.enable_grad():
        loss = loss_fn()
        grads = torch.autograd.grad(
            loss, list(named_params.values()), allow_unused=True, materialize_grads=True
        )
    report: dict[str, float] = {}
    passed = True
    for (name, tensor), analytic in zip(named_params.items(), grads):
        with torch.no_grad():
            numeric = finite_difference_grad(loss_fn, tensor, h)
        err = _tensor_rel_err(analytic, numeric)
        report[name] = err
        limit = alpha_tol if (alpha_name is not None and name == alpha_name) else tol
        if err >= limit:
            passed = False
    return {
        "groups": report,
        "max_rel_err": max(report.values()) if report else 0.0,
        "passed": passed,
    }
