"""Flat key-value run configuration with dotted section names.

Format: one ``section.key = value`` per line; ``#`` starts a comment.
Unknown keys are hard errors so misconfigured experiments fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .envs import EnvSpec, make_spec
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "serialize_config", "DEFAULTS"]


class ConfigError(ValueError):
    """Malformed config file or invalid setting."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
DEFAULTS: dict[str, tuple] = {
    "env.name": (str, "pp"),
    "env.n_agents": (int, 3),
    "env.n_predators": (int, 2),
    "env.n_captures": (int, 1),
    "env.n_enemies": (int, 1),
    "env.grid": (int, 5),
    "env.vision": (int, 1),
    "env.episode_length": (int, 100),
    "env.eval_episode_length": (int, 20),
    "model.hidden": (int, 64),
    "model.blocks": (int, 1),
    "model.heads": (int, 1),
    "model.gain": (float, 0.01),
    "model.stacked_frames": (int, 1),
    "train.gamma": (float, 0.99),
    "train.gae_lambda": (float, 0.95),
    "train.use_gae": (_bool, True),
    "train.ppo_clip": (float, 0.05),
    "train.ppo_epochs": (int, 10),
    "train.entropy_coef": (float, 0.01),
    "train.max_grad_norm": (float, 10.0),
    "train.critic_lr": (float, 5e-4),
    "train.actor_lr": (float, 5e-4),
    "train.graph_lr": (float, 5e-4),
    "train.optimizer": (str, "adam"),
    "train.optim_eps": (float, 1e-5),
    "train.batch_size": (int, 512),
    "train.num_mini_batch": (int, 1),
    "train.rollout_threads": (int, 8),
    "train.training_threads": (int, 1),
    "train.steps": (int, 200_000),
    "train.sparsity": (float, 1.0),
    "train.temperature": (float, 1.0),
    "train.target_mode": (str, "hard"),
    "train.target_interval": (int, 200),
    "train.target_ema": (float, 0.01),
    "train.use_huber_loss": (_bool, False),
    "train.huber_delta": (float, 10.0),
    "train.advantage_norm": (_bool, True),
    "run.mode": (str, "learned"),
    "run.graph_seed": (int, -1),
    "run.seed": (int, 0),
    "run.log_interval": (int, 1),
    "run.snapshot_interval": (int, 1),
    "run.checkpoint_interval": (int, 0),
}

_MODES = ("learned", "fixed-random", "fully-connected", "diagonal-only")


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def mode(self) -> str:
        return str(self.values["run.mode"])

    @property
    def seed(self) -> int:
        return int(self.values["run.seed"])

    @property
    def graph_seed(self) -> int | None:
        gs = int(self.values["run.graph_seed"])
        return None if gs < 0 else gs

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for key, val in kv.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = val
        cfg = RunConfig(vals)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        if v["run.mode"] not in _MODES:
            raise ConfigError(f"run.mode must be one of {_MODES}, got {v['run.mode']!r}")
        if v["run.mode"] == "fixed-random" and int(v["run.graph_seed"]) < 0:
            raise ConfigError("fixed-random mode requires run.graph_seed >= 0")
        if not 0.0 < float(v["train.sparsity"]) <= 1.0:
            raise ConfigError(f"train.sparsity must be in (0, 1], got {v['train.sparsity']}")
        if v["train.optimizer"] != "adam":
            raise ConfigError("only the adam optimizer is supported")
        if v["env.name"] not in ("pp", "pcp", "relay"):
            raise ConfigError(f"unknown env.name {v['env.name']!r}")
        if int(v["model.stacked_frames"]) != 1:
            raise ConfigError("model.stacked_frames other than 1 is not supported")

    def env_spec(self, evaluation: bool = False) -> EnvSpec:
        v = self.values
        max_steps = int(v["env.eval_episode_length"] if evaluation else v["env.episode_length"])
        name = str(v["env.name"])
        if name == "pp":
            return make_spec(
                "pp", n_agents=int(v["env.n_agents"]), grid=int(v["env.grid"]),
                vision=int(v["env.vision"]), max_steps=max_steps,
            )
        if name == "pcp":
            return make_spec(
                "pcp", n_predators=int(v["env.n_predators"]), n_captures=int(v["env.n_captures"]),
                grid=int(v["env.grid"]), vision=int(v["env.vision"]), max_steps=max_steps,
            )
        return make_spec(
            "relay", n_agents=int(v["env.n_agents"]), grid=int(v["env.grid"]),
            max_steps=max_steps,
        )

    def model_config(self) -> ModelConfig:
        spec = self.env_spec()
        v = self.values
        return ModelConfig(
            obs_dim=spec.obs_dim,
            n_agents=spec.n_agents,
            action_dims=spec.action_dims,
            classes=spec.classes,
            hidden=int(v["model.hidden"]),
            blocks=int(v["model.blocks"]),
            heads=int(v["model.heads"]),
            gain=float(v["model.gain"]),
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            gamma=float(v["train.gamma"]),
            gae_lambda=float(v["train.gae_lambda"]),
            clip=float(v["train.ppo_clip"]),
            ppo_epochs=int(v["train.ppo_epochs"]),
            entropy_coef=float(v["train.entropy_coef"]),
            max_grad_norm=float(v["train.max_grad_norm"]),
            critic_lr=float(v["train.critic_lr"]),
            actor_lr=float(v["train.actor_lr"]),
            graph_lr=float(v["train.graph_lr"]),
            optim_eps=float(v["train.optim_eps"]),
            batch_size=int(v["train.batch_size"]),
            num_mini_batch=int(v["train.num_mini_batch"]),
            rollout_envs=int(v["train.rollout_threads"]),
            rollout_steps=int(v["env.episode_length"]),
            total_steps=int(v["train.steps"]),
            sparsity=float(v["train.sparsity"]),
            temperature=float(v["train.temperature"]),
            target_mode=str(v["train.target_mode"]),
            target_interval=int(v["train.target_interval"]),
            target_ema=float(v["train.target_ema"]),
            use_gae=bool(v["train.use_gae"]),
            use_huber_loss=bool(v["train.use_huber_loss"]),
            huber_delta=float(v["train.huber_delta"]),
            advantage_norm=bool(v["train.advantage_norm"]),
            seed=int(v["run.seed"]),
        )


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    values = {key: default for key, (_, default) in DEFAULTS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser, _ = DEFAULTS[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key in DEFAULTS:
        val = cfg.values[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
