"""Seeded grid-world environments: predator-prey (PP), predator-capture-prey
(PCP), and a communication-critical Relay world.

All dynamics are deterministic given the joint action; the only randomness is
the placement at reset.  A single scalar joint reward of -0.05 per agent whose
goal flag is still unset is paid each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "EnvSpec",
    "EnvState",
    "GridEnv",
    "VecEnv",
    "pp_spec",
    "pcp_spec",
    "relay_spec",
    "make_spec",
    "REWARD_PER_UNFINISHED",
    "ACTION_STAY",
    "ACTION_UP",
    "ACTION_DOWN",
    "ACTION_LEFT",
    "ACTION_RIGHT",
    "ACTION_CAPTURE",
]

REWARD_PER_UNFINISHED = 0.05

ACTION_UP = 0
ACTION_DOWN = 1
ACTION_LEFT = 2
ACTION_RIGHT = 3
ACTION_STAY = 4
ACTION_CAPTURE = 5

_MOVES = {
    ACTION_UP: (-1, 0),
    ACTION_DOWN: (1, 0),
    ACTION_LEFT: (0, -1),
    ACTION_RIGHT: (0, 1),
    ACTION_STAY: (0, 0),
}

PREDATOR = "predator"
CAPTURE = "capture"
SCOUT = "scout"
RUNNER = "runner"


@dataclass(frozen=True)
class EnvSpec:
    name: str
    n_agents: int
    grid: int
    vision: int
    max_steps: int
    classes: tuple[str, ...]
    action_dims: tuple[int, ...]
    obs_dim: int


@dataclass
class EnvState:
    positions: np.ndarray  # [N, 2] int rows/cols
    prey: np.ndarray  # [2]
    reached: np.ndarray  # [N] bool
    t: int
    done: bool


def _obs_dim(spec_name: str, vision: int) -> int:
    # own position (2) + occupancy patch + reached flag + step fraction
    base = 2 + (2 * vision + 1) ** 2 + 1 + 1
    if spec_name == "relay":
        # no patch (vision 0 treated as empty) + prey-quadrant one-hot
        return 2 + 1 + 1 + 4
    return base


def pp_spec(n_agents: int = 3, grid: int = 5, vision: int = 1, max_steps: int = 20) -> EnvSpec:
    classes = tuple([PREDATOR] * n_agents)
    return EnvSpec(
        name="pp",
        n_agents=n_agents,
        grid=grid,
        vision=vision,
        max_steps=max_steps,
        classes=classes,
        action_dims=tuple([5] * n_agents),
        obs_dim=_obs_dim("pp", vision),
    )


def pcp_spec(
    n_predators: int = 2,
    n_captures: int = 1,
    grid: int = 5,
    vision: int = 1,
    max_steps: int = 20,
) -> EnvSpec:
    classes = tuple([PREDATOR] * n_predators + [CAPTURE] * n_captures)
    dims = tuple([5] * n_predators + [6] * n_captures)
    return EnvSpec(
        name="pcp",
        n_agents=n_predators + n_captures,
        grid=grid,
        vision=vision,
        max_steps=max_steps,
        classes=classes,
        action_dims=dims,
        obs_dim=_obs_dim("pcp", vision),
    )


def relay_spec(n_agents: int = 3, grid: int = 5, max_steps: int = 20) -> EnvSpec:
    """Relay world: agent 0 is a scout that sees the prey's quadrant from
    anywhere; all agents are otherwise blind (vision 0, own position only).
    Success requires every non-scout agent to stand on the prey cell, so
    above-random play needs information to flow out of the scout.
    """
    if n_agents < 2:
        raise ValueError(f"relay needs at least 2 agents, got {n_agents}")
    classes = tuple([SCOUT] + [RUNNER] * (n_agents - 1))
    return EnvSpec(
        name="relay",
        n_agents=n_agents,
        grid=grid,
        vision=0,
        max_steps=max_steps,
        classes=classes,
        action_dims=tuple([5] * n_agents),
        obs_dim=_obs_dim("relay", 0),
    )


def make_spec(name: str, **overrides) -> EnvSpec:
    builders = {"pp": pp_spec, "pcp": pcp_spec, "relay": relay_spec}
    if name not in builders:
        raise ValueError(f"unknown environment {name!r}; options: {sorted(builders)}")
    return builders[name](**overrides)


def prey_quadrant(prey: np.ndarray, grid: int) -> int:
    """Quadrant index 2 * (bottom half) + (right half); center rows/cols count
    as top/left."""
    half = (grid - 1) / 2.0
    return 2 * int(prey[0] > half) + int(prey[1] > half)


class GridEnv:
    """Single seeded environment instance."""

    def __init__(self, spec: EnvSpec, seed: int) -> None:
        if spec.grid * spec.grid < spec.n_agents + 1:
            raise ValueError(
                f"grid {spec.grid}x{spec.grid} too small for {spec.n_agents} agents + prey"
            )
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None

    def reset(self) -> np.ndarray:
        g = self.spec.grid
        cells = self.rng.choice(g * g, size=self.spec.n_agents + 1, replace=False)
        coords = np.stack([cells // g, cells % g], axis=1).astype(np.int64)
        reached = np.array(
            [cls == SCOUT for cls in self.spec.classes], dtype=bool
        )  # scouts have no goal of their own
        self.state = EnvState(
            positions=coords[:-1], prey=coords[-1], reached=reached, t=0, done=False
        )
        return self.observe()

    def observe(self) -> np.ndarray:
        assert self.state is not None, "reset() before observe()"
        s, spec = self.state, self.spec
        g = spec.grid
        obs = np.zeros((spec.n_agents, spec.obs_dim), dtype=np.float32)
        step_frac = s.t / spec.max_steps
        for i, cls in enumerate(spec.classes):
            if cls == CAPTURE:
                continue  # capture agents carry no sensors: all-zero observation
            r, c = s.positions[i]
            vec = [r / (g - 1), c / (g - 1)]
            if spec.name != "relay":
                v = spec.vision
                patch = np.zeros((2 * v + 1, 2 * v + 1), dtype=np.float32)
                pr, pc = s.prey
                if abs(pr - r) <= v and abs(pc - c) <= v:
                    patch[pr - r + v, pc - c + v] = 1.0
                vec.extend(patch.ravel().tolist())
            vec.append(float(s.reached[i]))
            vec.append(step_frac)
            if spec.name == "relay":
                quad = np.zeros(4, dtype=np.float32)
                if cls == SCOUT:
                    quad[prey_quadrant(s.prey, g)] = 1.0
                vec.extend(quad.tolist())
            obs[i] = np.asarray(vec, dtype=np.float32)
        return obs

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        assert self.state is not None, "reset() before step()"
        s, spec = self.state, self.spec
        if s.done:
            raise RuntimeError("step() called on a finished episode; reset() first")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (spec.n_agents,):
            raise ValueError(f"expected {spec.n_agents} actions, got {actions.shape}")
        g = spec.grid
        new_positions = s.positions.copy()
        for i, a in enumerate(actions):
            if a < 0 or a >= spec.action_dims[i]:
                raise ValueError(
                    f"action {a} out of range [0, {spec.action_dims[i]}) for agent {i}"
                )
            if a == ACTION_CAPTURE:
                continue  # capture action does not move
            dr, dc = _MOVES[int(a)]
            new_positions[i, 0] = np.clip(s.positions[i, 0] + dr, 0, g - 1)
            new_positions[i, 1] = np.clip(s.positions[i, 1] + dc, 0, g - 1)
        reached = s.reached.copy()
        on_prey = (new_positions == s.prey).all(axis=1)
        for i, cls in enumerate(spec.classes):
            if cls == CAPTURE:
                if on_prey[i] and actions[i] == ACTION_CAPTURE:
                    reached[i] = True
            elif cls != SCOUT:
                if on_prey[i]:
                    reached[i] = True
        t = s.t + 1
        unfinished = int((~reached).sum())
        reward = -REWARD_PER_UNFINISHED * unfinished
        success = bool(reached.all())
        done = success or t >= spec.max_steps
        self.state = EnvState(
            positions=new_positions, prey=s.prey, reached=reached, t=t, done=done
        )
        info = {
            "success": success,
            "steps": t,
            "positions": new_positions,
            "reached": reached,
            "truncated": done and not success,
        }
        return self.observe(), float(reward), done, info


class VecEnv:
    """A batch of independently seeded environments with auto-reset.

    Completed-episode statistics are accumulated and drained via
    :meth:`pop_episode_stats`.
    """

    def __init__(self, spec: EnvSpec, n_envs: int, seed: int) -> None:
        seeds = np.random.SeedSequence(seed).generate_state(n_envs)
        self.envs = [GridEnv(spec, int(s)) for s in seeds]
        self.spec = spec
        self.n_envs = n_envs
        self._returns = np.zeros(n_envs)
        self._episodes: list[dict] = []

    def reset(self) -> np.ndarray:
        self._returns[:] = 0.0
        return np.stack([env.reset() for env in self.envs])

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict]]:
        obs, rewards, dones, infos = [], [], [], []
        for e, env in enumerate(self.envs):
            o, r, d, info = env.step(actions[e])
            self._returns[e] += r
            if d:
                info["terminal_obs"] = o  # pre-reset observation
                self._episodes.append(
                    {
                        "return": float(self._returns[e]),
                        "length": info["steps"],
                        "success": info["success"],
                    }
                )
                self._returns[e] = 0.0
                o = env.reset()
            obs.append(o)
            rewards.append(r)
            dones.append(d)
            infos.append(info)
        return (
            np.stack(obs),
            np.asarray(rewards, dtype=np.float64),
            np.asarray(dones, dtype=bool),
            infos,
        )

    def pop_episode_stats(self) -> list[dict]:
        out, self._episodes = self._episodes, []
        return out
