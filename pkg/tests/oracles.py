"""Independent oracles used by the test suite: brute-force GAE, random-walk
absorption analysis, exhaustive scripted-policy simulation, and joint-MDP
value iteration.  These stay deliberately naive and separate from the library
code paths they check."""

from __future__ import annotations

import itertools

import numpy as np

from commformer.envs import (
    ACTION_DOWN,
    ACTION_LEFT,
    ACTION_RIGHT,
    ACTION_STAY,
    ACTION_UP,
    REWARD_PER_UNFINISHED,
)

_MOVES5 = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)]  # up, down, left, right, stay


def gae_double_loop(rewards, values, dones, gamma, lam):
    """Direct double-sum GAE: A_t = sum_l (gamma*lam)^l delta_{t+l} with the
    product of (1 - done) factors cut at episode boundaries."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = len(rewards)
    deltas = [
        rewards[t] + gamma * values[t + 1] * (1.0 - dones[t]) - values[t]
        for t in range(t_len)
    ]
    adv = np.zeros(t_len)
    for t in range(t_len):
        coeff = 1.0
        for l in range(t, t_len):
            adv[t] += coeff * deltas[l]
            if dones[l]:
                break
            coeff *= gamma * lam
    return adv, adv + values[:-1]


def clamped_neighbors(cell: int, grid: int) -> list[int]:
    """Successor cells for the five move actions with wall clamping."""
    r, c = divmod(cell, grid)
    out = []
    for dr, dc in _MOVES5:
        rr = min(max(r + dr, 0), grid - 1)
        cc = min(max(c + dc, 0), grid - 1)
        out.append(rr * grid + cc)
    return out


def greedy_action(pos, prey) -> int:
    """Shortest-path move reducing Manhattan distance, rows first."""
    r, c = pos
    pr, pc = prey
    if r < pr:
        return ACTION_DOWN
    if r > pr:
        return ACTION_UP
    if c < pc:
        return ACTION_RIGHT
    if c > pc:
        return ACTION_LEFT
    return ACTION_STAY


def mean_max_manhattan(grid: int, n_agents: int) -> float:
    """Exact E[max_i Manhattan(agent_i, prey)] over uniform distinct
    placements of n_agents agents and one prey."""
    cells = list(range(grid * grid))
    total, count = 0.0, 0
    for prey in cells:
        pr, pc = divmod(prey, grid)
        others = [c for c in cells if c != prey]
        for combo in itertools.combinations(others, n_agents):
            d = max(abs(c // grid - pr) + abs(c % grid - pc) for c in combo)
            total += d
            count += 1
    return total / count


def random_walk_hitting_cdf(grid: int, prey: int, horizon: int) -> np.ndarray:
    """cdf[start, t] = P(random 5-action walk from start has visited the prey
    cell by step t), t = 0..horizon."""
    n = grid * grid
    p = np.zeros((n, n))
    for cell in range(n):
        if cell == prey:
            p[cell, cell] = 1.0  # absorbing once reached
            continue
        for nxt in clamped_neighbors(cell, grid):
            p[cell, nxt] += 1.0 / 5.0
    cdf = np.zeros((n, horizon + 1))
    dist = np.eye(n)
    cdf[:, 0] = dist[:, prey]
    for t in range(1, horizon + 1):
        dist = dist @ p
        cdf[:, t] = dist[:, prey]
    return cdf


def random_walk_expected_steps(grid: int, n_agents: int, horizon: int) -> float:
    """Exact expected episode length for uniform-random joint actions on the
    PP task: min(max_i hitting time, horizon), averaged over uniform distinct
    placements.  Uses E[L] = sum_t P(L > t) and symmetric-sum identities for
    the distinct-start average of the product of per-agent CDFs."""
    assert n_agents == 3, "symmetric-sum expansion implemented for 3 agents"
    n = grid * grid
    expected = 0.0
    for prey in range(n):
        cdf = random_walk_hitting_cdf(grid, prey, horizon)
        starts = [c for c in range(n) if c != prey]
        c_mat = cdf[starts]  # [n-1, horizon+1]
        s1 = c_mat.sum(axis=0)
        s2 = (c_mat**2).sum(axis=0)
        s3 = (c_mat**3).sum(axis=0)
        # sum over ordered distinct triples of products
        triple_sum = s1**3 - 3.0 * s1 * s2 + 2.0 * s3
        m = len(starts)
        n_triples = m * (m - 1) * (m - 2)
        p_all_reached = triple_sum / n_triples  # P(max H <= t), t = 0..horizon
        expected += float(np.sum(1.0 - p_all_reached[:horizon]))
    return expected / n


def relay_value_iteration(grid: int, horizon: int) -> tuple[float, float]:
    """Exact full-state optimum for the 3-agent relay task (2 runners).

    Backward induction over (runner1, runner2, flags) for each prey cell,
    maximizing the joint reward; returns (expected optimal return, expected
    optimal episode length) under uniform distinct placement.
    """
    n = grid * grid
    nbrs = np.array([clamped_neighbors(c, grid) for c in range(n)])  # [n, 5]
    total_ret, total_len, count = 0.0, 0.0, 0

    for prey in range(n):
        # value[t][p1, f1, p2, f2]; terminal horizon value 0
        v = np.zeros((n, 2, n, 2))
        steps_to_go = np.zeros((n, 2, n, 2))
        for _ in range(horizon):
            # X[p1', f1', p2', f2'] = reward(s') + continue * v[s']; flag
            # updates are applied through the index maps below, so the flag
            # axes here are already post-move.
            fl = np.array([0, 1])
            unfinished = np.zeros((n, 2, n, 2))
            unfinished += (1 - fl)[None, :, None, None] + (1 - fl)[None, None, None, :]
            reward = -REWARD_PER_UNFINISHED * unfinished
            done = unfinished == 0
            x = reward + np.where(done, 0.0, v)
            x_len = 1.0 + np.where(done, 0.0, steps_to_go)
            # maximize over runner 2's move
            y = np.full((n, 2, n, 2), -np.inf)
            y_len = np.zeros((n, 2, n, 2))
            for a in range(5):
                p2n = nbrs[:, a]
                f2n0 = (p2n == prey).astype(int)  # new flag if f2 = 0
                cand0 = x[:, :, p2n, f2n0]
                cand1 = x[:, :, p2n, 1]
                cand = np.stack([cand0, cand1], axis=-1)
                cand_len = np.stack([x_len[:, :, p2n, f2n0], x_len[:, :, p2n, 1]], axis=-1)
                better = cand > y
                y_len = np.where(better, cand_len, y_len)
                y = np.where(better, cand, y)
            # maximize over runner 1's move
            z = np.full((n, 2, n, 2), -np.inf)
            z_len = np.zeros((n, 2, n, 2))
            for a in range(5):
                p1n = nbrs[:, a]
                f1n0 = (p1n == prey).astype(int)
                cand = np.stack([y[p1n, f1n0], y[p1n, 1]], axis=1)  # [n, 2, n, 2]
                cand_len = np.stack([y_len[p1n, f1n0], y_len[p1n, 1]], axis=1)
                better = cand > z
                z_len = np.where(better, cand_len, z_len)
                z = np.where(better, cand, z)
            v, steps_to_go = z, z_len
        starts = [c for c in range(n) if c != prey]
        for p1, p2 in itertools.permutations(starts, 2):
            total_ret += v[p1, 0, p2, 0]
            total_len += steps_to_go[p1, 0, p2, 0]
            count += 1
    return total_ret / count, total_len / count
