"""Rule-based behavior policies and the BFS planner behind them.

Five policies generate the trajectory corpora and serve as experts:
survive, win, suicide, obtain_message, random.  All are total functions
of (state, params, rng) and never mutate their inputs.
"""

from __future__ import annotations

import enum
from collections import deque

import numpy as np

from .env import (
    Action,
    Cell,
    EnvParams,
    GridState,
    Movement,
    Role,
    Trajectory,
    _clamp_move,
    manhattan,
    reset,
    step,
)

# fixed tie-break order for path reconstruction and argmax scans
_ORDERED_MOVES = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)

MAX_EPISODE_BLOCKS = 32


class PolicyKind(enum.Enum):
    SURVIVE = "survive"
    WIN = "win"
    SUICIDE = "suicide"
    OBTAIN_MESSAGE = "obtain_message"
    RANDOM = "random"


def bfs_distances(target: Cell, grid_size: int) -> np.ndarray:
    """4-connected shortest-path distances to target, walls at the edges."""
    dist = np.full((grid_size, grid_size), -1, dtype=np.int32)
    dist[target] = 0
    queue = deque([target])
    while queue:
        r, c = queue.popleft()
        for action in _ORDERED_MOVES:
            nxt = _clamp_move((r, c), action, grid_size)
            if dist[nxt] == -1:
                dist[nxt] = dist[r, c] + 1
                queue.append(nxt)
    return dist


def bfs_next_action(state: GridState, target_channel: int) -> Action:
    """First action of a shortest path to the target channel's cell.

    Ties break in the fixed order up < down < left < right; stay when
    already co-located.
    """
    target = state.positions[target_channel]
    if target is None:
        raise ValueError(f"channel {target_channel} is absent")
    player = state.player_pos
    if player == target:
        return Action.STAY
    dist = bfs_distances(target, state.grid_size)
    here = dist[player]
    for action in _ORDERED_MOVES:
        nxt = _clamp_move(player, action, state.grid_size)
        if dist[nxt] == here - 1:
            return action
    raise RuntimeError("grid is connected; unreachable")  # pragma: no cover


def _uniform_action(rng: np.random.Generator) -> Action:
    return Action(int(rng.integers(5)))


def _survive_action(
    state: GridState, params: EnvParams, rng: np.random.Generator
) -> Action:
    player = state.player_pos
    enemy = state.positions[params.channel_for_role(Role.ENEMY)]
    goal = state.positions[params.channel_for_role(Role.GOAL)]
    assert enemy is not None and goal is not None
    if min(manhattan(player, enemy), manhattan(player, goal)) >= 6:
        return _uniform_action(rng)
    keeps_clear = []
    best_action, best_score = Action.UP, -1
    for action in (*_ORDERED_MOVES, Action.STAY):
        nxt = _clamp_move(player, action, state.grid_size)
        de, dg = manhattan(nxt, enemy), manhattan(nxt, goal)
        if de >= 3 and dg >= 3:
            keeps_clear.append(action)
        if min(de, dg) > best_score:
            best_action, best_score = action, min(de, dg)
    if keeps_clear:
        return keeps_clear[int(rng.integers(len(keeps_clear)))]
    return best_action


def act(
    kind: PolicyKind,
    state: GridState,
    params: EnvParams,
    rng: np.random.Generator,
) -> Action:
    """One action from the named policy for a non-terminal state."""
    if kind is PolicyKind.RANDOM:
        return _uniform_action(rng)
    if kind is PolicyKind.SURVIVE:
        return _survive_action(state, params, rng)
    if kind is PolicyKind.SUICIDE:
        return bfs_next_action(state, params.channel_for_role(Role.ENEMY))
    if kind is PolicyKind.WIN:
        if state.has_message:
            return bfs_next_action(state, params.channel_for_role(Role.GOAL))
        return bfs_next_action(state, params.channel_for_role(Role.MESSAGE))
    if kind is PolicyKind.OBTAIN_MESSAGE:
        if state.has_message:
            return _uniform_action(rng)
        return bfs_next_action(state, params.channel_for_role(Role.MESSAGE))
    raise ValueError(f"unknown policy {kind!r}")  # pragma: no cover


def rollout(
    params: EnvParams,
    kind: PolicyKind,
    seed: int,
    max_len: int = MAX_EPISODE_BLOCKS,
    grid_size: int = 10,
) -> Trajectory:
    """Roll one episode to termination or max_len blocks.

    A trajectory of length T holds T (state, reward, done) tuples and
    T - 1 actions; max_len counts tuples, so at most max_len - 1 steps
    are taken.
    """
    root = np.random.default_rng(seed)
    env_rng, policy_rng = root.spawn(2)
    state = reset(params, grid_size=grid_size)
    traj = Trajectory(states=[state])
    while len(traj.states) < max_len and not traj.terminated:
        action = act(kind, state, params, policy_rng)
        out = step(params, state, action, env_rng)
        traj.actions.append(action)
        traj.states.append(out.state)
        traj.rewards.append(out.reward)
        traj.dones.append(out.done)
        state = out.state
    return traj
