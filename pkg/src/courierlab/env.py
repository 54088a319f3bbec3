"""Grid-courier environment: entity motion, rewards, termination.

A 10x10 grid holds a player and three entities, one per role (enemy,
message, goal).  The player must fetch the message and deliver it to the
goal while avoiding the enemy.  All transitions are pure functions of
(params, state, action, rng), so episodes replay bit-identically from a
seed.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

GRID_SIZE = 10
NUM_CHANNELS = 4  # player + three entities
NUM_CONFIGS = 24  # 4 player cells x 6 entity permutations


class Identity(enum.IntEnum):
    """Token ids for everything that can occupy a channel.

    The twelve game identities use the fixed ids 2..13; 0, 14, 15 are
    artifact-assigned (empty channel, player, player carrying message).
    """

    NONE = 0
    AIRPLANE = 2
    MAGE = 3
    DOG = 4
    BIRD = 5
    FISH = 6
    SCIENTIST = 7
    THIEF = 8
    SHIP = 9
    BALL = 10
    ROBOT = 11
    QUEEN = 12
    SWORD = 13
    PLAYER = 14
    PLAYER_WITH_MESSAGE = 15


GAME_IDENTITIES: tuple[Identity, ...] = tuple(
    ident for ident in Identity if 2 <= int(ident) <= 13
)


class Role(enum.Enum):
    ENEMY = "enemy"
    MESSAGE = "message"
    GOAL = "goal"


class Movement(enum.Enum):
    CHASING = "chasing"
    FLEEING = "fleeing"
    IMMOBILE = "immobile"


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


ACTION_DELTAS: dict[Action, tuple[int, int]] = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.STAY: (0, 0),
}

Cell = tuple[int, int]

# Start-layout anchors as grid-size fractions, so the 5x5 oracle variant
# shares the table.  Kept compact: on 10x10 every player-to-entity
# distance is <= 7, so fetch-then-deliver fits the 32-step budget.
_ENTITY_FRACS = ((0.22, 0.33), (0.33, 0.78), (0.78, 0.44))
_PLAYER_FRACS = ((0.67, 0.67), (0.56, 0.44), (0.44, 0.67), (0.67, 0.33))

# Intermittent movement schedule: chasers act every 2nd step, fleers
# every 4th.  Under an every-step schedule a greedy fleer can never be
# caught (it always has a strictly-distance-increasing move at range 1),
# which would make a third of all games unwinnable.
_MOVE_PERIOD = {Movement.CHASING: 2, Movement.FLEEING: 4}


def entity_cells(grid_size: int = GRID_SIZE) -> tuple[Cell, Cell, Cell]:
    cells = tuple(
        (round(fr * (grid_size - 1)), round(fc * (grid_size - 1)))
        for fr, fc in _ENTITY_FRACS
    )
    return cells  # type: ignore[return-value]


def player_cells(grid_size: int = GRID_SIZE) -> tuple[Cell, ...]:
    return tuple(
        (round(fr * (grid_size - 1)), round(fc * (grid_size - 1)))
        for fr, fc in _PLAYER_FRACS
    )


@dataclass(frozen=True)
class EntitySpec:
    """One game entity: who it is, what it does, how it moves."""

    identity: Identity
    role: Role
    movement: Movement

    def __post_init__(self) -> None:
        if self.identity not in GAME_IDENTITIES:
            raise ValueError(f"{self.identity!r} is not a game identity")


@dataclass(frozen=True)
class EnvParams:
    """The parameter vector of one game: three entity specs plus a start
    configuration index in [0, 24)."""

    entities: tuple[EntitySpec, EntitySpec, EntitySpec]
    config_index: int = 0

    def __post_init__(self) -> None:
        if len(self.entities) != 3:
            raise ValueError("exactly three entities required")
        idents = {e.identity for e in self.entities}
        if len(idents) != 3:
            raise ValueError("entity identities must be distinct")
        roles = {e.role for e in self.entities}
        if roles != {Role.ENEMY, Role.MESSAGE, Role.GOAL}:
            raise ValueError("roles must be a permutation of enemy/message/goal")
        if not 0 <= self.config_index < NUM_CONFIGS:
            raise ValueError(
                f"config_index {self.config_index} outside [0, {NUM_CONFIGS})"
            )

    def channel_for_role(self, role: Role) -> int:
        for i, spec in enumerate(self.entities):
            if spec.role == role:
                return i + 1
        raise ValueError(f"no entity with role {role}")  # pragma: no cover


@dataclass(frozen=True)
class GridState:
    """Positions and identities per channel.  Channel 0 is the player.

    A channel's position is None when the channel is absent (the message
    entity after pickup).  step_count tracks ticks taken so far; it
    drives the entity movement schedule and is not part of the token
    encoding.
    """

    positions: tuple[Optional[Cell], ...]
    identities: tuple[Identity, ...]
    has_message: bool = False
    step_count: int = 0
    grid_size: int = GRID_SIZE

    @property
    def player_pos(self) -> Cell:
        assert self.positions[0] is not None
        return self.positions[0]


@dataclass(frozen=True)
class StepOutcome:
    state: GridState
    reward: float
    done: bool


@dataclass
class Trajectory:
    """An episode: T states with aligned rewards/dones and T-1 actions."""

    states: list[GridState]
    actions: list[Action] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    dones: list[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.rewards:
            self.rewards = [0.0] * len(self.states)
        if not self.dones:
            self.dones = [False] * len(self.states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def cumulative_reward(self) -> float:
        return float(sum(self.rewards))

    @property
    def terminated(self) -> bool:
        return bool(self.dones and self.dones[-1])


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _in_grid(cell: Cell, grid_size: int) -> bool:
    return 0 <= cell[0] < grid_size and 0 <= cell[1] < grid_size


def _apply_delta(cell: Cell, action: Action) -> Cell:
    dr, dc = ACTION_DELTAS[action]
    return (cell[0] + dr, cell[1] + dc)


def _clamp_move(cell: Cell, action: Action, grid_size: int) -> Cell:
    nxt = _apply_delta(cell, action)
    return nxt if _in_grid(nxt, grid_size) else cell


def reset(params: EnvParams, seed: int = 0, grid_size: int = GRID_SIZE) -> GridState:
    """Place the player and entities per the start-layout table.

    config_index = 6 * player_slot + entity_permutation_index; the layout
    is a pure table lookup, so the seed does not influence it.
    """
    if not 0 <= params.config_index < NUM_CONFIGS:
        raise ValueError(f"config_index {params.config_index} outside [0, 24)")
    player_slot, perm_index = divmod(params.config_index, 6)
    perm = list(itertools.permutations(range(3)))[perm_index]
    ecells = entity_cells(grid_size)
    positions: list[Optional[Cell]] = [player_cells(grid_size)[player_slot]]
    positions += [ecells[perm[i]] for i in range(3)]
    identities = (Identity.PLAYER,) + tuple(e.identity for e in params.entities)
    return GridState(
        positions=tuple(positions),
        identities=identities,
        has_message=False,
        step_count=0,
        grid_size=grid_size,
    )


def entity_move(
    pos: Cell,
    movement: Movement,
    player_pos: Cell,
    rng: np.random.Generator,
    grid_size: int = GRID_SIZE,
) -> Cell:
    """One entity move: chase, flee, or hold still.

    Chasing draws uniformly from the in-grid moves that strictly decrease
    Manhattan distance to the player (stay if none); fleeing from the
    strictly increasing ones, falling back to uniform over non-decreasing
    moves when cornered.
    """
    if movement is Movement.IMMOBILE:
        return pos
    here = manhattan(pos, player_pos)
    options: list[tuple[Cell, int]] = []
    for action in Action:
        nxt = _apply_delta(pos, action)
        if _in_grid(nxt, grid_size):
            options.append((nxt, manhattan(nxt, player_pos)))
    if movement is Movement.CHASING:
        better = [cell for cell, d in options if d < here]
        if not better:
            return pos
        return better[int(rng.integers(len(better)))]
    worse = [cell for cell, d in options if d > here]
    if not worse:
        worse = [cell for cell, d in options if d >= here]
    return worse[int(rng.integers(len(worse)))]


def _entity_moves_now(movement: Movement, tick: int) -> bool:
    period = _MOVE_PERIOD.get(movement)
    return period is not None and tick % period == 0


def step(
    params: EnvParams,
    state: GridState,
    action: Action,
    rng: np.random.Generator,
) -> StepOutcome:
    """Advance one tick: player moves, scheduled entities move, then
    interactions resolve.

    Interaction priority is enemy > goal > message so a multi-entity
    co-location still emits a single reward from {-1, 0, 0.5, 1}.
    Pass-through swaps do not count as collisions.
    """
    if not isinstance(action, Action):
        try:
            action = Action(action)
        except ValueError:
            raise ValueError(f"invalid action {action!r}") from None
    grid = state.grid_size
    tick = state.step_count + 1

    player = _clamp_move(state.player_pos, action, grid)

    positions: list[Optional[Cell]] = [player]
    for i, spec in enumerate(params.entities):
        pos = state.positions[i + 1]
        if pos is None:
            positions.append(None)
        elif _entity_moves_now(spec.movement, tick):
            positions.append(entity_move(pos, spec.movement, player, rng, grid))
        else:
            positions.append(pos)

    reward = 0.0
    done = False
    has_message = state.has_message
    identities = list(state.identities)

    enemy_ch = params.channel_for_role(Role.ENEMY)
    goal_ch = params.channel_for_role(Role.GOAL)
    message_ch = params.channel_for_role(Role.MESSAGE)

    if positions[enemy_ch] == player:
        reward, done = -1.0, True
    elif positions[goal_ch] == player:
        reward, done = (1.0, True) if has_message else (-1.0, True)
    elif positions[message_ch] == player:
        reward = 0.5
        has_message = True
        positions[message_ch] = None
        identities[message_ch] = Identity.NONE
        identities[0] = Identity.PLAYER_WITH_MESSAGE

    new_state = GridState(
        positions=tuple(positions),
        identities=tuple(identities),
        has_message=has_message,
        step_count=tick,
        grid_size=grid,
    )
    return StepOutcome(state=new_state, reward=reward, done=done)


def absent_state(state: GridState, channel: int) -> GridState:
    """Testing helper: a copy of state with one channel removed."""
    positions = list(state.positions)
    identities = list(state.identities)
    positions[channel] = None
    identities[channel] = Identity.NONE
    return replace(state, positions=tuple(positions), identities=tuple(identities))
