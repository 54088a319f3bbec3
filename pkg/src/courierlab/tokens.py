"""Bidirectional codec between trajectories and token-block sequences.

Each timestep becomes a block of 3C + 3 integer tokens:

    (a_{t-1}, i^1, h^1, w^1, ..., i^C, h^C, w^C, r, d)

with C = 4 channels (player + three entities).  The first block's action
slot holds a start token.  The id space is partitioned into disjoint
ranges so every emitted token is decodable by range alone; identity
tokens keep their fixed game ids by occupying the lowest range.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .env import (
    Action,
    GridState,
    Identity,
    Trajectory,
)

NUM_CHANNELS = 4
BLOCK_TOKENS = 3 * NUM_CHANNELS + 3  # 15
MAX_BLOCKS = 32
CONTEXT_BLOCKS = 33  # decoder budget: 32 blocks plus headroom

ACTION_SLOT = 0
REWARD_SLOT = BLOCK_TOKENS - 2
DONE_SLOT = BLOCK_TOKENS - 1

_REWARD_TO_LABEL = {-1.0: 0, 0.0: 1, 0.5: 2, 1.0: 3}
_LABEL_TO_REWARD = {v: k for k, v in _REWARD_TO_LABEL.items()}


class TokenError(ValueError):
    """A token is outside its slot's vocabulary range."""


def discretize_reward(r: float) -> int:
    """Bijection -1 -> 0, 0 -> 1, 0.5 -> 2, 1 -> 3."""
    try:
        return _REWARD_TO_LABEL[float(r)]
    except KeyError:
        raise TokenError(f"reward {r!r} outside support {{-1, 0, 0.5, 1}}") from None


def label_to_reward(label: int) -> float:
    try:
        return _LABEL_TO_REWARD[int(label)]
    except KeyError:
        raise TokenError(f"reward label {label!r} outside 0..3") from None


@dataclass(frozen=True)
class Vocab:
    """Disjoint id ranges over one flat token space."""

    grid_size: int = 10
    identity_base: int = 0          # identities occupy 0..15 (fixed ids)
    identity_count: int = 16

    @property
    def action_base(self) -> int:
        return self.identity_base + self.identity_count  # 16

    @property
    def start_token(self) -> int:
        return self.action_base + len(Action)  # 21

    @property
    def coord_base(self) -> int:
        return self.start_token + 1  # 22

    @property
    def reward_base(self) -> int:
        return self.coord_base + self.grid_size  # 32

    @property
    def done_base(self) -> int:
        return self.reward_base + 4  # 36

    @property
    def size(self) -> int:
        return self.done_base + 2  # 38

    # -- encoders ----------------------------------------------------------
    def action(self, a: Action) -> int:
        return self.action_base + int(a)

    def coord(self, value: int) -> int:
        if not 0 <= value < self.grid_size:
            raise TokenError(f"coordinate {value} outside [0, {self.grid_size})")
        return self.coord_base + value

    def reward(self, r: float) -> int:
        return self.reward_base + discretize_reward(r)

    def done(self, d: bool) -> int:
        return self.done_base + int(bool(d))

    def identity(self, ident: Identity) -> int:
        return self.identity_base + int(ident)

    # -- decoders ----------------------------------------------------------
    def decode_identity(self, token: int) -> Identity:
        value = token - self.identity_base
        if not 0 <= value < self.identity_count:
            raise TokenError(f"token {token} not an identity")
        try:
            return Identity(value)
        except ValueError:
            raise TokenError(f"identity id {value} is unassigned") from None

    def decode_action(self, token: int) -> Optional[Action]:
        """Action for an action-slot token; None for the start token."""
        if token == self.start_token:
            return None
        value = token - self.action_base
        if not 0 <= value < len(Action):
            raise TokenError(f"token {token} not an action")
        return Action(value)

    def decode_coord(self, token: int) -> int:
        value = token - self.coord_base
        if not 0 <= value < self.grid_size:
            raise TokenError(f"token {token} not a coordinate")
        return value

    def decode_reward(self, token: int) -> float:
        value = token - self.reward_base
        if not 0 <= value < 4:
            raise TokenError(f"token {token} not a reward label")
        return label_to_reward(value)

    def decode_done(self, token: int) -> bool:
        value = token - self.done_base
        if value not in (0, 1):
            raise TokenError(f"token {token} not a done label")
        return bool(value)

    def slot_range(self, slot: int) -> tuple[int, int]:
        """Valid [lo, hi) token range for a block slot index."""
        if slot == ACTION_SLOT:
            return self.action_base, self.start_token + 1
        if slot == REWARD_SLOT:
            return self.reward_base, self.reward_base + 4
        if slot == DONE_SLOT:
            return self.done_base, self.done_base + 2
        field = (slot - 1) % 3
        if field == 0:
            return self.identity_base, self.identity_base + self.identity_count
        return self.coord_base, self.coord_base + self.grid_size

    def slot_valid_tokens(self, slot: int) -> np.ndarray:
        """Boolean mask over the vocabulary of decodable ids for a slot.

        Identity slots exclude unassigned ids inside the identity range.
        """
        mask = np.zeros(self.size, dtype=bool)
        lo, hi = self.slot_range(slot)
        mask[lo:hi] = True
        if slot not in (ACTION_SLOT, REWARD_SLOT, DONE_SLOT) and (slot - 1) % 3 == 0:
            assigned = {int(i) for i in Identity}
            for v in range(self.identity_count):
                if v not in assigned:
                    mask[self.identity_base + v] = False
        return mask

    def describe(self) -> str:
        lines = [
            "# token vocabulary: disjoint ranges over one id space",
            f"grid_size {self.grid_size}",
            f"block_tokens {BLOCK_TOKENS}",
            f"channels {NUM_CHANNELS}",
            f"identities {self.identity_base} {self.identity_base + self.identity_count - 1}",
        ]
        for ident in Identity:
            lines.append(f"identity {int(ident)} {ident.name.lower()}")
        lines.append(
            f"actions {self.action_base} {self.action_base + len(Action) - 1}"
        )
        for a in Action:
            lines.append(f"action {self.action(a)} {a.name.lower()}")
        lines.append(f"start {self.start_token}")
        lines.append(
            f"coords {self.coord_base} {self.coord_base + self.grid_size - 1}"
        )
        lines.append(f"rewards {self.reward_base} {self.reward_base + 3}")
        for r, label in sorted(_REWARD_TO_LABEL.items()):
            lines.append(f"reward {self.reward_base + label} {r}")
        lines.append(f"dones {self.done_base} {self.done_base + 1}")
        lines.append(f"vocab_size {self.size}")
        return "\n".join(lines) + "\n"

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.describe())


DEFAULT_VOCAB = Vocab()


@dataclass
class TokenSequence:
    """T blocks of BLOCK_TOKENS ids plus a per-token loss mask.

    mask is True where the token should be scored as a prediction
    target: everything except the first block and all action slots.
    """

    blocks: np.ndarray  # (T, BLOCK_TOKENS) int64
    loss_mask: np.ndarray  # (T, BLOCK_TOKENS) bool

    def __post_init__(self) -> None:
        if self.blocks.shape != self.loss_mask.shape:
            raise ValueError("blocks and mask shapes differ")
        if self.blocks.ndim != 2 or self.blocks.shape[1] != BLOCK_TOKENS:
            raise ValueError(f"blocks must be (T, {BLOCK_TOKENS})")
        if self.blocks.shape[0] > CONTEXT_BLOCKS:
            raise ValueError("sequence exceeds the context budget")

    @property
    def num_blocks(self) -> int:
        return int(self.blocks.shape[0])

    def flat(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    def flat_mask(self) -> np.ndarray:
        return self.loss_mask.reshape(-1)


def encode_state(state: GridState, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    tokens = []
    for pos, ident in zip(state.positions, state.identities):
        if pos is None:
            tokens += [vocab.identity(Identity.NONE), vocab.coord(0), vocab.coord(0)]
        else:
            tokens += [vocab.identity(ident), vocab.coord(pos[0]), vocab.coord(pos[1])]
    return tokens


def encode_block(
    action: Optional[Action],
    state: GridState,
    reward: float,
    done: bool,
    vocab: Vocab = DEFAULT_VOCAB,
) -> np.ndarray:
    """One (a_{t-1}, s_t, r_t, d_t) block; None action means start token."""
    head = vocab.start_token if action is None else vocab.action(action)
    tokens = [head, *encode_state(state, vocab), vocab.reward(reward), vocab.done(done)]
    return np.array(tokens, dtype=np.int64)


def encode_trajectory(
    traj: Trajectory, vocab: Vocab = DEFAULT_VOCAB
) -> TokenSequence:
    if len(traj) > MAX_BLOCKS:
        raise ValueError(f"trajectory has {len(traj)} blocks > {MAX_BLOCKS}")
    blocks = []
    for t, state in enumerate(traj.states):
        action = traj.actions[t - 1] if t > 0 else None
        blocks.append(
            encode_block(action, state, traj.rewards[t], traj.dones[t], vocab)
        )
    arr = np.stack(blocks)
    mask = np.ones_like(arr, dtype=bool)
    mask[0, :] = False
    mask[:, ACTION_SLOT] = False
    return TokenSequence(blocks=arr, loss_mask=mask)


def decode_block(
    block: np.ndarray, vocab: Vocab = DEFAULT_VOCAB, step_count: int = 0
) -> tuple[Optional[Action], GridState, float, bool]:
    """Inverse of encode_block; raises TokenError on out-of-range slots."""
    if len(block) != BLOCK_TOKENS:
        raise TokenError(f"block must have {BLOCK_TOKENS} tokens")
    action = vocab.decode_action(int(block[ACTION_SLOT]))
    positions = []
    identities = []
    for c in range(NUM_CHANNELS):
        i_tok, h_tok, w_tok = (int(x) for x in block[1 + 3 * c : 4 + 3 * c])
        ident = vocab.decode_identity(i_tok)
        h, w = vocab.decode_coord(h_tok), vocab.decode_coord(w_tok)
        if ident == Identity.NONE:
            positions.append(None)
        else:
            positions.append((h, w))
        identities.append(ident)
    reward = vocab.decode_reward(int(block[REWARD_SLOT]))
    done = vocab.decode_done(int(block[DONE_SLOT]))
    state = GridState(
        positions=tuple(positions),
        identities=tuple(identities),
        has_message=identities[0] == Identity.PLAYER_WITH_MESSAGE,
        step_count=step_count,
        grid_size=vocab.grid_size,
    )
    return action, state, reward, done


def decode_sequence(
    blocks: np.ndarray, vocab: Vocab = DEFAULT_VOCAB
) -> Trajectory:
    """Decode (T, BLOCK_TOKENS) token rows back into a trajectory."""
    states, actions, rewards, dones = [], [], [], []
    for t, row in enumerate(np.asarray(blocks)):
        action, state, reward, done = decode_block(row, vocab, step_count=t)
        if t > 0:
            if action is None:
                raise TokenError(f"start token in non-initial block {t}")
            actions.append(action)
        states.append(state)
        rewards.append(reward)
        dones.append(done)
    return Trajectory(states=states, actions=actions, rewards=rewards, dones=dones)
