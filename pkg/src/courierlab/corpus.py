"""Dataset records and the on-disk corpus format.

One gzip-compressed NDJSON file per split: a header line carrying the
schema version and split metadata, then one record per line.  Records
hold everything a world model or metric needs: the manual (texts, hidden
truths, channel map), the trajectory in token-ready arrays, and the
provenance (game id, policy, seeds).
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .env import (
    Action,
    EntitySpec,
    EnvParams,
    GridState,
    Identity,
    Movement,
    Role,
    Trajectory,
)
from .policies import PolicyKind, rollout
from .splits import ALL_SPLITS, TRAIN, Game, GameUniverse
from .text import Description, Manual, SynonymBank, default_banks, render_manual

SCHEMA_VERSION = "courierlab-corpus-v1"


class CorpusFormatError(ValueError):
    """Malformed corpus file; carries file context and byte offset."""


@dataclass
class DatasetRecord:
    game_id: str
    split: str
    policy: PolicyKind
    seed: int
    config_index: int
    entities: tuple[EntitySpec, EntitySpec, EntitySpec]
    manual: Manual
    trajectory: Trajectory

    def __post_init__(self) -> None:
        if len(self.trajectory) > 32:
            raise ValueError("trajectory exceeds 32 blocks")

    @property
    def env_params(self) -> EnvParams:
        return EnvParams(entities=self.entities, config_index=self.config_index)

    def to_json(self) -> dict:
        states = []
        for s in self.trajectory.states:
            chans = []
            for pos, ident in zip(s.positions, s.identities):
                if pos is None:
                    chans.append(None)
                else:
                    chans.append([int(ident), pos[0], pos[1]])
            states.append(chans)
        return {
            "game_id": self.game_id,
            "split": self.split,
            "policy": self.policy.value,
            "seed": self.seed,
            "config_index": self.config_index,
            "entities": [
                {
                    "identity": e.identity.name.lower(),
                    "role": e.role.value,
                    "movement": e.movement.value,
                }
                for e in self.entities
            ],
            "manual": {
                "texts": self.manual.texts,
                "truths": [
                    [d.truth[0].name.lower(), d.truth[1].value, d.truth[2].value]
                    for d in self.manual.descriptions
                ],
                "channel_map": list(self.manual.channel_map),
            },
            "trajectory": {
                "states": states,
                "actions": [int(a) for a in self.trajectory.actions],
                "rewards": self.trajectory.rewards,
                "dones": [bool(d) for d in self.trajectory.dones],
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        entities = tuple(
            EntitySpec(
                identity=Identity[e["identity"].upper()],
                role=Role(e["role"]),
                movement=Movement(e["movement"]),
            )
            for e in obj["entities"]
        )
        descriptions = tuple(
            Description(
                text=text,
                truth=(
                    Identity[truth[0].upper()],
                    Movement(truth[1]),
                    Role(truth[2]),
                ),
            )
            for text, truth in zip(obj["manual"]["texts"], obj["manual"]["truths"])
        )
        manual = Manual(
            descriptions=descriptions,  # type: ignore[arg-type]
            channel_map=tuple(obj["manual"]["channel_map"]),  # type: ignore[arg-type]
        )
        traj = obj["trajectory"]
        states = []
        for t, chans in enumerate(traj["states"]):
            positions, idents = [], []
            for chan in chans:
                if chan is None:
                    positions.append(None)
                    idents.append(Identity.NONE)
                else:
                    positions.append((chan[1], chan[2]))
                    idents.append(Identity(chan[0]))
            states.append(
                GridState(
                    positions=tuple(positions),
                    identities=tuple(idents),
                    has_message=idents[0] == Identity.PLAYER_WITH_MESSAGE,
                    step_count=t,
                )
            )
        trajectory = Trajectory(
            states=states,
            actions=[Action(a) for a in traj["actions"]],
            rewards=[float(r) for r in traj["rewards"]],
            dones=[bool(d) for d in traj["dones"]],
        )
        return cls(
            game_id=obj["game_id"],
            split=obj["split"],
            policy=PolicyKind(obj["policy"]),
            seed=int(obj["seed"]),
            config_index=int(obj["config_index"]),
            entities=entities,  # type: ignore[arg-type]
            manual=manual,
            trajectory=trajectory,
        )


def write_records(
    path: str | Path,
    split: str,
    records: Iterable[DatasetRecord],
    extra_meta: Optional[dict] = None,
) -> int:
    """Stream records to a gzip NDJSON file; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    header = {"schema": SCHEMA_VERSION, "split": split}
    header.update(extra_meta or {})
    with gzip.open(path, "wt", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for record in records:
            fh.write(json.dumps(record.to_json()) + "\n")
            count += 1
    return count


def read_records(path: str | Path) -> Iterator[DatasetRecord]:
    """Stream records back; malformed input raises with byte offset."""
    path = Path(path)
    offset = 0
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CorpusFormatError(f"{path}: empty corpus file")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(
                f"{path}: bad header at byte {offset}: {e}"
            ) from e
        if header.get("schema") != SCHEMA_VERSION:
            raise CorpusFormatError(
                f"{path}: schema {header.get('schema')!r} != {SCHEMA_VERSION!r}"
            )
        offset += len(header_line.encode())
        for line in fh:
            try:
                yield DatasetRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise CorpusFormatError(
                    f"{path}: bad record at byte {offset}: {e}"
                ) from e
            offset += len(line.encode())


def load_split(path: str | Path) -> list[DatasetRecord]:
    return list(read_records(path))


def _record_seeds(seed: int, split_idx: int, game_idx: int, k: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([seed, split_idx, game_idx, k])
    roll_seed, manual_seed = (int(x) for x in ss.generate_state(2))
    return roll_seed, manual_seed


def make_record(
    game: Game,
    split: str,
    policy: PolicyKind,
    roll_seed: int,
    manual_seed: int,
    max_len: int = 32,
    banks: Optional[SynonymBank] = None,
) -> DatasetRecord:
    config_index = int(np.random.default_rng(roll_seed).integers(24))
    params = EnvParams(entities=game.entities, config_index=config_index)
    manual = render_manual(params, manual_seed, banks)
    trajectory = rollout(params, policy, roll_seed, max_len=max_len)
    return DatasetRecord(
        game_id=game.game_id,
        split=split,
        policy=policy,
        seed=roll_seed,
        config_index=config_index,
        entities=game.entities,
        manual=manual,
        trajectory=trajectory,
    )


def generate_dataset(
    universe: GameUniverse,
    out_dir: str | Path,
    train_per_game: int = 66,
    eval_per_game: int = 5,
    seed: int = 0,
    max_len: int = 32,
    banks: Optional[SynonymBank] = None,
) -> dict[str, Path]:
    """Emit one corpus file per split plus the universe description.

    Training trajectories draw a uniformly random policy each; evaluation
    splits cycle through every policy so each game contributes
    eval_per_game trajectories covering all five.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    banks = banks or default_banks()
    policies = list(PolicyKind)
    paths: dict[str, Path] = {}

    for split_idx, split in enumerate(ALL_SPLITS):
        games = universe.splits[split]
        per_game = train_per_game if split == TRAIN else eval_per_game
        policy_rng = np.random.default_rng([seed, split_idx])

        def records() -> Iterator[DatasetRecord]:
            for game_idx, game in enumerate(games):
                for k in range(per_game):
                    if split == TRAIN:
                        policy = policies[int(policy_rng.integers(5))]
                    else:
                        policy = policies[k % 5]
                    roll_seed, manual_seed = _record_seeds(
                        seed, split_idx, game_idx, k
                    )
                    yield make_record(
                        game, split, policy, roll_seed, manual_seed, max_len, banks
                    )

        path = out_dir / f"{split}.ndjson.gz"
        try:
            write_records(
                path,
                split,
                records(),
                extra_meta={
                    "universe_seed": universe.seed,
                    "generation_seed": seed,
                    "games": len(games),
                    "trajectories_per_game": per_game,
                    "max_len": max_len,
                },
            )
        except OSError as e:
            raise CorpusFormatError(f"writing {path} failed: {e}") from e
        paths[split] = path

    universe.save(out_dir / "universe.json")
    return paths
