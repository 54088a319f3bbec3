"""Compositional split construction for the game universe.

Training games see each identity only with its per-identity set of
"training" (role, movement) pairs; four held-out pairs per identity are
reserved for evaluation.  Three evaluation settings probe increasing
generalization difficulty:

  newcombo -- unseen identity triplet, per-identity pairs seen in training
  newattr  -- training triplet, every identity takes a held-out pair
  newall   -- unseen triplet and held-out pairs

"Seen" is always defined against the realized training set.  Every
(identity, role) and (identity, movement) value occurs in training; only
joint pairs are novel at evaluation time.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import GAME_IDENTITIES, EntitySpec, Identity, Movement, Role

Pair = tuple[Role, Movement]
Triplet = tuple[Identity, ...]  # sorted, length 3

TRAIN = "train"
EVAL_SETTINGS = ("newcombo", "newattr", "newall")
SECTIONS = ("dev", "test")
ALL_SPLITS = (TRAIN,) + tuple(
    f"{section}_{setting}" for section in SECTIONS for setting in EVAL_SETTINGS
)


class SplitConstructionError(ValueError):
    """Targets cannot be met by the reservation scheme."""


class SplitValidationError(AssertionError):
    """A generated universe violates a split constraint."""


@dataclass(frozen=True)
class Game:
    """One game: three entity specs in canonical (identity-sorted) order."""

    entities: tuple[EntitySpec, EntitySpec, EntitySpec]

    def __post_init__(self) -> None:
        idents = [e.identity for e in self.entities]
        if list(sorted(idents)) != idents:
            raise ValueError("entities must be sorted by identity")

    @property
    def triplet(self) -> Triplet:
        return tuple(e.identity for e in self.entities)

    @property
    def assignments(self) -> tuple[tuple[Identity, Pair], ...]:
        return tuple((e.identity, (e.role, e.movement)) for e in self.entities)

    @property
    def game_id(self) -> str:
        return "_".join(
            f"{e.identity.name.lower()}.{e.role.value[0]}{e.movement.value[0]}"
            for e in self.entities
        )


def make_game(assignment: dict[Identity, Pair]) -> Game:
    specs = tuple(
        EntitySpec(identity=i, role=assignment[i][0], movement=assignment[i][1])
        for i in sorted(assignment)
    )
    return Game(entities=specs)  # type: ignore[arg-type]


@dataclass
class SplitSizes:
    train_games: int
    eval_games: int  # per setting, per section (dev and test each)
    train_triplets: int

    @classmethod
    def desk(cls) -> "SplitSizes":
        return cls(train_games=120, eval_games=15, train_triplets=12)

    @classmethod
    def paper(cls) -> "SplitSizes":
        # Table-6-scale targets: 1536 train games and dev/test settings
        # of 896 / 204 / 856 games each
        return cls(train_games=1536, eval_games=0, train_triplets=90)


PAPER_EVAL_TARGETS = {"newcombo": 896, "newattr": 204, "newall": 856}


@dataclass
class GameUniverse:
    identities: tuple[Identity, ...]
    seed: int
    train_pairs: dict[Identity, frozenset[Pair]]
    holdout_pairs: dict[Identity, frozenset[Pair]]
    train_triplets: frozenset[Triplet]
    splits: dict[str, list[Game]] = field(default_factory=dict)

    @property
    def realized_train_triplets(self) -> frozenset[Triplet]:
        return frozenset(g.triplet for g in self.splits[TRAIN])

    @property
    def realized_train_pairs(self) -> dict[Identity, frozenset[Pair]]:
        out: dict[Identity, set[Pair]] = {i: set() for i in self.identities}
        for g in self.splits[TRAIN]:
            for ident, pair in g.assignments:
                out[ident].add(pair)
        return {i: frozenset(p) for i, p in out.items()}

    def games(self, split: str) -> list[Game]:
        return self.splits[split]

    def to_json(self) -> dict:
        return {
            "identities": [i.name.lower() for i in self.identities],
            "seed": self.seed,
            "train_pairs": {
                i.name.lower(): sorted((r.value, m.value) for r, m in pairs)
                for i, pairs in self.train_pairs.items()
            },
            "holdout_pairs": {
                i.name.lower(): sorted((r.value, m.value) for r, m in pairs)
                for i, pairs in self.holdout_pairs.items()
            },
            "train_triplets": sorted(
                [sorted(i.name.lower() for i in t) for t in self.train_triplets]
            ),
            "splits": {
                name: [g.game_id for g in games]
                for name, games in self.splits.items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _all_pairs() -> list[Pair]:
    return [(r, m) for r in Role for m in Movement]


def _choose_pair_sets(rng: np.random.Generator) -> tuple[frozenset[Pair], frozenset[Pair]]:
    """Training pairs (5) and held-out pairs (4) for one identity.

    Training pairs are a random role/movement diagonal plus two extras
    with distinct roles and movements, so training covers every role and
    movement value while the held-out set still touches every role and
    every movement.
    """
    movements = list(Movement)
    rng.shuffle(movements)
    diagonal = {(role, movements[k]) for k, role in enumerate(Role)}
    remaining = [p for p in _all_pairs() if p not in diagonal]
    while True:
        picks = rng.choice(len(remaining), size=2, replace=False)
        extras = [remaining[int(k)] for k in picks]
        if extras[0][0] != extras[1][0] and extras[0][1] != extras[1][1]:
            break
    train = frozenset(diagonal | set(extras))
    holdout = frozenset(p for p in remaining if p not in extras)
    return train, holdout


def _role_options(
    pairs: frozenset[Pair],
) -> dict[Role, list[Movement]]:
    out: dict[Role, list[Movement]] = {r: [] for r in Role}
    for role, movement in sorted(pairs, key=lambda p: (p[0].value, p[1].value)):
        out[role].append(movement)
    return out


def _enumerate_games(
    triplets: list[Triplet],
    pair_source: dict[Identity, frozenset[Pair]],
) -> list[Game]:
    """Every valid game over the triplets with the given pair sets."""
    games = []
    for triplet in triplets:
        options = {i: _role_options(pair_source[i]) for i in triplet}
        for perm in itertools.permutations(Role):
            pools = [options[i][r] for i, r in zip(triplet, perm)]
            if not all(pools):
                continue
            for moves in itertools.product(*pools):
                assignment = {
                    i: (r, m) for i, r, m in zip(triplet, perm, moves)
                }
                games.append(make_game(assignment))
    return games


def _fill_games(
    target: int,
    triplets: list[Triplet],
    pair_source: dict[Identity, frozenset[Pair]],
    rng: np.random.Generator,
    taken: set[str],
    what: str,
) -> list[Game]:
    """Sample target unique games uniformly from the full candidate set."""
    candidates = [
        g for g in _enumerate_games(triplets, pair_source) if g.game_id not in taken
    ]
    if len(candidates) < target:
        raise SplitConstructionError(
            f"cannot reach {target} unique {what} games "
            f"(capacity is {len(candidates)})"
        )
    order = rng.permutation(len(candidates))
    games = [candidates[int(k)] for k in order[:target]]
    taken.update(g.game_id for g in games)
    return games


def build_splits(
    identities: list[Identity] | tuple[Identity, ...],
    seed: int,
    sizes: SplitSizes | None = None,
    eval_targets: dict[str, int] | None = None,
) -> GameUniverse:
    """Construct the universe: reservations, triplets, and all game sets.

    eval_targets overrides the per-setting evaluation game count (used
    for paper-scale Table-6 targets); otherwise sizes.eval_games applies
    to every setting.
    """
    identities = tuple(identities)
    if len(identities) < 4:
        raise SplitConstructionError("need at least 4 identities")
    if len(set(identities)) != len(identities):
        raise SplitConstructionError("identities must be distinct")
    sizes = sizes or SplitSizes.desk()
    targets = eval_targets or {s: sizes.eval_games for s in EVAL_SETTINGS}

    rng = np.random.default_rng(seed)
    train_pairs: dict[Identity, frozenset[Pair]] = {}
    holdout_pairs: dict[Identity, frozenset[Pair]] = {}
    for ident in identities:
        train_pairs[ident], holdout_pairs[ident] = _choose_pair_sets(rng)

    all_triplets = [
        tuple(sorted(t)) for t in itertools.combinations(identities, 3)
    ]
    if sizes.train_triplets >= len(all_triplets):
        raise SplitConstructionError(
            "train_triplets must leave triplets for evaluation"
        )
    for _ in range(200):
        order = rng.permutation(len(all_triplets))
        train_triplets = [all_triplets[int(k)] for k in order[: sizes.train_triplets]]
        covered = {i for t in train_triplets for i in t}
        if covered == set(identities):
            break
    else:  # pragma: no cover - tiny probability with sane sizes
        raise SplitConstructionError("could not cover all identities in training")
    eval_triplets = [all_triplets[int(k)] for k in order[sizes.train_triplets :]]

    taken: set[str] = set()
    train_games: list[Game] = []

    # coverage pass: every identity realizes each of its diagonal-and-extra
    # pairs at least once if possible, guaranteeing value coverage
    triplets_for = {
        i: [t for t in train_triplets if i in t] for i in identities
    }
    for ident in identities:
        for pair in sorted(train_pairs[ident], key=lambda p: (p[0].value, p[1].value)):
            placed = False
            for _ in range(60):
                cand = triplets_for[ident]
                triplet = cand[int(rng.integers(len(cand)))]
                others = [i for i in triplet if i != ident]
                other_roles = [r for r in Role if r != pair[0]]
                rng.shuffle(other_roles)
                assignment = {ident: pair}
                ok = True
                for o, role in zip(others, other_roles):
                    moves = _role_options(train_pairs[o])[role]
                    if not moves:
                        ok = False
                        break
                    assignment[o] = (role, moves[int(rng.integers(len(moves)))])
                if not ok:
                    continue
                game = make_game(assignment)
                if game.game_id not in taken:
                    taken.add(game.game_id)
                    train_games.append(game)
                placed = True
                break
            if not placed:
                raise SplitConstructionError(
                    f"cannot realize training pair {pair} for {ident.name}"
                )
    if len(train_games) > sizes.train_games:
        raise SplitConstructionError(
            f"train_games target {sizes.train_games} below coverage minimum "
            f"{len(train_games)}"
        )
    train_games += _fill_games(
        sizes.train_games - len(train_games),
        train_triplets,
        train_pairs,
        rng,
        taken,
        TRAIN,
    )

    universe = GameUniverse(
        identities=identities,
        seed=seed,
        train_pairs=train_pairs,
        holdout_pairs=holdout_pairs,
        train_triplets=frozenset(train_triplets),
        splits={TRAIN: train_games},
    )

    realized_pairs = universe.realized_train_pairs
    realized_triplets = sorted(universe.realized_train_triplets)

    source_by_setting = {
        "newcombo": (eval_triplets, realized_pairs),
        "newattr": (realized_triplets, holdout_pairs),
        "newall": (eval_triplets, holdout_pairs),
    }
    for setting in EVAL_SETTINGS:
        triplets, pair_source = source_by_setting[setting]
        games = _fill_games(
            2 * targets[setting], list(triplets), pair_source, rng, taken, setting
        )
        universe.splits[f"dev_{setting}"] = games[: targets[setting]]
        universe.splits[f"test_{setting}"] = games[targets[setting] :]
    return universe


def validate_splits(universe: GameUniverse) -> None:
    """Machine-check every split constraint; raises on violation."""

    def check(cond: bool, message: str) -> None:
        if not cond:
            raise SplitValidationError(message)

    all_ids: set[str] = set()
    for name in ALL_SPLITS:
        check(name in universe.splits, f"missing split {name}")
        for game in universe.splits[name]:
            check(game.game_id not in all_ids, f"game {game.game_id} in two splits")
            all_ids.add(game.game_id)
            roles = {e.role for e in game.entities}
            check(roles == set(Role), f"{game.game_id}: roles not a permutation")
            check(
                len({e.identity for e in game.entities}) == 3,
                f"{game.game_id}: identities not distinct",
            )

    realized_pairs = universe.realized_train_pairs
    realized_triplets = universe.realized_train_triplets

    for ident in universe.identities:
        seen_roles = {r for r, _ in realized_pairs[ident]}
        seen_moves = {m for _, m in realized_pairs[ident]}
        check(
            seen_roles == set(Role),
            f"{ident.name}: some role value never seen in training",
        )
        check(
            seen_moves == set(Movement),
            f"{ident.name}: some movement value never seen in training",
        )
        overlap = realized_pairs[ident] & universe.holdout_pairs[ident]
        check(not overlap, f"{ident.name}: held-out pair {overlap} used in training")
        check(
            len(universe.holdout_pairs[ident]) >= 4
            and len(set(_all_pairs()) - set(realized_pairs[ident])) >= 4,
            f"{ident.name}: fewer than 4 pairs absent from training",
        )

    for name, games in universe.splits.items():
        if name == TRAIN:
            for game in games:
                check(
                    game.triplet in universe.train_triplets,
                    f"{game.game_id}: train game outside declared triplets",
                )
                for ident, pair in game.assignments:
                    check(
                        pair in universe.train_pairs[ident],
                        f"{game.game_id}: {ident.name} uses a non-training pair",
                    )
            continue
        setting = name.split("_", 1)[1]
        for game in games:
            if setting == "newcombo":
                check(
                    game.triplet not in realized_triplets,
                    f"{game.game_id}: newcombo triplet seen in training",
                )
                for ident, pair in game.assignments:
                    check(
                        pair in realized_pairs[ident],
                        f"{game.game_id}: newcombo pair unseen for {ident.name}",
                    )
            elif setting == "newattr":
                check(
                    game.triplet in realized_triplets,
                    f"{game.game_id}: newattr triplet not a training triplet",
                )
                for ident, pair in game.assignments:
                    check(
                        pair not in realized_pairs[ident],
                        f"{game.game_id}: newattr pair seen for {ident.name}",
                    )
            elif setting == "newall":
                check(
                    game.triplet not in realized_triplets,
                    f"{game.game_id}: newall triplet seen in training",
                )
                for ident, pair in game.assignments:
                    check(
                        pair not in realized_pairs[ident],
                        f"{game.game_id}: newall pair seen for {ident.name}",
                    )

    for setting in EVAL_SETTINGS:
        dev = {g.game_id for g in universe.splits[f"dev_{setting}"]}
        test = {g.game_id for g in universe.splits[f"test_{setting}"]}
        check(not dev & test, f"{setting}: dev and test share games")


def desk_universe(seed: int = 0) -> GameUniverse:
    return build_splits(GAME_IDENTITIES[:6], seed, SplitSizes.desk())


def paper_universe(seed: int = 0) -> GameUniverse:
    return build_splits(
        GAME_IDENTITIES, seed, SplitSizes.paper(), eval_targets=PAPER_EVAL_TARGETS
    )
