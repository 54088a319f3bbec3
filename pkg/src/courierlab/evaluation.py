"""Simulation-fidelity metrics and the oracle reference model.

Two model adapters share one interface: the trained transformer and an
oracle that reads the manual's hidden truths and enumerates the exact
transition distribution.  Metrics: teacher-forced cross entropy,
imagined rollouts (real actions injected, everything else sampled),
player-entity distance gaps, event precisions, and prefix-conditioned
loss curves.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from scipy import stats

from .corpus import DatasetRecord
from .env import (
    Action,
    GridState,
    Identity,
    Movement,
    Role,
    Trajectory,
    _apply_delta,
    _clamp_move,
    _entity_moves_now,
    _in_grid,
    manhattan,
)
from .model import WorldModel
from .pipeline import WordVocab, collate, model_kwargs, prepare_records
from .tokens import (
    ACTION_SLOT,
    BLOCK_TOKENS,
    DEFAULT_VOCAB,
    DONE_SLOT,
    REWARD_SLOT,
    Vocab,
    decode_sequence,
    encode_trajectory,
)

EVENT_KINDS = ("nonzero_reward", "termination")


@dataclass
class ImaginedTrajectory:
    trajectory: Trajectory
    source_index: int
    seed: int
    substitutions: int = 0

    def __len__(self) -> int:
        return len(self.trajectory)


@dataclass
class NllRow:
    """Per-target-token negative log likelihood for one record.

    nll[p] scores the token at flat position p+1; mask matches."""

    nll: np.ndarray
    mask: np.ndarray
    num_blocks: int


class SequenceModel(Protocol):
    name: str

    def nll_rows(self, records: Sequence[DatasetRecord]) -> list[NllRow]: ...

    def imagine_records(
        self, records: Sequence[DatasetRecord], seed: int
    ) -> list[ImaginedTrajectory]: ...


# ---------------------------------------------------------------------------
# trained-model adapter
# ---------------------------------------------------------------------------


class ModelAdapter:
    """Evaluation adapter around a trained WorldModel."""

    def __init__(
        self,
        model: WorldModel,
        word_vocab: WordVocab,
        name: Optional[str] = None,
        batch_size: int = 48,
    ):
        self.model = model.eval()
        self.word_vocab = word_vocab
        self.name = name or model.spec.variant
        self.batch_size = batch_size
        self.vocab = model.vocab

    @torch.no_grad()
    def nll_rows(self, records: Sequence[DatasetRecord]) -> list[NllRow]:
        prepared = prepare_records(records, self.model.spec, self.word_vocab)
        rows: list[NllRow] = []
        for i in range(0, len(prepared), self.batch_size):
            chunk = prepared[i : i + self.batch_size]
            batch = collate(chunk)
            logits = self.model(batch["tokens"], **model_kwargs(batch))
            b, s, v = logits.shape
            tokens = batch["tokens"].reshape(b, -1)
            losses = torch.nn.functional.cross_entropy(
                logits[:, :-1].reshape(-1, v),
                tokens[:, 1:].reshape(-1),
                reduction="none",
            ).view(b, s - 1)
            for j, p in enumerate(chunk):
                n = p.num_blocks * BLOCK_TOKENS
                rows.append(
                    NllRow(
                        nll=losses[j, : n - 1].numpy().astype(np.float64),
                        mask=p.loss_mask.reshape(-1).copy(),
                        num_blocks=p.num_blocks,
                    )
                )
        return rows

    @torch.no_grad()
    def imagine_records(
        self, records: Sequence[DatasetRecord], seed: int
    ) -> list[ImaginedTrajectory]:
        out: list[ImaginedTrajectory] = []
        for i in range(0, len(records), self.batch_size):
            out.extend(self._imagine_chunk(records[i : i + self.batch_size], seed, i))
        return out

    def _imagine_chunk(
        self, records: Sequence[DatasetRecord], seed: int, base_index: int
    ) -> list[ImaginedTrajectory]:
        spec = self.model.spec
        prepared = prepare_records(records, spec, self.word_vocab)
        b = len(prepared)
        real_tokens = [p.tokens for p in prepared]
        real_blocks = np.array([p.num_blocks for p in prepared])
        batch = collate(prepared)
        ctx = self.model.manual_context(
            batch["word_ids"], batch["word_mask"], batch["route"]
        )
        cache = self.model.start_cache(ctx, b)
        rngs = [
            np.random.default_rng([seed, records[i].seed]) for i in range(b)
        ]

        first = np.stack([rt[0] for rt in real_tokens])
        logits = self.model.extend(cache, torch.from_numpy(first))
        sampled: list[list[np.ndarray]] = [[rt[0].copy()] for rt in real_tokens]
        active = real_blocks > 1
        substitutions = [0] * b
        max_blocks = int(real_blocks.max())

        for t in range(1, max_blocks):
            if not active.any():
                break
            # inject the real action for every row (inactive rows feed a
            # stay action; their outputs are ignored)
            actions = np.array(
                [
                    real_tokens[i][t, ACTION_SLOT]
                    if t < real_blocks[i]
                    else self.vocab.action(Action.STAY)
                    for i in range(b)
                ],
                dtype=np.int64,
            )
            current = [np.zeros(BLOCK_TOKENS, dtype=np.int64) for _ in range(b)]
            for i in range(b):
                current[i][ACTION_SLOT] = actions[i]
            logits = self.model.extend(cache, torch.from_numpy(actions[:, None]))
            for slot in range(1, BLOCK_TOKENS):
                probs = torch.softmax(logits.double(), dim=-1).numpy()
                lo, hi = self.vocab.slot_range(slot)
                picks = np.zeros(b, dtype=np.int64)
                for i in range(b):
                    if active[i]:
                        p = probs[i] / probs[i].sum()
                        tok = int(rngs[i].choice(len(p), p=p))
                        if not lo <= tok < hi:
                            substitutions[i] += 1
                            tok = lo + int(np.argmax(p[lo:hi]))
                        picks[i] = tok
                        current[i][slot] = tok
                    else:
                        picks[i] = lo
                logits = self.model.extend(cache, torch.from_numpy(picks[:, None]))
            done_token = self.vocab.done(True)
            for i in range(b):
                if not active[i]:
                    continue
                sampled[i].append(current[i])
                if current[i][DONE_SLOT] == done_token or t + 1 >= real_blocks[i]:
                    active[i] = False

        out = []
        for i in range(b):
            blocks = np.stack(sampled[i])
            out.append(
                ImaginedTrajectory(
                    trajectory=decode_sequence(blocks, self.vocab),
                    source_index=base_index + i,
                    seed=seed,
                    substitutions=substitutions[i],
                )
            )
        return out


# ---------------------------------------------------------------------------
# oracle adapter: the true transition law, read off the manual
# ---------------------------------------------------------------------------


def _move_distribution(
    pos: tuple[int, int],
    movement: Movement,
    player_pos: tuple[int, int],
    tick: int,
    grid: int,
) -> list[tuple[tuple[int, int], float]]:
    if not _entity_moves_now(movement, tick):
        return [(pos, 1.0)]
    here = manhattan(pos, player_pos)
    options = []
    for action in Action:
        nxt = _apply_delta(pos, action)
        if _in_grid(nxt, grid):
            options.append((nxt, manhattan(nxt, player_pos)))
    if movement is Movement.CHASING:
        cells = [c for c, d in options if d < here] or [pos]
    else:
        cells = [c for c, d in options if d > here]
        if not cells:
            cells = [c for c, d in options if d >= here]
    p = 1.0 / len(cells)
    return [(c, p) for c in cells]


@dataclass
class _Outcome:
    tokens: np.ndarray  # slots 1..14 of the next block
    prob: float
    state: GridState


class OracleWorldModel:
    """Wraps the true simulator behind the sequence-model interface.

    Entity roles and movements are read from the manual's hidden truths
    (exact parsing and grounding); next-block token distributions come
    from exact enumeration of the joint entity-move outcomes,
    conditioned on the already-sampled slots of the block.
    """

    name = "oracle"

    def __init__(self, vocab: Vocab = DEFAULT_VOCAB):
        self.vocab = vocab

    # -- per-record transition machinery ---------------------------------

    @staticmethod
    def _channel_attrs(record: DatasetRecord) -> dict[int, tuple[Movement, Role]]:
        attrs = {}
        for desc, channel in zip(
            record.manual.descriptions, record.manual.channel_map
        ):
            _, movement, role = desc.truth
            attrs[channel] = (movement, role)
        return attrs

    def _outcomes(
        self,
        record: DatasetRecord,
        state: GridState,
        action: Action,
        tick: int,
    ) -> list[_Outcome]:
        attrs = self._channel_attrs(record)
        grid = state.grid_size
        player = _clamp_move(state.player_pos, action, grid)
        per_channel: list[list[tuple[Optional[tuple[int, int]], float]]] = []
        for c in range(1, 4):
            pos = state.positions[c]
            if pos is None:
                per_channel.append([(None, 1.0)])
            else:
                movement, _ = attrs[c]
                per_channel.append(
                    [(p, pr) for p, pr in _move_distribution(pos, movement, player, tick, grid)]
                )
        role_channel = {role: ch for ch, (_, role) in attrs.items()}
        outcomes = []
        for combo in itertools.product(*per_channel):
            prob = math.prod(pr for _, pr in combo)
            positions: list[Optional[tuple[int, int]]] = [player] + [
                p for p, _ in combo
            ]
            identities = list(state.identities)
            has_message = state.has_message
            reward, done = 0.0, False
            if positions[role_channel[Role.ENEMY]] == player:
                reward, done = -1.0, True
            elif positions[role_channel[Role.GOAL]] == player:
                reward, done = (1.0, True) if has_message else (-1.0, True)
            elif positions[role_channel[Role.MESSAGE]] == player:
                reward = 0.5
                has_message = True
                positions[role_channel[Role.MESSAGE]] = None
                identities[role_channel[Role.MESSAGE]] = Identity.NONE
                identities[0] = Identity.PLAYER_WITH_MESSAGE
            new_state = GridState(
                positions=tuple(positions),
                identities=tuple(identities),
                has_message=has_message,
                step_count=tick,
                grid_size=grid,
            )
            tokens = np.empty(BLOCK_TOKENS, dtype=np.int64)
            tokens[ACTION_SLOT] = self.vocab.action(action)
            for c in range(4):
                base = 1 + 3 * c
                if positions[c] is None:
                    tokens[base] = self.vocab.identity(Identity.NONE)
                    tokens[base + 1] = self.vocab.coord(0)
                    tokens[base + 2] = self.vocab.coord(0)
                else:
                    tokens[base] = self.vocab.identity(identities[c])
                    tokens[base + 1] = self.vocab.coord(positions[c][0])
                    tokens[base + 2] = self.vocab.coord(positions[c][1])
            tokens[REWARD_SLOT] = self.vocab.reward(reward)
            tokens[DONE_SLOT] = self.vocab.done(done)
            outcomes.append(_Outcome(tokens=tokens, prob=prob, state=new_state))
        return outcomes

    @staticmethod
    def _slot_distribution(
        outcomes: list[_Outcome], slot: int, prefix: np.ndarray
    ) -> dict[int, float]:
        """P(token at slot | sampled slots 1..slot-1 of this block)."""
        weights: dict[int, float] = {}
        total = 0.0
        for o in outcomes:
            if np.array_equal(o.tokens[1:slot], prefix[1:slot]):
                weights[int(o.tokens[slot])] = weights.get(int(o.tokens[slot]), 0.0) + o.prob
                total += o.prob
        return {t: w / total for t, w in weights.items()} if total else {}

    # -- interface --------------------------------------------------------

    def nll_rows(self, records: Sequence[DatasetRecord]) -> list[NllRow]:
        rows = []
        for record in records:
            seq = encode_trajectory(record.trajectory, self.vocab)
            blocks = seq.blocks
            t_total = blocks.shape[0]
            nll = np.zeros(t_total * BLOCK_TOKENS - 1, dtype=np.float64)
            state = record.trajectory.states[0]
            for t in range(1, t_total):
                action = record.trajectory.actions[t - 1]
                outcomes = self._outcomes(record, state, action, tick=t)
                real = blocks[t]
                for slot in range(1, BLOCK_TOKENS):
                    dist = self._slot_distribution(outcomes, slot, real)
                    p = dist.get(int(real[slot]), 0.0)
                    if p <= 0.0:
                        raise ValueError(
                            f"oracle assigns zero probability at block {t} "
                            f"slot {slot}; record seed {record.seed}"
                        )
                    nll[t * BLOCK_TOKENS + slot - 1] = -math.log(p)
                outcomes = [
                    o for o in outcomes if np.array_equal(o.tokens[1:], real[1:])
                ]
                state = outcomes[0].state
            rows.append(
                NllRow(
                    nll=nll, mask=seq.loss_mask.reshape(-1).copy(), num_blocks=t_total
                )
            )
        return rows

    def imagine_records(
        self, records: Sequence[DatasetRecord], seed: int
    ) -> list[ImaginedTrajectory]:
        out = []
        for idx, record in enumerate(records):
            rng = np.random.default_rng([seed, record.seed])
            seq = encode_trajectory(record.trajectory, self.vocab)
            sampled = [seq.blocks[0].copy()]
            state = record.trajectory.states[0]
            t_total = len(record.trajectory)
            for t in range(1, t_total):
                action = record.trajectory.actions[t - 1]
                outcomes = self._outcomes(record, state, action, tick=t)
                block = np.zeros(BLOCK_TOKENS, dtype=np.int64)
                block[ACTION_SLOT] = self.vocab.action(action)
                for slot in range(1, BLOCK_TOKENS):
                    dist = self._slot_distribution(outcomes, slot, block)
                    tokens = sorted(dist)
                    probs = np.array([dist[tk] for tk in tokens])
                    block[slot] = tokens[int(rng.choice(len(tokens), p=probs / probs.sum()))]
                outcomes = [
                    o for o in outcomes if np.array_equal(o.tokens[1:], block[1:])
                ]
                state = outcomes[0].state
                sampled.append(block)
                if block[DONE_SLOT] == self.vocab.done(True):
                    break
            out.append(
                ImaginedTrajectory(
                    trajectory=decode_sequence(np.stack(sampled), self.vocab),
                    source_index=idx,
                    seed=seed,
                )
            )
        return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def ce_eval(model: SequenceModel, records: Sequence[DatasetRecord]) -> float:
    """Masked mean CE per target token over the whole split."""
    if not records:
        raise ValueError("empty split")
    total, count = 0.0, 0
    for row in model.nll_rows(records):
        m = row.mask[1:]
        total += float(row.nll[m].sum())
        count += int(m.sum())
    return total / count


def prefix_loss_curve(
    model: SequenceModel,
    records: Sequence[DatasetRecord],
    prefix_lengths: Sequence[int],
) -> list[tuple[int, float]]:
    """Masked CE restricted to tokens after block k (ground truth fed).

    Points whose restriction leaves no scored tokens are omitted.
    """
    rows = model.nll_rows(records)
    curve = []
    for k in prefix_lengths:
        total, count = 0.0, 0
        for row in rows:
            mask = row.mask.copy().reshape(row.num_blocks, BLOCK_TOKENS)
            mask[: min(k, row.num_blocks)] = False
            m = mask.reshape(-1)[1:]
            total += float(row.nll[m].sum())
            count += int(m.sum())
        if count:
            curve.append((int(k), total / count))
    return curve


def _entity_distances(traj: Trajectory, channel: int, t_min: int) -> np.ndarray:
    """Player-to-channel distances over the first t_min blocks; absent
    entities fall back to their last known cell."""
    out = np.zeros(t_min, dtype=np.float64)
    last = None
    for t in range(t_min):
        state = traj.states[t]
        pos = state.positions[channel]
        if pos is None:
            pos = last
        if pos is None:
            raise ValueError(f"channel {channel} absent at t=0")
        last = pos
        out[t] = manhattan(state.player_pos, pos)
    return out


def delta_dist(real: Trajectory, imag: Trajectory, entity_channel: int) -> float:
    """Mean absolute gap between real and imagined player-entity
    distances over the shared prefix."""
    t_min = min(len(real), len(imag))
    dr = _entity_distances(real, entity_channel, t_min)
    di = _entity_distances(imag, entity_channel, t_min)
    return float(np.abs(dr - di).mean())


def event_precision(
    real: Trajectory, imag: Trajectory, kind: str
) -> Optional[float]:
    """Fraction of imagined events that align with a real event at the
    same step; None when nothing was imagined (excluded from means)."""
    if kind not in EVENT_KINDS:
        raise ValueError(f"kind must be one of {EVENT_KINDS}")
    t_min = min(len(real), len(imag))

    def events(traj: Trajectory) -> set[int]:
        if kind == "nonzero_reward":
            return {t for t in range(t_min) if traj.rewards[t] != 0.0}
        return {t for t in range(t_min) if traj.dones[t]}

    imagined = events(imag)
    if not imagined:
        return None
    return len(imagined & events(real)) / len(imagined)


@dataclass
class SplitImaginationMetrics:
    delta_dist_mean: float
    delta_dist_by_channel: dict[int, float]
    precision: dict[str, float]
    precision_pooled: dict[str, float]
    substitution_rate: float
    trajectories: int


def imagination_metrics(
    model: SequenceModel,
    records: Sequence[DatasetRecord],
    seed: int = 0,
) -> SplitImaginationMetrics:
    imagined = model.imagine_records(records, seed)
    deltas_by_channel: dict[int, list[float]] = {1: [], 2: [], 3: []}
    per_traj_precision: dict[str, list[float]] = {k: [] for k in EVENT_KINDS}
    pooled_hits = {k: 0 for k in EVENT_KINDS}
    pooled_events = {k: 0 for k in EVENT_KINDS}
    total_steps = 0
    total_subs = 0
    for record, img in zip(records, imagined):
        real = record.trajectory
        for channel in (1, 2, 3):
            deltas_by_channel[channel].append(
                delta_dist(real, img.trajectory, channel)
            )
        for kind in EVENT_KINDS:
            p = event_precision(real, img.trajectory, kind)
            if p is not None:
                per_traj_precision[kind].append(p)
            t_min = min(len(real), len(img.trajectory))
            if kind == "nonzero_reward":
                ev = [t for t in range(t_min) if img.trajectory.rewards[t] != 0.0]
                hits = sum(real.rewards[t] != 0.0 for t in ev)
            else:
                ev = [t for t in range(t_min) if img.trajectory.dones[t]]
                hits = sum(bool(real.dones[t]) for t in ev)
            pooled_hits[kind] += hits
            pooled_events[kind] += len(ev)
        total_steps += max(len(img.trajectory) - 1, 0) * (BLOCK_TOKENS - 1)
        total_subs += img.substitutions
    channel_means = {
        c: float(np.mean(v)) for c, v in deltas_by_channel.items()
    }
    return SplitImaginationMetrics(
        delta_dist_mean=float(np.mean(list(channel_means.values()))),
        delta_dist_by_channel=channel_means,
        precision={
            k: (float(np.mean(v)) if v else float("nan"))
            for k, v in per_traj_precision.items()
        },
        precision_pooled={
            k: (pooled_hits[k] / pooled_events[k] if pooled_events[k] else float("nan"))
            for k in EVENT_KINDS
        },
        substitution_rate=total_subs / max(total_steps, 1),
        trajectories=len(records),
    )


def t_interval(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and 95% t half-width over runs (requires >= 2 values)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("confidence interval needs >= 2 runs")
    mean = float(values.mean())
    sem = float(values.std(ddof=1) / math.sqrt(values.size))
    half = float(stats.t.ppf((1 + confidence) / 2, values.size - 1) * sem)
    return mean, half


@dataclass
class MetricReport:
    """One line per model x split x seed, plus t-interval aggregation."""

    rows: list[dict] = field(default_factory=list)

    def add(self, model: str, split: str, seed: int, metric: str, value: float) -> None:
        self.rows.append(
            {
                "model": model,
                "split": split,
                "seed": seed,
                "metric": metric,
                "value": float(value),
            }
        )

    def values(self, model: str, split: str, metric: str) -> list[float]:
        return [
            r["value"]
            for r in self.rows
            if r["model"] == model and r["split"] == split and r["metric"] == metric
        ]

    def aggregate(self, model: str, split: str, metric: str) -> tuple[float, float]:
        return t_interval(self.values(model, split, metric))

    def mean(self, model: str, split: str, metric: str) -> float:
        vals = self.values(model, split, metric)
        if not vals:
            raise KeyError((model, split, metric))
        return float(np.mean(vals))

    def to_jsonl(self) -> str:
        import json

        return "\n".join(json.dumps(r) for r in self.rows) + "\n"

    def table(self, metric: str) -> str:
        models = sorted({r["model"] for r in self.rows if r["metric"] == metric})
        splits = sorted({r["split"] for r in self.rows if r["metric"] == metric})
        lines = [f"# {metric}", "model\t" + "\t".join(splits)]
        for m in models:
            cells = []
            for s in splits:
                vals = self.values(m, s, metric)
                if len(vals) >= 2:
                    mean, half = t_interval(vals)
                    cells.append(f"{mean:.3f}±{half:.3f}")
                elif vals:
                    cells.append(f"{vals[0]:.3f}")
                else:
                    cells.append("-")
            lines.append(m + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"
