"""Record-to-tensor pipeline shared by training and evaluation.

Each record is prepared once into numpy arrays (token blocks, loss mask,
word ids, routing indices); batches collate by padding to the longest
sequence.  Hardroute parses are seeded by the record seed, so a record's
(possibly wrong) parsed identities are fixed across epochs like a cached
external parser output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import DatasetRecord
from .env import Identity
from .model import ModelSpec
from .text import Manual, SynonymBank, canonical_parse, default_banks, noisy_parse
from .tokens import DEFAULT_VOCAB, Vocab, encode_trajectory


class WordVocab:
    def __init__(self, words: list[str]):
        if words[0] != "<pad>":
            raise ValueError("word 0 must be <pad>")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(words)}

    @classmethod
    def from_banks(cls, banks: Optional[SynonymBank] = None) -> "WordVocab":
        return cls((banks or default_banks()).word_vocabulary())

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, length: int) -> tuple[np.ndarray, np.ndarray]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise KeyError(f"word {word!r} not in vocabulary")
            ids.append(self.index[word])
        if len(ids) > length:
            raise ValueError(f"description longer than {length} words")
        arr = np.zeros(length, dtype=np.int64)
        arr[: len(ids)] = ids
        mask = np.zeros(length, dtype=bool)
        mask[: len(ids)] = True
        return arr, mask


def parse_routes(
    manual: Manual,
    channel_identities: Sequence[Identity],
    per_desc_error: float,
    seed: int,
) -> np.ndarray:
    """Description index routed to each channel (-1 when unmatched).

    Channel 0 (player) is never routed.  Each description's identity is
    parsed once with the record-seeded noisy parser; a channel routes to
    the first description parsed to its identity.
    """
    rng = np.random.default_rng([seed, 0x9E37])
    parsed = [
        noisy_parse(d, per_desc_error, rng)[0] for d in manual.descriptions
    ]
    route = np.full(len(channel_identities), -1, dtype=np.int64)
    for c, ident in enumerate(channel_identities):
        if c == 0:
            continue
        for j, pid in enumerate(parsed):
            if pid == ident:
                route[c] = j
                break
    return route


def oracle_routes(
    manual: Manual, channel_identities: Sequence[Identity]
) -> np.ndarray:
    route = np.full(len(channel_identities), -1, dtype=np.int64)
    for c, ident in enumerate(channel_identities):
        if c == 0:
            continue
        for j, d in enumerate(manual.descriptions):
            if d.truth[0] == ident:
                route[c] = j
                break
    return route


@dataclass
class PreparedRecord:
    tokens: np.ndarray  # (T, 15)
    loss_mask: np.ndarray  # (T, 15)
    word_ids: np.ndarray  # (3, L)
    word_mask: np.ndarray  # (3, L)
    route: np.ndarray  # (channels,)

    @property
    def num_blocks(self) -> int:
        return int(self.tokens.shape[0])


def prepare_record(
    record: DatasetRecord,
    spec: ModelSpec,
    word_vocab: WordVocab,
    vocab: Vocab = DEFAULT_VOCAB,
) -> PreparedRecord:
    seq = encode_trajectory(record.trajectory, vocab)
    manual = record.manual
    channel_identities = [Identity.PLAYER] + [
        e.identity for e in record.entities
    ]
    if spec.variant == "oracleparse":
        texts = [canonical_parse(d) for d in manual.descriptions]
        route = oracle_routes(manual, channel_identities)
    elif spec.variant == "hardroute":
        texts = manual.texts
        route = parse_routes(
            manual, channel_identities, spec.per_desc_error, record.seed
        )
    else:
        texts = manual.texts
        route = np.full(len(channel_identities), -1, dtype=np.int64)
    word_rows = [word_vocab.encode(t, spec.max_words) for t in texts]
    return PreparedRecord(
        tokens=seq.blocks,
        loss_mask=seq.loss_mask,
        word_ids=np.stack([w for w, _ in word_rows]),
        word_mask=np.stack([m for _, m in word_rows]),
        route=route,
    )


def prepare_records(
    records: Sequence[DatasetRecord],
    spec: ModelSpec,
    word_vocab: WordVocab,
    vocab: Vocab = DEFAULT_VOCAB,
) -> list[PreparedRecord]:
    return [prepare_record(r, spec, word_vocab, vocab) for r in records]


def collate(
    prepared: Sequence[PreparedRecord], device: str = "cpu"
) -> dict[str, torch.Tensor]:
    """Pad to the longest sequence in the batch.

    Padding blocks are zero tokens with an all-False loss mask; they sit
    after every real token, so with causal attention they cannot affect
    scored positions.
    """
    t_max = max(p.num_blocks for p in prepared)
    b = len(prepared)
    k = prepared[0].tokens.shape[1]
    tokens = np.zeros((b, t_max, k), dtype=np.int64)
    mask = np.zeros((b, t_max, k), dtype=bool)
    blocks = np.zeros(b, dtype=np.int64)
    for i, p in enumerate(prepared):
        tokens[i, : p.num_blocks] = p.tokens
        mask[i, : p.num_blocks] = p.loss_mask
        blocks[i] = p.num_blocks
    word_ids = np.stack([p.word_ids for p in prepared])
    word_mask = np.stack([p.word_mask for p in prepared])
    route = np.stack([p.route for p in prepared])
    return {
        "tokens": torch.from_numpy(tokens).to(device),
        "loss_mask": torch.from_numpy(mask).to(device),
        "blocks": torch.from_numpy(blocks).to(device),
        "word_ids": torch.from_numpy(word_ids).to(device),
        "word_mask": torch.from_numpy(word_mask).to(device),
        "route": torch.from_numpy(route).to(device),
    }


def model_kwargs(batch: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {
        "word_ids": batch["word_ids"],
        "word_mask": batch["word_mask"],
        "route": batch["route"],
    }
