"""World-model training: AdamW, gradient clipping, dev-split checkpoint
selection, versioned checkpoints, and a human-readable run manifest."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import DatasetRecord
from .model import ModelSpec, WorldModel, masked_loss
from .pipeline import (
    PreparedRecord,
    WordVocab,
    collate,
    model_kwargs,
    prepare_records,
)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    eval_every: int = 150
    eval_max_sequences: int = 160
    seed: int = 0
    log_every: int = 50

    @classmethod
    def desk(cls, seed: int = 0, **kw) -> "TrainConfig":
        return cls(seed=seed, **kw)

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainConfig":
        # Table-7 regime: lr 1e-4, batch 32, 100K batches, eval every 500
        return cls(
            steps=100_000,
            batch_size=32,
            lr=1e-4,
            eval_every=500,
            eval_max_sequences=512,
            seed=seed,
        )


@dataclass
class TrainResult:
    checkpoint_path: Path
    manifest_path: Path
    manifest: dict
    model: WorldModel


class BucketSampler:
    """Deterministic length-bucketed batch sampler: draws a bucket with
    probability proportional to its size, then a batch within it."""

    def __init__(
        self,
        prepared: Sequence[PreparedRecord],
        batch_size: int,
        rng: np.random.Generator,
        bucket_width: int = 6,
    ):
        self.batch_size = batch_size
        self.rng = rng
        buckets: dict[int, list[int]] = {}
        for i, p in enumerate(prepared):
            buckets.setdefault(p.num_blocks // bucket_width, []).append(i)
        self.buckets = [np.array(v) for v in buckets.values()]
        sizes = np.array([len(b) for b in self.buckets], dtype=np.float64)
        self.probs = sizes / sizes.sum()

    def draw(self) -> np.ndarray:
        bucket = self.buckets[int(self.rng.choice(len(self.buckets), p=self.probs))]
        take = min(self.batch_size, len(bucket))
        return bucket[self.rng.choice(len(bucket), size=take, replace=False)]


@torch.no_grad()
def evaluate_ce(
    model: WorldModel,
    prepared: Sequence[PreparedRecord],
    batch_size: int = 32,
    max_sequences: Optional[int] = None,
) -> float:
    """Global masked mean CE over the prepared sequences."""
    was_training = model.training
    model.eval()
    if max_sequences is not None:
        prepared = prepared[:max_sequences]
    total, count = 0.0, 0
    for i in range(0, len(prepared), batch_size):
        batch = collate(prepared[i : i + batch_size])
        logits = model(batch["tokens"], **model_kwargs(batch))
        b, s, v = logits.shape
        tokens = batch["tokens"].reshape(b, -1)
        mask = batch["loss_mask"].reshape(b, -1)[:, 1:]
        losses = torch.nn.functional.cross_entropy(
            logits[:, :-1].reshape(-1, v),
            tokens[:, 1:].reshape(-1),
            reduction="none",
        ).view(b, s - 1)
        total += float(losses[mask].sum())
        count += int(mask.sum())
    if was_training:
        model.train()
    if count == 0:
        raise ValueError("empty evaluation split")
    return total / count


def save_checkpoint(
    path: str | Path,
    model: WorldModel,
    word_vocab: WordVocab,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "config_hash": model.spec.config_hash(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "step": step,
        "words": word_vocab.words,
    }
    payload.update(extra or {})
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[WorldModel, WordVocab, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    spec = ModelSpec(**payload["spec"])
    if spec.config_hash() != payload["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    model = WorldModel(spec)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, WordVocab(payload["words"]), payload


def train(
    train_records: Sequence[DatasetRecord],
    dev_records: Sequence[DatasetRecord],
    spec: ModelSpec,
    cfg: TrainConfig,
    out_dir: str | Path,
    word_vocab: Optional[WordVocab] = None,
    run_name: Optional[str] = None,
    quiet: bool = True,
) -> TrainResult:
    """Train one world model; the saved checkpoint is the one with the
    best dev loss (periodic evaluation on the development split)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    word_vocab = word_vocab or WordVocab.from_banks()
    run_name = run_name or f"{spec.variant}-s{cfg.seed}"

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    model = WorldModel(spec)
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )

    prepared_train = prepare_records(train_records, spec, word_vocab)
    prepared_dev = prepare_records(dev_records, spec, word_vocab)
    sampler = BucketSampler(prepared_train, cfg.batch_size, rng)

    loss_log: list[tuple[int, float]] = []
    dev_log: list[tuple[int, float]] = []
    best_dev = float("inf")
    best_state: Optional[dict] = None
    best_step = 0
    t0 = time.time()

    for step_num in range(1, cfg.steps + 1):
        idx = sampler.draw()
        batch = collate([prepared_train[int(i)] for i in idx])
        logits = model(batch["tokens"], **model_kwargs(batch))
        loss = masked_loss(logits, batch["tokens"], batch["loss_mask"])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"{run_name}: loss became {value} at step {step_num}; "
                f"recent losses: {[round(v, 4) for _, v in loss_log[-5:]]}"
            )
        if step_num % cfg.log_every == 0 or step_num == 1:
            loss_log.append((step_num, value))
            if not quiet:
                print(f"[{run_name}] step {step_num} loss {value:.4f}")

        if step_num % cfg.eval_every == 0 or step_num == cfg.steps:
            dev_loss = evaluate_ce(
                model, prepared_dev, max_sequences=cfg.eval_max_sequences
            )
            dev_log.append((step_num, dev_loss))
            if dev_loss < best_dev:
                best_dev = dev_loss
                best_step = step_num
                best_state = copy.deepcopy(model.state_dict())
            if not quiet:
                print(f"[{run_name}] step {step_num} dev {dev_loss:.4f}")

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    ckpt_path = out_dir / f"{run_name}.ckpt"
    save_checkpoint(
        ckpt_path,
        model,
        word_vocab,
        optimizer=optimizer,
        step=best_step,
        extra={"dev_loss": best_dev},
    )
    manifest = {
        "run": run_name,
        "optimizer": "AdamW",
        "learning_rate": cfg.lr,
        "batch_size": cfg.batch_size,
        "max_gradient_norm": cfg.grad_clip,
        "weight_decay": cfg.weight_decay,
        "steps": cfg.steps,
        "eval_every": cfg.eval_every,
        "hidden_size": spec.d_model,
        "encoder_layers": spec.encoder_layers,
        "decoder_layers": spec.decoder_layers,
        "decoder_token_blocks": spec.context_blocks,
        "dropout": spec.dropout,
        "variant": spec.variant,
        "seed": cfg.seed,
        "config_hash": spec.config_hash(),
        "train_sequences": len(prepared_train),
        "dev_sequences": len(prepared_dev),
        "best_dev_loss": best_dev,
        "best_step": best_step,
        "wall_seconds": round(time.time() - t0, 2),
        "train_loss": loss_log,
        "dev_loss": dev_log,
    }
    manifest_path = out_dir / f"{run_name}.manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return TrainResult(
        checkpoint_path=ckpt_path,
        manifest_path=manifest_path,
        manifest=manifest,
        model=model,
    )
