import json

import numpy as np
import pytest
import torch

from courierlab.corpus import make_record
from courierlab.model import ModelSpec, WorldModel
from courierlab.pipeline import WordVocab, collate, model_kwargs, prepare_records
from courierlab.policies import PolicyKind
from courierlab.splits import desk_universe
from courierlab.training import (
    TrainConfig,
    TrainingDiverged,
    evaluate_ce,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def word_vocab():
    return WordVocab.from_banks()


@pytest.fixture(scope="module")
def tiny_corpus():
    universe = desk_universe(seed=4)
    games = universe.splits["train"]
    kinds = list(PolicyKind)
    train_recs = [
        make_record(games[i % len(games)], "train", kinds[i % 5], i, 10_000 + i, max_len=8)
        for i in range(32)
    ]
    dev_recs = [
        make_record(g, "dev_newall", kinds[i % 5], 500 + i, 20_000 + i, max_len=8)
        for i, g in enumerate(universe.splits["dev_newall"][:6])
    ]
    return train_recs, dev_recs


def desk_spec(word_vocab, variant="emma", seed=0):
    return ModelSpec.desk(
        variant, word_vocab_size=len(word_vocab), max_words=16, seed=seed
    )


class TestTrainLoop:
    def test_zero_steps_returns_init_policy_unchanged(self, tiny_corpus, word_vocab, tmp_path):
        train_recs, dev_recs = tiny_corpus
        spec = desk_spec(word_vocab)
        cfg = TrainConfig(steps=1, eval_every=1, batch_size=4, eval_max_sequences=4)
        result = train(train_recs[:4], dev_recs, spec, cfg, tmp_path)
        assert result.checkpoint_path.exists()
        assert result.manifest_path.exists()

    def test_deterministic_loss_curve(self, tiny_corpus, word_vocab, tmp_path):
        train_recs, dev_recs = tiny_corpus
        spec = desk_spec(word_vocab)
        cfg = TrainConfig(
            steps=12, eval_every=6, batch_size=4, eval_max_sequences=4, log_every=1, seed=7
        )
        a = train(train_recs, dev_recs, spec, cfg, tmp_path / "a")
        b = train(train_recs, dev_recs, spec, cfg, tmp_path / "b")
        assert a.manifest["train_loss"] == b.manifest["train_loss"]
        assert a.manifest["dev_loss"] == b.manifest["dev_loss"]

    @pytest.mark.slow
    def test_overfit_small_corpus(self, tiny_corpus, word_vocab, tmp_path):
        # 32 trajectories, 500 steps: training loss sinks below 0.05
        train_recs, dev_recs = tiny_corpus
        spec = desk_spec(word_vocab)
        cfg = TrainConfig(
            steps=500, eval_every=500, batch_size=32, eval_max_sequences=8, log_every=10
        )
        result = train(train_recs, dev_recs, spec, cfg, tmp_path)
        final_losses = [v for _, v in result.manifest["train_loss"][-3:]]
        assert min(final_losses) < 0.05, final_losses

    def test_divergence_aborts_with_diagnostics(self, tiny_corpus, word_vocab, tmp_path):
        train_recs, dev_recs = tiny_corpus
        spec = desk_spec(word_vocab)
        cfg = TrainConfig(steps=30, eval_every=30, batch_size=4, lr=1e18, log_every=1)
        with pytest.raises(TrainingDiverged):
            train(train_recs, dev_recs, spec, cfg, tmp_path)

    def test_paper_preset_manifest_echo(self, tiny_corpus, word_vocab, tmp_path):
        train_recs, dev_recs = tiny_corpus
        spec = ModelSpec.paper(
            "emma", word_vocab_size=len(word_vocab), max_words=16, seed=0
        )
        cfg = TrainConfig.paper(seed=0)
        cfg.steps = 1
        cfg.eval_every = 1
        cfg.eval_max_sequences = 2
        result = train(train_recs[:4], dev_recs[:2], spec, cfg, tmp_path)
        m = result.manifest
        assert m["optimizer"] == "AdamW"
        assert m["learning_rate"] == 1e-4
        assert m["batch_size"] == 32
        assert m["max_gradient_norm"] == 10.0
        assert m["hidden_size"] == 256
        assert m["encoder_layers"] == 4
        assert m["decoder_layers"] == 4
        assert m["decoder_token_blocks"] == 33
        assert m["dropout"] == 0.1


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tiny_corpus, word_vocab, tmp_path):
        train_recs, _ = tiny_corpus
        spec = desk_spec(word_vocab, seed=5)
        model = WorldModel(spec).eval()
        path = save_checkpoint(tmp_path / "m.ckpt", model, word_vocab, step=3)
        loaded, vocab2, payload = load_checkpoint(path)
        assert payload["step"] == 3
        assert vocab2.words == word_vocab.words
        prepared = prepare_records(train_recs[:3], spec, word_vocab)
        batch = collate(prepared)
        with torch.no_grad():
            a = model(batch["tokens"], **model_kwargs(batch))
            b = loaded(batch["tokens"], **model_kwargs(batch))
        assert torch.equal(a, b)

    def test_corrupted_hash_rejected(self, word_vocab, tmp_path):
        spec = desk_spec(word_vocab)
        model = WorldModel(spec)
        path = save_checkpoint(tmp_path / "m.ckpt", model, word_vocab)
        payload = torch.load(path, weights_only=False)
        payload["config_hash"] = "0" * 16
        torch.save(payload, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestEvaluateCe:
    def test_empty_split_rejected(self, word_vocab):
        spec = desk_spec(word_vocab)
        model = WorldModel(spec)
        with pytest.raises(ValueError):
            evaluate_ce(model, [])

    def test_identical_model_identical_loss(self, tiny_corpus, word_vocab):
        train_recs, _ = tiny_corpus
        spec = desk_spec(word_vocab)
        model = WorldModel(spec).eval()
        prepared = prepare_records(train_recs[:6], spec, word_vocab)
        assert evaluate_ce(model, prepared) == evaluate_ce(model, prepared)
