import csv
import os
import string

import numpy as np
import pytest

from cemat.data.corpus import SPECIAL_TOKENS, CorpusKind, CorpusManifest, ManifestEntry
from cemat.data.lexicon import Lexicon, load_lexicon_directory
from cemat.data.masking import MaskingPolicy
from cemat.data.toy import ToyTaskConfig, make_toy_task
from cemat.data.vocab import EOS_ID, MASK_ID, PAD_ID, BalancingPolicy, Vocabulary, learn_vocab
from cemat.errors import DataError, UsageError
from cemat.model.transformer import ModelConfig, Transformer
from cemat.tensor.core import Tensor, backward
from cemat.training.batching import PairBatch, PairSource, PretrainSource, load_pairs
from cemat.training.checkpoint import load_checkpoint, resolve_checkpoint, save_checkpoint
from cemat.training.objectives import (
    ATObjective,
    NATObjective,
    Objective,
    PretrainObjective,
    at_inputs,
    length_offset_label,
    nat_inputs,
    nat_mask_positions,
    pretrain_inputs,
    pretrain_loss,
)
from cemat.training.optim import Adam, lr_schedule
from cemat.training.trainer import TrainConfig, Trainer


@pytest.fixture(scope="module")
def arrange_task(tmp_path_factory):
    directory = tmp_path_factory.mktemp("task")
    manifest = make_toy_task(str(directory), ToyTaskConfig(bilingual=40, monolingual=20, finetune=12, test=6))
    vocab = learn_vocab(manifest, target_size=200, seed=1)
    lexicon = load_lexicon_directory(str(directory / "dict"))
    return manifest, vocab, lexicon


@pytest.fixture(scope="function")
def arrange_model(arrange_task):
    _, vocab, _ = arrange_task
    config = ModelConfig(
        vocab_size=len(vocab), enc_layers=1, dec_layers=1, model_dim=16, heads=2, ffn_dim=32, length_offsets=4
    )
    return Transformer.init(config, np.random.default_rng(0))


@pytest.fixture(scope="function")
def arrange_source(arrange_task):
    manifest, vocab, lexicon = arrange_task
    return PretrainSource(manifest, vocab, lexicon, MaskingPolicy(), BalancingPolicy(), "both", seed=3)


def small_config(**changes):
    values = dict(
        lr_peak=1e-3, warmup_steps=1, total_steps=4, batch_tokens=120, checkpoint_every=100, log_every=1, seed=5
    )
    values.update(changes)
    return TrainConfig(**values)


@pytest.mark.unit
@pytest.mark.training
class ObjectiveTests:
    def test_pretraining_loss_mixes_both_heads(self, arrange_model, arrange_source):
        inputs = pretrain_inputs(arrange_source.batch(0, 200))
        output = pretrain_loss(arrange_model, inputs, lam=0.7)
        expected = 0.7 * output.components["cmlm"] + 0.3 * output.components["mlm"]
        assert output.loss.item() == pytest.approx(expected, rel=1e-5)

    def test_lambda_zero_leaves_decoder_untouched(self, arrange_model, arrange_source):
        inputs = pretrain_inputs(arrange_source.batch(0, 200))
        backward(pretrain_loss(arrange_model, inputs, lam=0.0).loss)
        assert np.all(arrange_model.params["cmlm.bias"].grad == 0)
        assert np.all(arrange_model.params["dec.0.ffn.w1"].grad == 0)
        assert np.any(arrange_model.params["mlm.bias"].grad != 0)

    def test_lambda_one_leaves_encoder_head_untouched(self, arrange_model, arrange_source):
        inputs = pretrain_inputs(arrange_source.batch(0, 200))
        backward(pretrain_loss(arrange_model, inputs, lam=1.0).loss)
        assert np.all(arrange_model.params["mlm.bias"].grad == 0)
        assert np.any(arrange_model.params["cmlm.bias"].grad != 0)

    def test_objective_factory(self):
        assert isinstance(Objective("pretrain", lam=0.5), PretrainObjective)
        assert isinstance(Objective("at", label_smoothing=0.2), ATObjective)
        assert isinstance(Objective("nat", length_loss_weight=0.1), NATObjective)
        with pytest.raises(UsageError, match="Invalid objective"):
            Objective("mt")

    def test_lambda_must_be_a_weight(self):
        with pytest.raises(UsageError):
            Objective("pretrain", lam=1.5)

    def test_teacher_forcing_inputs(self):
        inputs = at_inputs(PairBatch(src=[[6, 10, 11]], tgt=[[7, 20, 21, 22]]))
        assert inputs.tgt_ids.tolist() == [[7, 20, 21, 22]]
        assert inputs.tgt_labels.tolist() == [20, 21, 22, EOS_ID]

    def test_nat_masks_between_one_and_all_words(self):
        rng = np.random.default_rng(0)
        batch = PairBatch(src=[[6, 10, 11]], tgt=[[7, 20, 21, 22, 23]])
        for _ in range(200):
            inputs = nat_inputs(batch, rng, offsets=4)
            masked = (inputs.tgt_ids == MASK_ID).sum()
            assert 1 <= masked <= 4
            assert inputs.tgt_ids[0, 0] == 7
            assert inputs.length_labels.tolist() == [4 + 2]

    def test_nat_masked_fraction_averages_half_plus(self):
        rng = np.random.default_rng(1)
        n = 10
        fractions = [len(nat_mask_positions(n, rng)) / n for _ in range(20000)]
        assert np.mean(fractions) == pytest.approx((n + 1) / (2 * n), abs=0.01)

    @pytest.mark.parametrize("src,tgt,label", [(5, 5, 20), (5, 8, 23), (5, 100, 40), (100, 5, 0)])
    def test_length_offsets_are_clipped(self, src, tgt, label):
        assert length_offset_label(src, tgt, 20) == label

    def test_accumulated_gradients_match_one_batch(self, arrange_model):
        src = [[6, 10, 11, 12], [6, 13], [6, 14, 15], [6, 16, 17, 18, 19]]
        tgt = [[7, 20, 21], [7, 22, 23, 24], [7, 25], [7, 26, 27]]
        objective = Objective("at", label_smoothing=0.2)
        combined = objective.prepare(PairBatch(src, tgt), None)
        backward(objective.loss(arrange_model, combined, False, None).loss)
        expected = {name: p.grad.copy() for name, p in arrange_model.params.items() if p.grad is not None}

        arrange_model.zero_grad()
        parts = [objective.prepare(PairBatch(src[:2], tgt[:2]), None), objective.prepare(PairBatch(src[2:], tgt[2:]), None)]
        totals = {"tgt": sum(p.counts["tgt"] for p in parts), "sentences": 4}
        for part in parts:
            backward(objective.loss(arrange_model, part, False, None, totals).loss)
        for name, grad in expected.items():
            assert np.allclose(arrange_model.params[name].grad, grad, atol=1e-6), name


@pytest.mark.unit
@pytest.mark.training
class OptimizerTests:
    @pytest.mark.parametrize(
        "step,expected",
        [(0, 0.0), (200, 2.5e-4), (400, 5e-4), (10200, 2.5e-4), (20000, 0.0), (25000, 0.0)],
    )
    def test_schedule(self, step, expected):
        assert lr_schedule(step, 5e-4, 400, 20000) == pytest.approx(expected)

    def test_schedule_without_warmup(self):
        assert lr_schedule(1, 1.0, 0, 10) == pytest.approx(0.9)

    def test_schedule_power(self):
        assert lr_schedule(15, 1.0, 10, 20, power=2.0) == pytest.approx(0.25)

    def test_first_adam_step(self):
        param = Tensor(np.zeros(3), requires_grad=True)
        param.grad = np.ones(3, dtype=np.float32)
        Adam(eps=1e-6).apply({"w": param}, lr=0.1)
        assert np.allclose(param.data, -0.1 / (1 + 1e-6))

    def test_zero_gradient_leaves_parameters(self):
        param = Tensor(np.arange(3.0), requires_grad=True)
        param.grad = np.zeros(3, dtype=np.float32)
        Adam().apply({"w": param}, lr=0.1)
        assert np.array_equal(param.data, np.arange(3.0))

    def test_non_finite_gradient_skips_update(self):
        param = Tensor(np.ones(2), requires_grad=True)
        param.grad = np.array([1.0, np.nan], dtype=np.float32)
        optimizer = Adam()
        assert not optimizer.apply({"w": param}, lr=0.1)
        assert optimizer.skipped == 1 and optimizer.step == 0
        assert np.array_equal(param.data, np.ones(2))

    def test_clipping_bounds_the_update_direction(self):
        param = Tensor(np.zeros(2), requires_grad=True)
        param.grad = np.array([300.0, 400.0], dtype=np.float32)
        optimizer = Adam(clip_norm=1.0)
        optimizer.apply({"w": param}, lr=0.1)
        assert np.allclose(optimizer.m["w"], [0.1 * 0.6, 0.1 * 0.8], atol=1e-6)

    def test_warmup_must_fit_the_run(self):
        with pytest.raises(UsageError):
            TrainConfig(warmup_steps=10, total_steps=10)


@pytest.mark.unit
@pytest.mark.training
class SourceTests:
    def test_batches_are_keyed_by_step(self, arrange_source):
        a = arrange_source.batch(3, 150)
        b = arrange_source.batch(3, 150)
        c = arrange_source.batch(4, 150)
        assert np.array_equal(a.src_ids, b.src_ids) and np.array_equal(a.tgt_labels, b.tgt_labels)
        assert not (a.src_ids.shape == c.src_ids.shape and np.array_equal(a.src_ids, c.src_ids))

    def test_batches_respect_token_budget(self, arrange_source):
        for step in range(10):
            batch = arrange_source.batch(step, 150)
            assert batch.size == 1 or max(batch.src_ids.shape[1], batch.tgt_ids.shape[1]) * batch.size <= 150
            assert batch.tgt_rows.size > 0

    def test_masked_rows_point_at_labels(self, arrange_source):
        batch = arrange_source.batch(0, 300)
        flat = batch.tgt_ids.reshape(-1)
        assert np.all(flat[batch.tgt_rows] != PAD_ID)
        assert np.all(batch.tgt_rows % batch.tgt_ids.shape[1] != 0)

    def test_monolingual_regime_reads_monolingual_corpora(self, arrange_task):
        manifest, vocab, lexicon = arrange_task
        source = PretrainSource(manifest, vocab, lexicon, MaskingPolicy(), regime="monolingual")
        assert source.names == sorted(e.name for e in manifest.select("train", CorpusKind.MONOLINGUAL))
        assert sum(source.weights) == pytest.approx(1.0)

    def test_unknown_regime_is_rejected(self, arrange_task):
        manifest, vocab, lexicon = arrange_task
        with pytest.raises(UsageError):
            PretrainSource(manifest, vocab, lexicon, MaskingPolicy(), regime="parallel")

    def test_load_pairs_swaps_reversed_direction(self, arrange_task):
        manifest, _, _ = arrange_task
        forward = load_pairs(manifest, "finetune", "en", "xa")
        backward_pairs = load_pairs(manifest, "finetune", "xa", "en")
        assert len(forward) == len(backward_pairs) == 12
        assert backward_pairs[0].src == forward[0].tgt

    def test_load_pairs_without_matches_raises(self, arrange_task):
        manifest, _, _ = arrange_task
        with pytest.raises(DataError, match="No bilingual"):
            load_pairs(manifest, "finetune", "en", "xb")

    def test_pair_batches_are_keyed_by_step(self, arrange_task):
        manifest, vocab, _ = arrange_task
        source = PairSource(load_pairs(manifest, "finetune", "en", "xa"), vocab, seed=2)
        assert source.batch(1, 80).src == source.batch(1, 80).src
        assert all(ids[0] == vocab.tag_id("en") for ids in source.batch(1, 80).src)


@pytest.fixture(scope="function")
def arrange_long_corpus(tmp_path):
    (tmp_path / "train.en-xa.en").write_text("abcdefghij abcdefghij abcdefghij\nab cd\n", encoding="utf-8")
    (tmp_path / "train.en-xa.xa").write_text("ab\nef\n", encoding="utf-8")
    (tmp_path / "mono.en").write_text("ab cd\n", encoding="utf-8")
    manifest = CorpusManifest(
        [
            ManifestEntry("train.en-xa.en", "en", "bilingual", 2, "train.en-xa.xa", "xa"),
            ManifestEntry("mono.en", "en", "monolingual", 1),
        ],
        str(tmp_path),
    )
    letters = list(string.ascii_lowercase)
    vocab = Vocabulary(list(SPECIAL_TOKENS) + ["[en]", "[xa]", "[xb]"] + letters + ["</w>"], [], ["en", "xa", "xb"])
    return manifest, vocab


@pytest.mark.unit
@pytest.mark.training
class LengthLimitTests:
    def test_pairs_are_limited_by_subwords(self, arrange_long_corpus):
        manifest, vocab = arrange_long_corpus
        source = PretrainSource(manifest, vocab, None, MaskingPolicy(), regime="bilingual", max_length=10)
        [pair] = source.corpora["train.en-xa"]
        assert pair.src.words == ("ab", "cd")

    def test_fine_tuning_pairs_are_limited_by_subwords(self, arrange_long_corpus):
        manifest, vocab = arrange_long_corpus
        pairs = load_pairs(manifest, "train", "en", "xa", max_length=10)
        assert len(pairs) == 2
        assert len(PairSource(pairs, vocab, max_length=10)) == 1
        with pytest.raises(DataError, match="within 2 subwords"):
            PairSource(pairs, vocab, max_length=2)

    def test_code_switching_never_exceeds_the_limit(self, arrange_long_corpus):
        manifest, vocab = arrange_long_corpus
        lexicon = Lexicon()
        lexicon.add("en", "xb", "ab", "abcdefghijklmnop")
        source = PretrainSource(manifest, vocab, lexicon, MaskingPolicy(), regime="monolingual", max_length=6)
        for step in range(20):
            example = source.example("train.en", 0, step)
            assert len(example.src_ids) <= 7 and len(example.tgt_ids) <= 7
            assert example.cs_words == 0
            example.check()


@pytest.mark.unit
@pytest.mark.training
class CheckpointTests:
    def test_round_trip(self, arrange_model, tmp_path):
        optimizer = Adam()
        for param in arrange_model.params.values():
            param.grad = np.full_like(param.data, 0.01)
        optimizer.apply(arrange_model.params, 1e-3)
        path = save_checkpoint(str(tmp_path), 7, arrange_model, optimizer, {"vocab_digest": "abc"})
        assert resolve_checkpoint(str(tmp_path)) == path
        checkpoint = load_checkpoint(str(tmp_path / "checkpoints"))
        assert checkpoint.step == 7
        assert checkpoint.vocab_digest == "abc"
        assert checkpoint.model_config == arrange_model.config
        restored = checkpoint.model()
        for name, param in arrange_model.named_parameters():
            assert np.array_equal(restored.params[name].data, param.data)
        fresh = Adam()
        checkpoint.restore_optimizer(fresh)
        assert fresh.step == 1
        assert np.array_equal(fresh.v["embed.tokens"], optimizer.v["embed.tokens"])

    def test_missing_checkpoint_raises(self, tmp_path):
        with pytest.raises(DataError, match="No checkpoint"):
            load_checkpoint(str(tmp_path))


@pytest.mark.unit
@pytest.mark.training
class TrainerTests:
    def test_run_writes_metrics_and_checkpoint(self, arrange_task, arrange_model, arrange_source, tmp_path):
        trainer = Trainer(arrange_model, Objective("pretrain"), arrange_source, small_config(), str(tmp_path))
        rows = trainer.run(progress=False)
        assert [row["step"] for row in rows] == [1, 2, 3, 4]
        assert float(rows[-1]["lr"]) == 0.0
        with open(tmp_path / "metrics.csv", encoding="utf-8") as file:
            written = list(csv.DictReader(file))
        assert [row["step"] for row in written] == ["1", "2", "3", "4"]
        assert {"cmlm", "mlm", "loss", "lr"} <= set(written[0])
        assert load_checkpoint(str(tmp_path)).step == 4

    def test_resumed_run_matches_uninterrupted_run(self, arrange_task, arrange_source, tmp_path):
        _, vocab, _ = arrange_task

        def fresh():
            config = ModelConfig(vocab_size=len(vocab), enc_layers=1, dec_layers=1, model_dim=16, heads=2, ffn_dim=32)
            return Transformer.init(config, np.random.default_rng(0))

        straight = Trainer(fresh(), Objective("pretrain"), arrange_source, small_config(), str(tmp_path / "a"))
        straight.run(progress=False)

        first = Trainer(fresh(), Objective("pretrain"), arrange_source, small_config(), str(tmp_path / "b"))
        first.run(steps=2, progress=False)
        second = Trainer(fresh(), Objective("pretrain"), arrange_source, small_config(), str(tmp_path / "b"))
        assert second.resume() == 2
        second.run(progress=False)

        for name, param in straight.model.named_parameters():
            assert np.array_equal(second.model.params[name].data, param.data), name
        with open(tmp_path / "a" / "metrics.csv", encoding="utf-8") as a, open(
            tmp_path / "b" / "metrics.csv", encoding="utf-8"
        ) as b:
            assert a.read() == b.read()

    def test_resume_without_checkpoint_starts_at_zero(self, arrange_model, arrange_source, tmp_path):
        trainer = Trainer(arrange_model, Objective("pretrain"), arrange_source, small_config(), str(tmp_path))
        assert trainer.resume() == 0
        assert not os.path.exists(tmp_path / "checkpoints")

    def test_finetuning_objectives_train(self, arrange_task, arrange_model, tmp_path):
        manifest, vocab, _ = arrange_task
        source = PairSource(load_pairs(manifest, "finetune", "en", "xa"), vocab, seed=1)
        for kind in ("at", "nat"):
            objective = Objective(kind, length_offsets=arrange_model.config.length_offsets) if kind == "nat" else Objective(kind)
            trainer = Trainer(arrange_model, objective, source, small_config(total_steps=2), str(tmp_path / kind))
            rows = trainer.run(progress=False)
            assert len(rows) == 2
            assert all(np.isfinite(float(row["loss"])) for row in rows)


@pytest.mark.slow
@pytest.mark.training
class TrainabilityTests:
    def test_pretraining_fits_a_small_corpus(self, tmp_path):
        manifest = make_toy_task(str(tmp_path / "task"), ToyTaskConfig(bilingual=32, monolingual=4, finetune=4, test=4))
        assert sum(len(list(manifest.pairs(e))) for e in manifest.select("train", CorpusKind.BILINGUAL)) == 64
        vocab = learn_vocab(manifest, target_size=300, seed=1)
        lexicon = load_lexicon_directory(str(tmp_path / "task" / "dict"))
        source = PretrainSource(manifest, vocab, lexicon, MaskingPolicy(), regime="bilingual", seed=1)
        config = ModelConfig(
            vocab_size=len(vocab), enc_layers=2, dec_layers=2, model_dim=64, heads=4, ffn_dim=128, dropout=0.0
        )
        model = Transformer.init(config, np.random.default_rng(1))
        train = TrainConfig(
            lr_peak=1e-3, warmup_steps=100, total_steps=2000, batch_tokens=512, checkpoint_every=2000, log_every=1, seed=1
        )
        rows = Trainer(model, Objective("pretrain"), source, train, str(tmp_path / "run")).run(progress=False)
        assert len(rows) == 2000
        assert np.mean([float(row["cmlm"]) for row in rows[-100:]]) < 0.1
