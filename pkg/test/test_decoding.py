import io
import itertools
import json
import string

import numpy as np
import pytest

from cemat.data.corpus import SPECIAL_TOKENS, LanguageTag, Sentence
from cemat.data.vocab import EOS_ID, MASK_ID, Vocabulary
from cemat.decoding import (
    DecodeConfig,
    Hypothesis,
    banned_ids,
    beam_search,
    beam_search_core,
    mask_predict,
    mask_predict_core,
    predict_length,
    remask_schedule,
    rerank,
    surface,
    translate,
)
from cemat.errors import DataError, UsageError
from cemat.model.transformer import ModelConfig, Transformer
from cemat.utils.seeding import derive_rng

EN = LanguageTag("en")
XA = LanguageTag("xa")


def log_softmax(x):
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def seeded_step_fn(seed, vocab):
    """Fixed random next-token distributions, token 0 being end-of-sentence."""
    table = {}

    def step(prefixes):
        rows = []
        for prefix in prefixes:
            if prefix not in table:
                table[prefix] = log_softmax(derive_rng(seed, *prefix).normal(size=vocab) * 2)
            rows.append(table[prefix])
        return np.array(rows)

    return step


@pytest.fixture(scope="function")
def arrange_step_fn():
    return seeded_step_fn(17, 4)


@pytest.fixture(scope="module")
def arrange_translation():
    vocab = Vocabulary(list(SPECIAL_TOKENS) + ["[en]", "[xa]"] + list(string.ascii_lowercase) + ["</w>"], [], ["en", "xa"])
    config = ModelConfig(vocab_size=len(vocab), model_dim=16, heads=2, ffn_dim=32, max_positions=64, length_offsets=5)
    model = Transformer.init(config, np.random.default_rng(0))
    return vocab, model


def exhaustive_best(step, max_len, alpha, eos_id=0, vocab=4):
    best = None
    for length in range(1, max_len + 1):
        for sequence in itertools.product(range(vocab), repeat=length):
            if eos_id in sequence[:-1]:
                continue
            if sequence[-1] != eos_id and length != max_len:
                continue
            score = sum(step([sequence[:i]])[0][token] for i, token in enumerate(sequence))
            normalized = score / length ** alpha
            if best is None or normalized > best[0]:
                best = (normalized, sequence)
    return best[1]


@pytest.mark.unit
@pytest.mark.decoding
class BeamSearchTests:
    @pytest.mark.parametrize("seed", range(100))
    def test_beam_of_five_finds_exhaustive_optimum(self, seed):
        step = seeded_step_fn(seed, 3)
        result = beam_search_core(step, beam=5, max_len=3, eos_id=0)
        assert result.tokens == exhaustive_best(step, 3, 1.0, vocab=3)

    @pytest.mark.parametrize("alpha", [0.0, 1.0])
    def test_wide_beam_finds_exhaustive_optimum(self, arrange_step_fn, alpha):
        result = beam_search_core(arrange_step_fn, beam=64, max_len=3, alpha=alpha, eos_id=0)
        assert result.tokens == exhaustive_best(arrange_step_fn, 3, alpha)

    def test_beam_of_one_is_greedy(self, arrange_step_fn):
        prefix = ()
        while len(prefix) < 6:
            token = int(np.argmax(arrange_step_fn([prefix])[0]))
            prefix += (token,)
            if token == 0:
                break
        assert beam_search_core(arrange_step_fn, beam=1, max_len=6, eos_id=0).tokens == prefix

    def test_score_is_sum_of_token_logprobs(self, arrange_step_fn):
        result = beam_search_core(arrange_step_fn, beam=3, max_len=5, eos_id=0)
        assert result.score == pytest.approx(sum(result.token_logprobs))

    def test_banned_tokens_never_appear(self, arrange_step_fn):
        result = beam_search_core(arrange_step_fn, beam=4, max_len=5, eos_id=0, banned=[2])
        assert 2 not in result.tokens

    def test_search_stops_at_max_len(self):
        constant = lambda prefixes: np.log(np.tile([0.01, 0.99], (len(prefixes), 1)))  # noqa: E731
        result = beam_search_core(constant, beam=1, max_len=4, eos_id=0)
        assert result.tokens == (1, 1, 1, 1)
        assert not result.finished

    def test_banned_ids_keep_eos_and_unk(self):
        assert banned_ids([0, 1, 2, 3, 4, 5, 6]) == [0, 1, 3, 5, 6]

    def test_model_beam_search(self, arrange_translation):
        vocab, model = arrange_translation
        src = vocab.encode(Sentence(EN, ["abc", "de"]))
        config = DecodeConfig(beam_size=3, max_len_ratio=1.0, max_len_offset=2)
        result = beam_search(model, src, vocab.tag_id("xa"), config, banned_ids(vocab.special_ids))
        assert 1 <= len(result) <= config.max_len(len(src) - 1)
        assert not set(result.tokens) & set(banned_ids(vocab.special_ids))


@pytest.mark.unit
@pytest.mark.decoding
class MaskPredictTests:
    def test_schedule_counts_down(self):
        assert remask_schedule(10, 10) == [9, 8, 7, 6, 5, 4, 3, 2, 1, 0]

    def test_schedule_is_monotone_and_ends_unmasked(self):
        for length in range(1, 65):
            for iterations in range(1, 17):
                schedule = remask_schedule(length, iterations)
                assert len(schedule) == iterations
                assert schedule[-1] == 0
                assert all(a >= b for a, b in zip(schedule, schedule[1:]))
                assert all(0 <= n < length for n in schedule)
                for t, n in enumerate(schedule, 1):
                    assert n == (length * (iterations - t)) // iterations

    def test_single_iteration_is_one_shot(self):
        calls = []
        logprobs = np.log(np.array([[0.1, 0.2, 0.6, 0.1], [0.5, 0.3, 0.1, 0.1]]))

        def predict(tokens):
            calls.append(tokens)
            return logprobs

        result = mask_predict_core(predict, 2, 1, mask_id=3)
        assert len(calls) == 1
        assert result.tokens == (2, 0)
        assert len(result.history) == 1

    def test_least_confident_positions_are_remasked(self):
        calls = []
        confident = np.log(np.array([[0.9, 0.1, 0.01], [0.6, 0.4, 0.01], [0.2, 0.8, 0.01], [0.55, 0.45, 0.01]]))

        def predict(tokens):
            calls.append(tokens)
            return confident

        result = mask_predict_core(predict, 4, 2, mask_id=2)
        assert calls[0].tolist() == [2, 2, 2, 2]
        assert calls[1].tolist() == [0, 2, 1, 2]
        assert result.history[0] == (0, 2, 1, 2)
        assert result.tokens == (0, 0, 1, 0)

    def test_empty_length_is_rejected(self):
        with pytest.raises(DataError):
            mask_predict_core(lambda tokens: np.zeros((0, 3)), 0, 3)

    def test_mask_token_is_never_predicted(self):
        result = mask_predict_core(lambda tokens: np.zeros((3, 5)), 3, 2, mask_id=0)
        assert 0 not in result.tokens

    def test_rerank_prefers_mean_logprob(self):
        short = Hypothesis((1, 2), (-0.5, -0.5), -1.0)
        long = Hypothesis((1, 2, 3, 4), (-0.3, -0.3, -0.3, -0.3), -1.2)
        tie = Hypothesis((5, 6, 7, 8), (-0.3, -0.3, -0.3, -0.3), -1.2)
        assert rerank([short, long, tie]) is long

    def test_gold_length(self, arrange_translation):
        _, model = arrange_translation
        encoded = model.encode(np.array([[5, 10, 11]]))
        assert predict_length(model, encoded, 2, DecodeConfig(length_mode="gold"), reference_len=7) == [7]

    def test_gold_length_needs_reference(self, arrange_translation):
        _, model = arrange_translation
        encoded = model.encode(np.array([[5, 10, 11]]))
        with pytest.raises(UsageError):
            predict_length(model, encoded, 2, DecodeConfig(length_mode="gold"))

    def test_predicted_lengths_are_distinct_and_positive(self, arrange_translation):
        _, model = arrange_translation
        encoded = model.encode(np.array([[5, 10, 11]]))
        lengths = predict_length(model, encoded, 2, DecodeConfig(nat_length_candidates=3))
        assert len(lengths) == len(set(lengths)) <= 3
        assert all(length >= 1 for length in lengths)

    def test_model_mask_predict_uses_gold_length(self, arrange_translation):
        vocab, model = arrange_translation
        src = vocab.encode(Sentence(EN, ["abc"]))
        config = DecodeConfig(nat_iterations=3, length_mode="gold")
        result = mask_predict(model, src, vocab.tag_id("xa"), config, reference_len=5, banned=banned_ids(vocab.special_ids))
        assert len(result) == 5
        assert len(result.history) == 3
        assert MASK_ID not in result.tokens


@pytest.mark.unit
@pytest.mark.decoding
class TranslateTests:
    def test_surface_stops_at_eos(self, arrange_translation):
        vocab, _ = arrange_translation
        ids = vocab.encode(Sentence(XA, ["ab", "c"]))[1:]
        assert surface(vocab, ids + [EOS_ID] + ids, XA) == "ab c"

    def test_empty_surface(self, arrange_translation):
        vocab, _ = arrange_translation
        assert surface(vocab, [EOS_ID], XA) == ""

    def test_translate_both_modes(self, arrange_translation):
        vocab, model = arrange_translation
        sources = [Sentence(EN, ["ab", "cd"]), Sentence(EN, ["e"])]
        config = DecodeConfig(beam_size=2, nat_iterations=2, max_len_ratio=1.0, max_len_offset=2)
        for mode in ("at", "nat"):
            outputs = translate(model, vocab, sources, XA, mode, config)
            assert len(outputs) == 2
            assert all(isinstance(line, str) for line in outputs)

    def test_long_sources_are_truncated(self, arrange_translation):
        vocab, model = arrange_translation
        source = Sentence(EN, ["abcdefghij"] * 10)
        assert len(vocab.encode(source)) > model.config.max_positions
        config = DecodeConfig(beam_size=2, nat_iterations=2, max_len_ratio=0.0, max_len_offset=3)
        for mode in ("at", "nat"):
            assert len(translate(model, vocab, [source], XA, mode, config)) == 1

    def test_translate_dumps_iterations(self, arrange_translation):
        vocab, model = arrange_translation
        sources = [Sentence(EN, ["ab", "cd"])]
        references = [Sentence(XA, ["xy", "z"])]
        dump = io.StringIO()
        config = DecodeConfig(nat_iterations=4, length_mode="gold")
        translate(model, vocab, sources, XA, "nat", config, references, dump)
        record = json.loads(dump.getvalue().splitlines()[0])
        assert record["length"] == len(vocab.encode(references[0])) - 1
        assert [step["iteration"] for step in record["iterations"]] == [1, 2, 3, 4]

    def test_gold_mode_needs_references(self, arrange_translation):
        vocab, model = arrange_translation
        with pytest.raises(UsageError):
            translate(model, vocab, [Sentence(EN, ["a"])], XA, "nat", DecodeConfig(length_mode="gold"))

    def test_unknown_mode(self, arrange_translation):
        vocab, model = arrange_translation
        with pytest.raises(UsageError):
            translate(model, vocab, [Sentence(EN, ["a"])], XA, "ctc", DecodeConfig())

    @pytest.mark.parametrize("changes", [{"beam_size": 0}, {"nat_iterations": 0}, {"length_mode": "oracle"}])
    def test_invalid_decode_settings(self, changes):
        with pytest.raises(UsageError):
            DecodeConfig(**changes)
