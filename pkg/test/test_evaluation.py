import csv
import math
import unittest.mock

import pytest

from cemat.configuration.configuration import RunConfig
from cemat.configuration.jobs import Scenario
from cemat.data.corpus import LanguageTag, Sentence, SentencePair
from cemat.decoding.hypothesis import DecodeConfig
from cemat.errors import DataError, UsageError
from cemat.evaluation.bleu import BleuReport, bleu
from cemat.evaluation.experiments import (
    ABLATION_CELLS,
    AblationResult,
    ablation_means,
    ablation_run,
    cell_scenario,
    iteration_curve,
    run_cell,
    slug,
)

EN = LanguageTag("en")
XA = LanguageTag("xa")


@pytest.mark.unit
@pytest.mark.evaluation
class BleuTests:
    def test_identical_output_scores_100(self):
        lines = ["the cat sat on the mat", "a b c d e"]
        assert bleu(lines, lines).bleu == pytest.approx(100.0)

    def test_repeated_word_is_clipped(self):
        report = bleu(["the the the the"], ["the cat"], smoothing=False)
        assert report.precisions[0] == pytest.approx(0.25)
        assert report.bleu == 0.0

    def test_empty_hypothesis_scores_zero(self):
        assert bleu([""], ["a b c"]).bleu == 0.0

    def test_line_counts_must_match(self):
        with pytest.raises(DataError):
            bleu(["a"], ["a", "b"])

    def test_brevity_penalty(self):
        report = bleu(["a b"], ["a b c d"])
        assert report.brevity_penalty == pytest.approx(math.exp(-1.0))
        assert report.hyp_len == 2 and report.ref_len == 4

    def test_smoothed_higher_orders(self):
        report = bleu(["a b c d"], ["a b c e"])
        expected = 100.0 * math.exp((math.log(3 / 4) + math.log(3 / 4) + math.log(2 / 3) + math.log(1 / 2)) / 4)
        assert report.bleu == pytest.approx(expected)
        assert bleu(["a b c d"], ["a b c e"], smoothing=False).bleu == 0.0

    def test_orders_without_ngrams_are_skipped(self):
        assert bleu(["a b"], ["a b"], smoothing=False).bleu == pytest.approx(100.0)

    def test_sentence_order_does_not_matter(self):
        hypotheses = ["a b c", "d e f g", "h i"]
        references = ["a b d", "d e f h", "h i j"]
        order = [2, 0, 1]
        shuffled = bleu([hypotheses[i] for i in order], [references[i] for i in order])
        assert shuffled.bleu == pytest.approx(bleu(hypotheses, references).bleu)

    def test_restoring_missing_words_does_not_lower_the_score(self):
        reference = ["the cat sat on the mat today"]
        partial = bleu(["the cat sat on the"], reference)
        restored = bleu(["the cat sat on the mat"], reference)
        assert partial.bleu <= restored.bleu

    def test_report_row(self):
        row = bleu(["a b"], ["a b"]).as_row()
        assert row[0] == "100.00"
        assert row[-2:] == ["2", "2"]


@pytest.mark.unit
@pytest.mark.evaluation
class AblationTests:
    def test_slug(self):
        assert slug("w/o dynamic (0.15)") == "w-o-dynamic-0-15"
        assert slug("w/o aligned cs & dynamic") == "w-o-aligned-cs-dynamic"
        assert len({slug(name) for name in ABLATION_CELLS}) == len(ABLATION_CELLS)

    def test_grid_runs_every_cell_and_seed(self, tmp_path):
        runner = unittest.mock.MagicMock(side_effect=lambda name, config, directory, progress: 10.0 + config.seed)
        cells = ["full", "scratch", "w/o dynamic (0.35)"]
        results = ablation_run(RunConfig(), str(tmp_path), cells, seeds=[1, 2], runner=runner)
        assert [(r.cell, r.seed) for r in results] == [(c, s) for c in cells for s in (1, 2)]
        configs = {(call[0][0], call[0][1].seed): call[0][1] for call in runner.call_args_list}
        assert configs[("scratch", 2)].pretrain_steps == 0
        assert configs[("w/o dynamic (0.35)", 1)].dynamic is False
        assert configs[("w/o dynamic (0.35)", 1)].fixed_ratio == 0.35
        assert runner.call_args_list[0][0][2] == str(tmp_path / "full" / "seed_1")
        with open(tmp_path / "ablation.csv") as file:
            rows = list(csv.reader(file))
        assert rows[0] == ["cell", "seed", "bleu"]
        assert len(rows) == 1 + 6 + 3
        assert rows[-3:] == [["full", "mean", "11.50"], ["scratch", "mean", "11.50"], ["w/o dynamic (0.35)", "mean", "11.50"]]

    def test_unknown_cell(self, tmp_path):
        with pytest.raises(UsageError):
            ablation_run(RunConfig(), str(tmp_path), ["full", "w/o everything"], runner=unittest.mock.MagicMock())

    def test_seeds_are_required(self, tmp_path):
        with pytest.raises(UsageError):
            ablation_run(RunConfig(), str(tmp_path), ["full"], seeds=[], runner=unittest.mock.MagicMock())

    def test_means(self):
        results = [AblationResult("full", 1, 20.0), AblationResult("full", 2, 22.0), AblationResult("scratch", 1, 5.0)]
        assert ablation_means(results) == {"full": 21.0, "scratch": 5.0}

    def test_cell_scenario_chains_jobs(self, tmp_path):
        scenario = cell_scenario("full", RunConfig(), str(tmp_path))
        assert [job.kind for job in scenario.jobs] == ["pretrain", "finetune-at", "translate-at", "score-bleu"]
        assert scenario.jobs[1].init == scenario.jobs[0].run_dir
        assert scenario.jobs[2].checkpoint == scenario.jobs[1].run_dir
        assert scenario.jobs[3].hypotheses == scenario.jobs[2].hypotheses_path

    def test_scratch_cell_skips_pretraining(self, tmp_path):
        scenario = cell_scenario("scratch", RunConfig().evolve(pretrain_steps=0), str(tmp_path))
        assert [job.kind for job in scenario.jobs] == ["finetune-at", "translate-at", "score-bleu"]
        assert scenario.jobs[0].init is None

    def test_run_cell_returns_bleu(self, tmp_path):
        report = BleuReport(31.5, (0.5, 0.4, 0.3, 0.2), 1.0, 10, 10)
        with unittest.mock.patch.object(Scenario, "run", return_value=["ckpt", "ckpt", [], report]):
            assert run_cell("full", RunConfig(), str(tmp_path)) == 31.5


@pytest.mark.unit
@pytest.mark.evaluation
class IterationCurveTests:
    def test_curve_is_written(self, tmp_path):
        pairs = [SentencePair(Sentence(EN, ["a", "b"]), Sentence(XA, ["x", "y", "z"]))]

        def fake_translate(model, vocab, sources, lang, mode, config, references, progress=False):
            assert mode == "nat"
            return ["x y z"] if config.nat_iterations > 1 else ["q r s"]

        path = tmp_path / "curve" / "iterations.csv"
        with unittest.mock.patch("cemat.evaluation.experiments.translate", side_effect=fake_translate):
            curve = iteration_curve(None, None, pairs, XA, [1, 4], DecodeConfig(), path=str(path))
        assert curve == [(1, 0.0), (4, pytest.approx(100.0))]
        assert path.read_text().splitlines() == ["iterations,bleu", "1,0.00", "4,100.00"]

    def test_iteration_counts_are_required(self):
        with pytest.raises(UsageError):
            iteration_curve(None, None, [], XA, [], DecodeConfig())
