import json
import os

import pytest
from click.testing import CliRunner

import cemat
from cemat.cli import main
from cemat.training.checkpoint import LATEST


@pytest.fixture(scope="function")
def arrange_runner():
    return CliRunner()


@pytest.fixture(scope="module")
def arrange_toy(tmp_path_factory):
    directory = str(tmp_path_factory.mktemp("toy"))
    result = CliRunner().invoke(
        main, ["make-toy", directory, "--bilingual", "40", "--monolingual", "20", "--finetune", "10", "--test", "6"]
    )
    assert result.exit_code == 0, result.output
    return directory


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return str(path)


@pytest.mark.unit
@pytest.mark.cli
class CliTests:
    def test_version(self, arrange_runner):
        result = arrange_runner.invoke(main, ["version"])
        assert result.exit_code == 0
        assert f"cemat version {cemat.__version__}" in result.output

    def test_score_bleu(self, arrange_runner, tmp_path):
        hypotheses = write(tmp_path / "hyp.txt", ["the cat sat", "a b c d"])
        references = write(tmp_path / "ref.txt", ["the cat sat", "a b c d"])
        result = arrange_runner.invoke(main, ["score-bleu", hypotheses, references])
        assert result.exit_code == 0
        assert "100.00" in result.output

    def test_line_count_mismatch_is_a_data_error(self, arrange_runner, tmp_path):
        hypotheses = write(tmp_path / "hyp.txt", ["a b"])
        references = write(tmp_path / "ref.txt", ["a b", "c d"])
        result = arrange_runner.invoke(main, ["score-bleu", hypotheses, references])
        assert result.exit_code == 2
        assert "ERROR:" in result.output

    def test_missing_file_is_a_usage_error(self, arrange_runner, tmp_path):
        result = arrange_runner.invoke(main, ["score-bleu", str(tmp_path / "nope.txt"), str(tmp_path / "nope.txt")])
        assert result.exit_code == 1

    @pytest.mark.parametrize("item", ["no_such_key=1", "novalue", "warmup_steps=many"])
    def test_bad_overrides(self, arrange_runner, tmp_path, item):
        result = arrange_runner.invoke(main, ["learn-vocab", "--set", item, "-o", str(tmp_path / "v.txt")])
        assert result.exit_code == 1
        assert "ERROR:" in result.output

    def test_existing_checkpoints_need_resume(self, arrange_runner, tmp_path):
        checkpoints = tmp_path / "runs" / "first" / "checkpoints"
        checkpoints.mkdir(parents=True)
        (checkpoints / LATEST).write_text("step_00000001\n")
        result = arrange_runner.invoke(main, ["--run-root", str(tmp_path / "runs"), "pretrain", "--name", "first"])
        assert result.exit_code == 1
        assert "--resume" in result.output

    def test_dump_only_for_mask_predict(self, arrange_runner, tmp_path):
        args = ["--run-root", str(tmp_path), "translate-at", "--checkpoint", str(tmp_path)]
        result = arrange_runner.invoke(main, args + ["--dump-iterations", str(tmp_path / "dump.jsonl")])
        assert result.exit_code == 1

    def test_unknown_ablation_cell(self, arrange_runner, tmp_path):
        result = arrange_runner.invoke(main, ["--run-root", str(tmp_path), "ablate", "--only", "^nothing$"])
        assert result.exit_code == 1
        assert "No ablation cell" in result.output

    def test_iteration_counts_must_be_integers(self, arrange_runner, tmp_path):
        args = ["--run-root", str(tmp_path), "iter-curve", "--checkpoint", str(tmp_path), "--iterations", "1,two"]
        result = arrange_runner.invoke(main, args)
        assert result.exit_code == 1

    def test_make_toy_writes_starter_config(self, arrange_toy):
        assert {"cemat.yaml", "dict", "manifest.yaml"} <= set(os.listdir(arrange_toy))

    def test_learn_vocab_then_preprocess(self, arrange_runner, arrange_toy, tmp_path):
        config = os.path.join(arrange_toy, "cemat.yaml")
        vocab = str(tmp_path / "vocab.txt")
        result = arrange_runner.invoke(main, ["learn-vocab", "-c", config, "--set", "vocab_size=200", "-o", vocab])
        assert result.exit_code == 0, result.output
        assert os.path.isfile(vocab)

        output = str(tmp_path / "examples.jsonl")
        args = ["preprocess", "-c", config, "--set", f"vocab={vocab}", "-o", output, "--count", "25"]
        result = arrange_runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        with open(output) as file:
            records = [json.loads(line) for line in file]
        assert len(records) == 25


TINY = [
    "enc_layers=1",
    "dec_layers=1",
    "model_dim=16",
    "heads=2",
    "ffn_dim=32",
    "max_length=64",
    "max_positions=96",
    "length_offsets=4",
    "pretrain_steps=3",
    "finetune_steps=2",
    "warmup_steps=1",
    "batch_tokens=200",
    "beam_size=2",
    "nat_iterations=2",
]


def tiny_args(config):
    args = ["-c", config]
    for item in TINY:
        args += ["--set", item]
    return args


@pytest.fixture(scope="module")
def arrange_pretrained(arrange_toy, tmp_path_factory):
    config = os.path.join(arrange_toy, "cemat.yaml")
    runner = CliRunner()
    result = runner.invoke(main, ["learn-vocab", "-c", config, "--set", "vocab_size=150"])
    assert result.exit_code == 0, result.output
    root = str(tmp_path_factory.mktemp("runs"))
    result = runner.invoke(main, ["--run-root", root, "pretrain", *tiny_args(config), "--seed", "1"])
    assert result.exit_code == 0, result.output
    return config, root


@pytest.mark.unit
@pytest.mark.cli
class TrainingCommandTests:
    def test_pretraining_is_reproducible(self, arrange_runner, arrange_pretrained, tmp_path):
        config, root = arrange_pretrained
        result = arrange_runner.invoke(main, ["--run-root", str(tmp_path), "pretrain", *tiny_args(config), "--seed", "1"])
        assert result.exit_code == 0, result.output
        with open(os.path.join(root, "pretrain", "metrics.csv"), "rb") as first:
            with open(tmp_path / "pretrain" / "metrics.csv", "rb") as second:
                assert first.read() == second.read()
        assert os.path.isfile(tmp_path / "pretrain" / "config.yaml")

    @pytest.mark.parametrize("mode", ["at", "nat"])
    def test_finetune_then_translate(self, arrange_runner, arrange_pretrained, tmp_path, mode):
        config, root = arrange_pretrained
        runs = ["--run-root", str(tmp_path)]
        init = os.path.join(root, "pretrain")
        result = arrange_runner.invoke(main, runs + [f"finetune-{mode}", *tiny_args(config), "--init", init])
        assert result.exit_code == 0, result.output

        checkpoint = str(tmp_path / f"finetune-{mode}")
        result = arrange_runner.invoke(main, runs + [f"translate-{mode}", *tiny_args(config), "--checkpoint", checkpoint])
        assert result.exit_code == 0, result.output
        assert "BLEU" in result.output
        with open(tmp_path / f"translate-{mode}" / f"hypotheses.{mode}.txt", encoding="utf-8") as file:
            assert len(file.read().splitlines()) == 6
