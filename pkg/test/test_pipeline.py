import csv
import os

import pytest

from cemat.configuration import RunConfig
from cemat.data.toy import ToyTaskConfig, make_toy_task
from cemat.data.vocab import learn_vocab
from cemat.evaluation.experiments import ablation_run
from cemat.training.checkpoint import load_checkpoint


@pytest.fixture(scope="module")
def arrange_config(tmp_path_factory):
    directory = tmp_path_factory.mktemp("pipeline")
    manifest = make_toy_task(str(directory), ToyTaskConfig(bilingual=60, monolingual=30, finetune=20, test=8))
    vocab = str(directory / "vocab.txt")
    learn_vocab(manifest, target_size=150, seed=1).save(vocab)
    return RunConfig(
        manifest=str(directory / "manifest.yaml"),
        dictionaries=str(directory / "dict"),
        vocab=vocab,
        enc_layers=1,
        dec_layers=1,
        model_dim=16,
        heads=2,
        ffn_dim=32,
        max_length=64,
        max_positions=96,
        length_offsets=6,
        pretrain_steps=4,
        finetune_steps=4,
        warmup_steps=2,
        batch_tokens=300,
        checkpoint_every=2,
        beam_size=2,
    )


@pytest.mark.slow
class PipelineTests:
    def test_ablation_cells_end_to_end(self, arrange_config, tmp_path):
        root = str(tmp_path / "ablate")
        results = ablation_run(arrange_config, root, ["full", "scratch"], seeds=[1])
        assert [r.cell for r in results] == ["full", "scratch"]
        assert all(0.0 <= r.bleu <= 100.0 for r in results)
        assert load_checkpoint(os.path.join(root, "full", "seed_1", "pretrain")).step == 4
        assert not os.path.exists(os.path.join(root, "scratch", "seed_1", "pretrain"))
        with open(os.path.join(root, "ablation.csv")) as file:
            assert len(list(csv.reader(file))) == 1 + 2 + 2

    def test_rerun_resumes_finished_cells(self, arrange_config, tmp_path):
        root = str(tmp_path / "ablate")
        first = ablation_run(arrange_config, root, ["w/o aligned cs"], seeds=[2])
        second = ablation_run(arrange_config, root, ["w/o aligned cs"], seeds=[2])
        assert first == second
