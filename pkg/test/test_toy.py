import os

import pytest

from cemat.data.corpus import CorpusKind, CorpusManifest
from cemat.data.lexicon import load_lexicon_directory
from cemat.data.toy import ToyTaskConfig, make_toy_task

SMALL = ToyTaskConfig(bilingual=50, monolingual=20, finetune=10, test=10, seed=2)


@pytest.mark.unit
@pytest.mark.corpus
class ToyTaskTests:
    def test_manifest_lists_every_corpus(self, tmp_path):
        manifest = make_toy_task(str(tmp_path), SMALL)
        assert [entry.name for entry in manifest.entries] == [
            "test.en-xa",
            "finetune.en-xa",
            "train.en-xa",
            "train.en-xb",
            "train.en",
            "train.xa",
            "train.xb",
        ]
        assert manifest.languages == ["en", "xa", "xb"]
        assert len(manifest.select("train", CorpusKind.MONOLINGUAL)) == 3

    def test_written_manifest_validates(self, tmp_path):
        make_toy_task(str(tmp_path), SMALL)
        manifest = CorpusManifest.load(str(tmp_path / "manifest.yaml"))
        manifest.validate()
        assert manifest.select("finetune")[0].count == 10

    def test_splits_do_not_overlap(self, tmp_path):
        manifest = make_toy_task(str(tmp_path), SMALL)
        seen = {}
        for entry in manifest.entries:
            for pair in manifest.pairs(entry):
                if pair.src.lang.code == "en":
                    seen.setdefault(pair.src.tokens, set()).add(entry.name)
        assert all(len(names) == 1 for names in seen.values())

    def test_dictionaries_cover_part_of_the_words(self, tmp_path):
        make_toy_task(str(tmp_path), SMALL)
        assert sorted(os.listdir(tmp_path / "dict")) == ["en-xa.txt", "en-xb.txt"]
        lexicon = load_lexicon_directory(str(tmp_path / "dict"))
        assert ("xa", "en") in lexicon.language_pairs
        assert len(lexicon) > 0

    def test_generation_is_seeded(self, tmp_path):
        make_toy_task(str(tmp_path / "a"), SMALL)
        make_toy_task(str(tmp_path / "b"), SMALL)
        for name in ("train.en-xa.xa", "mono.xb", "dict/en-xa.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
