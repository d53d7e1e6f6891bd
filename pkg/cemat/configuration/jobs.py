"""Pipeline jobs.

A job is one pipeline step working inside a run directory. Jobs are created
by kind, e.g. `Job(kind="pretrain", config=config, run_dir="runs/x")`, and a
`Scenario` runs a list of them in order.
"""

import logging
import os
import sys
from abc import ABC, abstractmethod
from typing import Any, List, Optional

import attr
import rich.console
import yaml

from cemat.configuration.configuration import RunConfig
from cemat.data.corpus import CorpusManifest, LanguageTag, Sentence, load_monolingual, read_lines
from cemat.data.lexicon import Lexicon, load_lexicon_directory
from cemat.data.vocab import Vocabulary, learn_vocab
from cemat.decoding.translate import translate
from cemat.errors import DataError, UsageError
from cemat.evaluation.bleu import BleuReport, bleu
from cemat.model.transformer import Transformer
from cemat.training.batching import PairSource, PretrainSource, load_pairs
from cemat.training.checkpoint import Checkpoint, load_checkpoint, resolve_checkpoint
from cemat.training.objectives import Objective
from cemat.training.trainer import Trainer
from cemat.utils.seeding import derive_rng

console = rich.console.Console(highlight=False)
log = logging.getLogger(__name__)

FIXED_RATIO_PROBES = 200


def load_vocab(config: RunConfig) -> Vocabulary:
    if not config.vocab:
        raise UsageError("No vocabulary configured; run learn-vocab and set vocab=PATH")
    return Vocabulary.load(config.vocab)


def load_manifest(config: RunConfig) -> CorpusManifest:
    if not config.manifest:
        raise UsageError("No corpus manifest configured; set manifest=PATH")
    manifest = CorpusManifest.load(config.manifest)
    manifest.validate()
    return manifest


def load_dictionaries(config: RunConfig) -> Optional[Lexicon]:
    if not config.dictionaries:
        if config.code_switch:
            log.warning("No dictionaries configured, code-switching is disabled")
        return None
    return load_lexicon_directory(config.dictionaries)


def read_sentences(path: str, lang: str) -> List[Sentence]:
    """Every line of a file as a sentence; nothing is dropped for length."""
    return list(load_monolingual(path, LanguageTag(lang), max_length=sys.maxsize))


def check_vocab(checkpoint: Checkpoint, vocab: Vocabulary) -> None:
    if checkpoint.vocab_digest and checkpoint.vocab_digest != vocab.digest:
        raise DataError(f"Checkpoint {checkpoint.path} was trained with a different vocabulary")


def init_model(config: RunConfig, vocab: Vocabulary) -> Transformer:
    return Transformer.init(config.model_config(len(vocab)), derive_rng(config.seed, "init"))


def pretrain_source(config: RunConfig, vocab: Vocabulary) -> PretrainSource:
    return PretrainSource(
        load_manifest(config),
        vocab,
        load_dictionaries(config),
        config.masking_policy(),
        config.balancing_policy(),
        config.regime,
        config.seed,
        config.max_length,
    )


def verify_fixed_ratio(source: PretrainSource, ratio: float, probes: int = FIXED_RATIO_PROBES) -> int:
    """Check sampled examples are masked with exactly `ratio` on both sides.

    Raises:
        DataError: on the first example drawn with another ratio.
    """
    for corpus, line in source.draw("fixed-ratio-check", probes):
        example = source.example(corpus, line, "fixed-ratio-check")
        if example.upsilon != ratio or example.mu != ratio:
            raise DataError(
                f"{corpus} line {line} masked with ratios {example.upsilon:.3f}/{example.mu:.3f}, expected {ratio}"
            )
    log.info("Verified fixed masking ratio %.2f on %d examples", ratio, probes)
    return probes


@attr.s(auto_attribs=True)
class Job(ABC):
    kind: str
    config: RunConfig
    run_dir: str = ""

    @classmethod
    def register(cls, kind):
        def decorator(subcls):
            kinds = getattr(cls, "kinds", {})
            kinds.update({kind: subcls})
            setattr(cls, "kinds", kinds)
            return subcls

        return decorator

    def __new__(cls, kind: str, *args, **kwargs) -> "Job":
        if cls is not Job:
            return super().__new__(cls)
        try:
            job = getattr(cls, "kinds", {})[kind]
        except KeyError:
            raise UsageError(f"Invalid job: {kind}")
        return super().__new__(job)

    def extra(self, vocab: Vocabulary, **fields) -> dict:
        return dict(job=self.kind, seed=self.config.seed, vocab_digest=vocab.digest, **fields)

    @abstractmethod
    def run(self) -> Any:
        pass


@Job.register("learn-vocab")
@attr.s(auto_attribs=True)
class LearnVocabJob(Job):
    output: str = ""

    def run(self) -> Vocabulary:
        config = self.config
        path = self.output or config.vocab
        if not path:
            raise UsageError("No vocabulary path; pass --output or set vocab=PATH")
        vocab = learn_vocab(
            load_manifest(config),
            target_size=config.vocab_size,
            policy=config.balancing_policy(),
            seed=config.seed,
            sample_size=config.vocab_sample or None,
            min_frequency=config.min_frequency,
            max_length=config.max_length,
        )
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        vocab.save(path)
        console.print(
            f"Learned [bold cyan]{len(vocab)}[/] tokens and [bold cyan]{len(vocab.merges)}[/] merges into [bold blue]{path}[/]"
        )
        return vocab


@Job.register("pretrain")
@attr.s(auto_attribs=True)
class PretrainJob(Job):
    resume: bool = False
    progress: bool = False

    def run(self) -> str:
        config = self.config
        vocab = load_vocab(config)
        source = pretrain_source(config, vocab)
        if not config.dynamic:
            verify_fixed_ratio(source, config.fixed_ratio)
        objective = Objective("pretrain", label_smoothing=config.label_smoothing, lam=config.lam)
        trainer = Trainer(
            init_model(config, vocab),
            objective,
            source,
            config.train_config(config.pretrain_steps),
            self.run_dir,
            self.extra(vocab, regime=config.regime),
        )
        if self.resume:
            trainer.resume()
        config.save(self.run_dir)
        trainer.run(progress=self.progress)
        return resolve_checkpoint(self.run_dir)


@attr.s(auto_attribs=True)
class FinetuneJob(Job):
    init: Optional[str] = None
    resume: bool = False
    progress: bool = False

    @abstractmethod
    def objective(self, model: Transformer) -> Objective:
        pass

    def model(self, vocab: Vocabulary) -> Transformer:
        if not self.init:
            log.info("Fine-tuning from random initialization")
            return init_model(self.config, vocab)
        checkpoint = load_checkpoint(self.init)
        check_vocab(checkpoint, vocab)
        log.info("Fine-tuning from %s", checkpoint.path)
        return checkpoint.model()

    def run(self) -> str:
        config = self.config
        vocab = load_vocab(config)
        pairs = load_pairs(
            load_manifest(config), config.finetune_split, config.src_lang, config.tgt_lang, config.max_length
        )
        model = self.model(vocab)
        trainer = Trainer(
            model,
            self.objective(model),
            PairSource(pairs, vocab, config.seed, config.max_length),
            config.train_config(config.finetune_steps),
            self.run_dir,
            self.extra(vocab, init=self.init or None, direction=f"{config.src_lang}-{config.tgt_lang}"),
        )
        if self.resume:
            trainer.resume()
        config.save(self.run_dir)
        trainer.run(progress=self.progress)
        return resolve_checkpoint(self.run_dir)


@Job.register("finetune-at")
@attr.s(auto_attribs=True)
class FinetuneATJob(FinetuneJob):
    def objective(self, model):
        return Objective("at", label_smoothing=self.config.at_label_smoothing)


@Job.register("finetune-nat")
@attr.s(auto_attribs=True)
class FinetuneNATJob(FinetuneJob):
    def objective(self, model):
        return Objective(
            "nat",
            label_smoothing=self.config.nat_label_smoothing,
            length_loss_weight=self.config.length_loss_weight,
            length_offsets=model.config.length_offsets,
        )


@attr.s(auto_attribs=True)
class TranslateJob(Job):
    """Translate a file, or the test split of the manifest when no input is given.

    Translating the test split also writes its references next to the
    hypotheses so a score job can pick both up.
    """

    checkpoint: str = ""
    input: Optional[str] = None
    output: Optional[str] = None
    references: Optional[str] = None
    dump: Optional[str] = None
    progress: bool = False
    mode = "at"

    @property
    def hypotheses_path(self) -> str:
        return self.output or os.path.join(self.run_dir, f"hypotheses.{self.mode}.txt")

    @property
    def references_path(self) -> str:
        return self.references or os.path.join(self.run_dir, "references.txt")

    def sources(self):
        config = self.config
        if self.input:
            references = read_sentences(self.references, config.tgt_lang) if self.references else None
            return read_sentences(self.input, config.src_lang), references
        pairs = load_pairs(load_manifest(config), config.test_split, config.src_lang, config.tgt_lang, sys.maxsize)
        os.makedirs(os.path.dirname(os.path.abspath(self.references_path)), exist_ok=True)
        with open(self.references_path, "w", encoding="utf-8") as file:
            for pair in pairs:
                file.write(" ".join(pair.tgt.words) + "\n")
        return [pair.src for pair in pairs], [pair.tgt for pair in pairs]

    def run(self) -> List[str]:
        config = self.config
        vocab = load_vocab(config)
        checkpoint = load_checkpoint(self.checkpoint or self.run_dir)
        check_vocab(checkpoint, vocab)
        sources, references = self.sources()
        dump = open(self.dump, "w", encoding="utf-8") if self.dump else None
        try:
            outputs = translate(
                checkpoint.model(),
                vocab,
                sources,
                LanguageTag(config.tgt_lang),
                self.mode,
                config.decode_config(),
                references,
                dump,
                self.progress,
            )
        finally:
            if dump is not None:
                dump.close()
        os.makedirs(os.path.dirname(os.path.abspath(self.hypotheses_path)), exist_ok=True)
        with open(self.hypotheses_path, "w", encoding="utf-8") as file:
            for line in outputs:
                file.write(line + "\n")
        log.info("Wrote %d translations to %s", len(outputs), self.hypotheses_path)
        return outputs


@Job.register("translate-at")
@attr.s(auto_attribs=True)
class TranslateATJob(TranslateJob):
    mode = "at"


@Job.register("translate-nat")
@attr.s(auto_attribs=True)
class TranslateNATJob(TranslateJob):
    mode = "nat"


@Job.register("score-bleu")
@attr.s(auto_attribs=True)
class ScoreJob(Job):
    hypotheses: str = ""
    references: str = ""

    def run(self) -> BleuReport:
        report = bleu(read_lines(self.hypotheses), read_lines(self.references), self.config.bleu_smoothing)
        if self.run_dir:
            os.makedirs(self.run_dir, exist_ok=True)
            with open(os.path.join(self.run_dir, "bleu.yaml"), "w", encoding="utf-8") as file:
                yaml.safe_dump(attr.asdict(report, retain_collection_types=False), file, sort_keys=False)
        log.info("BLEU %.2f for %s", report.bleu, self.hypotheses)
        return report


@attr.s(auto_attribs=True)
class Scenario:
    name: str
    jobs: List[Job]
    description: Optional[str] = ""

    def run(self) -> List[Any]:
        results = []
        for job in self.jobs:
            log.info("Scenario %s: running %s in %s", self.name, job.kind, job.run_dir or ".")
            results.append(job.run())
        return results
