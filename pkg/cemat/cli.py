#!/usr/bin/env python3
import itertools
import logging
import os
import sys
from typing import List, Optional, Sequence

import attr
import click
import rich.console
import rich.logging
import rich.progress
import rich.table
import rich.traceback
import yaml

import cemat
import cemat.utils
from cemat.configuration import Job, RunConfig, parse_overrides
from cemat.configuration.jobs import check_vocab, load_manifest, load_vocab, pretrain_source
from cemat.data.corpus import LanguageTag
from cemat.data.masking import MaskingStats
from cemat.data.toy import ToyTaskConfig, make_toy_task
from cemat.errors import CematError, UsageError
from cemat.evaluation.bleu import BleuReport
from cemat.evaluation.experiments import ABLATION_CELLS, ablation_means, ablation_run, iteration_curve
from cemat.training.batching import load_pairs
from cemat.training.checkpoint import LATEST, load_checkpoint

console = rich.console.Console(highlight=False)
rich.traceback.install()

LOG_FILE = "log.txt"


class CematGroup(click.Group):
    """Click group mapping cemat errors to their exit codes.

    Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
    """

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CematError as e:
            console.print(f"[bold red]ERROR:[/] {e}")
            ctx.exit(e.exit_code)

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            code = super().main(*args, **kwargs)
        except click.ClickException as e:
            e.show()
            sys.exit(1)
        except click.Abort:
            console.print("[bold red]Aborted![/]")
            sys.exit(1)
        sys.exit(code if isinstance(code, int) else 0)


@attr.s(auto_attribs=True)
class Settings:
    run_root: str
    verbose: bool = False


def setup_logging(verbose: bool) -> None:
    logger = logging.getLogger("cemat")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    handler = rich.logging.RichHandler(console=console, show_path=False)
    handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False


def log_to(run_dir: str) -> None:
    """Append the package log to `log.txt` in a run directory."""
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, LOG_FILE), mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.setLevel(logging.DEBUG)
    logging.getLogger("cemat").addHandler(handler)


def config_options(function):
    function = click.option(
        "--seed", type=click.INT, default=None, help="Random seed, overrides the config"
    )(function)
    function = click.option(
        "-s",
        "--set",
        "overrides",
        type=click.STRING,
        default=[],
        multiple=True,
        metavar="KEY=VALUE",
        help="Override a configuration key",
    )(function)
    function = click.option(
        "-c",
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="YAML configuration file",
    )(function)
    return function


def name_option(function):
    return click.option(
        "-n", "--name", type=click.STRING, default=None, help="Run name under the run root"
    )(function)


def resume_option(function):
    return click.option(
        "--resume",
        type=click.BOOL,
        default=False,
        is_flag=True,
        help="Continue from the newest checkpoint of the run",
    )(function)


def load_config(config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> RunConfig:
    values = parse_overrides(overrides)
    if seed is not None:
        values["seed"] = seed
    return RunConfig.load(config_path, values)


def run_directory(settings: Settings, name: Optional[str], default: str, resume: bool = False) -> str:
    """Run directory for a training command; existing checkpoints need `--resume`."""
    path = os.path.join(settings.run_root, name or default)
    if not resume and os.path.isfile(os.path.join(path, "checkpoints", LATEST)):
        raise UsageError(f"Run directory {path} already holds checkpoints; pass --resume or choose another --name")
    log_to(path)
    return path


def bleu_table(report: BleuReport, title: str = "BLEU") -> rich.table.Table:
    table = rich.table.Table(title=title, show_lines=True)
    table.add_column("BLEU", style="bold green", justify="right")
    for n in range(1, len(report.precisions) + 1):
        table.add_column(f"p{n}", style="cyan", justify="right")
    table.add_column("BP", style="magenta", justify="right")
    table.add_column("Hyp len", justify="right")
    table.add_column("Ref len", justify="right")
    table.add_row(*report.as_row())
    return table


@click.group(cls=CematGroup)
@click.option(
    "--run-root",
    type=click.Path(file_okay=False),
    default="runs",
    envvar="CEMAT_RUN_ROOT",
    show_default=True,
    help="Directory holding run directories",
)
@click.option(
    "-v", "--verbose", type=click.BOOL, default=False, is_flag=True, help="Log debug messages"
)
@click.pass_context
def main(ctx, run_root: str, verbose: bool):
    """Conditional masked pre-training for AT and NAT translation."""
    setup_logging(verbose)
    ctx.obj = Settings(run_root, verbose)


@click.command()
def version() -> None:
    """Get cemat version."""
    console.print(f"cemat version {cemat.__version__}")


@click.command(name="make-toy")
@click.argument("directory", type=click.Path(file_okay=False), required=True)
@click.option("--bilingual", type=click.INT, default=1500, show_default=True, help="Pairs per language pair")
@click.option("--monolingual", type=click.INT, default=500, show_default=True, help="Sentences per language")
@click.option("--finetune", type=click.INT, default=300, show_default=True, help="Fine-tuning pairs")
@click.option("--test", type=click.INT, default=200, show_default=True, help="Test pairs")
@click.option(
    "--dictionary-keep", type=click.FLOAT, default=0.3, show_default=True, help="Share of dictionary entries kept"
)
@click.option("--seed", type=click.INT, default=1, show_default=True)
def make_toy(
    directory: str, bilingual: int, monolingual: int, finetune: int, test: int, dictionary_keep: float, seed: int
) -> None:
    """Write the synthetic cipher translation task.

    DIRECTORY receives the corpora, dictionaries, manifest and a starter
    config file `cemat.yaml`.
    """
    try:
        manifest = make_toy_task(
            directory, ToyTaskConfig(bilingual, monolingual, finetune, test, dictionary_keep, seed)
        )
    except ValueError as e:
        raise UsageError(str(e))
    starter = {
        "manifest": os.path.join(directory, "manifest.yaml"),
        "dictionaries": os.path.join(directory, "dict"),
        "vocab": os.path.join(directory, "vocab.txt"),
        "src_lang": "en",
        "tgt_lang": "xa",
    }
    with open(os.path.join(directory, "cemat.yaml"), "w", encoding="utf-8") as file:
        yaml.safe_dump(starter, file, sort_keys=False)
    table = rich.table.Table(title=f"Toy task in {directory}", show_lines=True)
    table.add_column("Corpus", style="cyan")
    table.add_column("Kind", style="magenta")
    table.add_column("Lines", style="green", justify="right")
    for entry in manifest.entries:
        table.add_row(entry.name, entry.kind.value, str(entry.count))
    console.print(table)
    console.print(f"Starter config written to [bold blue]{os.path.join(directory, 'cemat.yaml')}[/]")


@click.command(name="learn-vocab")
@config_options
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None, help="Vocabulary file to write")
def learn_vocab(config_path: Optional[str], overrides: List[str], seed: Optional[int], output: Optional[str]) -> None:
    """Learn the shared subword vocabulary from the training corpora."""
    config = load_config(config_path, overrides, seed)
    Job(kind="learn-vocab", config=config, output=output or "").run()


@click.command()
@config_options
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="JSON lines file to write")
@click.option("--count", type=click.INT, default=1000, show_default=True, help="Examples to write")
def preprocess(
    config_path: Optional[str], overrides: List[str], seed: Optional[int], output: str, count: int
) -> None:
    """Write masked pre-training examples as JSON lines."""
    config = load_config(config_path, overrides, seed)
    source = pretrain_source(config, load_vocab(config))
    stats = MaskingStats()
    with open(output, "w", encoding="utf-8") as file:
        examples = itertools.islice(iter(source), count)
        for example in rich.progress.track(examples, total=count, description="preprocess"):
            file.write(example.to_record() + "\n")
            stats.add(example)
    console.print(
        f"Wrote [bold cyan]{stats.examples}[/] examples to [bold blue]{output}[/] "
        f"(CS coverage {100 * stats.cs_coverage:.1f}%)"
    )


@click.command()
@config_options
@click.option("--count", type=click.INT, default=10000, show_default=True, help="Examples to sample")
@click.option("--bins", type=click.INT, default=10, show_default=True, help="Histogram bins")
def stats(config_path: Optional[str], overrides: List[str], seed: Optional[int], count: int, bins: int) -> None:
    """Report corpus sizes and masking statistics."""
    config = load_config(config_path, overrides, seed)
    source = pretrain_source(config, load_vocab(config))

    corpora = rich.table.Table(title="Pre-training corpora", show_lines=True)
    corpora.add_column("Corpus", style="cyan")
    corpora.add_column("Pairs", style="green", justify="right")
    corpora.add_column("Sampling weight", style="magenta", justify="right")
    for name, weight in zip(source.names, source.weights):
        corpora.add_row(name, str(len(source.corpora[name])), f"{weight:.3f}")
    console.print(corpora)

    masking = MaskingStats()
    for example in rich.progress.track(itertools.islice(iter(source), count), total=count, description="stats"):
        masking.add(example)
    mask, keep, random = masking.corruption_split
    summary = rich.table.Table(title="Masking", show_lines=True)
    summary.add_column("Statistic", style="cyan")
    summary.add_column("Value", style="green", justify="right")
    summary.add_row("Examples", str(masking.examples))
    summary.add_row("CS coverage", f"{100 * masking.cs_coverage:.2f}%")
    summary.add_row("Mean target ratio", f"{sum(masking.upsilons) / max(masking.examples, 1):.4f}")
    summary.add_row("Mean source ratio", f"{sum(masking.mus) / max(masking.examples, 1):.4f}")
    summary.add_row("Corruption mask/keep/random", f"{100 * mask:.1f}% / {100 * keep:.1f}% / {100 * random:.1f}%")
    console.print(summary)

    histogram = rich.table.Table(title="Masking ratio histogram", show_lines=True)
    histogram.add_column("Ratio", style="cyan")
    histogram.add_column("Target", style="green", justify="right")
    histogram.add_column("Source", style="magenta", justify="right")
    target, edges = masking.histogram(masking.upsilons, bins)
    source_counts, _ = masking.histogram(masking.mus, bins)
    for low, high, t, s in zip(edges[:-1], edges[1:], target, source_counts):
        histogram.add_row(f"[{low:.2f}, {high:.2f})", str(int(t)), str(int(s)))
    console.print(histogram)


@click.command()
@config_options
@name_option
@resume_option
@click.pass_obj
def pretrain(
    settings: Settings,
    config_path: Optional[str],
    overrides: List[str],
    seed: Optional[int],
    name: Optional[str],
    resume: bool,
) -> None:
    """Pre-train on the joint conditional and encoder masked objectives."""
    config = load_config(config_path, overrides, seed)
    run_dir = run_directory(settings, name, "pretrain", resume)
    path = Job(kind="pretrain", config=config, run_dir=run_dir, resume=resume, progress=True).run()
    console.print(f"\n[bold green]Pre-training complete![/] Checkpoint: [bold blue]{path}[/]")


def finetune_command(kind: str, summary: str):
    @click.command(name=kind, help=summary)
    @config_options
    @name_option
    @resume_option
    @click.option(
        "--init",
        type=click.STRING,
        default="none",
        show_default=True,
        help="Checkpoint or run directory to start from, or `none`",
    )
    @click.pass_obj
    def command(
        settings: Settings,
        config_path: Optional[str],
        overrides: List[str],
        seed: Optional[int],
        name: Optional[str],
        resume: bool,
        init: str,
    ) -> None:
        config = load_config(config_path, overrides, seed)
        run_dir = run_directory(settings, name, kind, resume)
        init_path = None if init.lower() == "none" else init
        path = Job(kind=kind, config=config, run_dir=run_dir, init=init_path, resume=resume, progress=True).run()
        console.print(f"\n[bold green]Fine-tuning complete![/] Checkpoint: [bold blue]{path}[/]")

    return command


finetune_at = finetune_command("finetune-at", "Fine-tune the causal decoder for autoregressive translation.")
finetune_nat = finetune_command("finetune-nat", "Fine-tune the bidirectional decoder for Mask-Predict translation.")


def translate_command(kind: str, summary: str):
    @click.command(name=kind, help=summary)
    @config_options
    @name_option
    @click.option(
        "--checkpoint", type=click.Path(exists=True), required=True, help="Checkpoint or run directory"
    )
    @click.option(
        "-i",
        "--input",
        "input_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Source sentences, one per line; the test split by default",
    )
    @click.option("-o", "--output", type=click.Path(dir_okay=False), default=None, help="Hypotheses file")
    @click.option(
        "-r",
        "--references",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Reference translations, for scoring and gold lengths",
    )
    @click.option("--beam", type=click.INT, default=None, help="Beam size")
    @click.option("--iterations", type=click.INT, default=None, help="Mask-Predict iterations")
    @click.option(
        "--length-mode", type=click.Choice(("gold", "predicted")), default=None, help="Target length source"
    )
    @click.option(
        "--dump-iterations",
        type=click.Path(dir_okay=False),
        default=None,
        help="JSON lines file receiving every Mask-Predict iteration",
    )
    @click.pass_obj
    def command(
        settings: Settings,
        config_path: Optional[str],
        overrides: List[str],
        seed: Optional[int],
        name: Optional[str],
        checkpoint: str,
        input_path: Optional[str],
        output: Optional[str],
        references: Optional[str],
        beam: Optional[int],
        iterations: Optional[int],
        length_mode: Optional[str],
        dump_iterations: Optional[str],
    ) -> None:
        config = load_config(config_path, overrides, seed)
        changes = dict(beam_size=beam, nat_iterations=iterations, length_mode=length_mode)
        config = config.evolve(**{key: value for key, value in changes.items() if value is not None})
        if dump_iterations and kind != "translate-nat":
            raise UsageError("--dump-iterations only applies to translate-nat")
        run_dir = os.path.join(settings.run_root, name or kind)
        log_to(run_dir)
        job = Job(
            kind=kind,
            config=config,
            run_dir=run_dir,
            checkpoint=checkpoint,
            input=input_path,
            output=output,
            references=references,
            dump=dump_iterations,
            progress=True,
        )
        outputs = job.run()
        console.print(f"Translated [bold cyan]{len(outputs)}[/] sentences into [bold blue]{job.hypotheses_path}[/]")
        if references or not input_path:
            report = Job(
                kind="score-bleu",
                config=config,
                run_dir=run_dir,
                hypotheses=job.hypotheses_path,
                references=job.references_path,
            ).run()
            console.print(bleu_table(report))

    return command


translate_at = translate_command("translate-at", "Translate with beam search over the causal decoder.")
translate_nat = translate_command("translate-nat", "Translate with Mask-Predict over the bidirectional decoder.")


@click.command(name="score-bleu")
@click.argument("hypotheses", type=click.Path(exists=True, dir_okay=False), required=True)
@click.argument("references", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option(
    "--no-smoothing", type=click.BOOL, default=False, is_flag=True, help="Disable add-one smoothing"
)
def score_bleu(hypotheses: str, references: str, no_smoothing: bool) -> None:
    """Score a hypotheses file against a references file.

    Both files hold one whitespace-tokenized sentence per line.
    """
    config = RunConfig(bleu_smoothing=not no_smoothing)
    report = Job(kind="score-bleu", config=config, hypotheses=hypotheses, references=references).run()
    console.print(bleu_table(report))


def parse_ints(value: str, option: str) -> List[int]:
    try:
        numbers = [int(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise UsageError(f"{option} expects comma-separated integers, got {value!r}")
    if not numbers:
        raise UsageError(f"{option} is empty")
    return numbers


@click.command()
@config_options
@name_option
@click.option(
    "--only",
    type=click.STRING,
    default=[],
    multiple=True,
    help="Cells to run: exact name, substring or regular expression",
)
@click.option("--seeds", type=click.STRING, default="1", show_default=True, help="Comma-separated seeds")
@click.pass_obj
def ablate(
    settings: Settings,
    config_path: Optional[str],
    overrides: List[str],
    seed: Optional[int],
    name: Optional[str],
    only: List[str],
    seeds: str,
) -> None:
    """Run the ablation grid: pre-train, fine-tune and score every cell."""
    config = load_config(config_path, overrides, seed)
    cells = cemat.utils.filter(ABLATION_CELLS.keys(), list(only)) if only else list(ABLATION_CELLS)
    if not cells:
        raise UsageError(f"No ablation cell matches {', '.join(only)}")
    seed_list = parse_ints(seeds, "--seeds")
    root = os.path.join(settings.run_root, name or "ablate")
    log_to(root)
    if not config.vocab or not os.path.isfile(config.vocab):
        path = config.vocab or os.path.join(root, "vocab.txt")
        Job(kind="learn-vocab", config=config, output=path).run()
        config = config.evolve(vocab=path)
    config.save(root)
    results = ablation_run(config, root, cells, seed_list, progress=True)

    table = rich.table.Table(title="Ablation", show_lines=True)
    table.add_column("Cell", style="cyan")
    for s in seed_list:
        table.add_column(f"seed {s}", justify="right")
    table.add_column("Mean", style="bold green", justify="right")
    scores = {(r.cell, r.seed): r.bleu for r in results}
    for cell, mean in ablation_means(results).items():
        table.add_row(cell, *[f"{scores[(cell, s)]:.2f}" for s in seed_list], f"{mean:.2f}")
    console.print(table)
    console.print(f"Results written to [bold blue]{os.path.join(root, 'ablation.csv')}[/]")


@click.command(name="iter-curve")
@config_options
@name_option
@click.option(
    "--checkpoint", type=click.Path(exists=True), required=True, help="NAT checkpoint or run directory"
)
@click.option(
    "--iterations", type=click.STRING, default="1,2,4,8", show_default=True, help="Comma-separated iteration counts"
)
@click.option(
    "--length-mode", type=click.Choice(("gold", "predicted")), default=None, help="Target length source"
)
@click.pass_obj
def iter_curve(
    settings: Settings,
    config_path: Optional[str],
    overrides: List[str],
    seed: Optional[int],
    name: Optional[str],
    checkpoint: str,
    iterations: str,
    length_mode: Optional[str],
) -> None:
    """BLEU of Mask-Predict on the test split for several iteration counts."""
    config = load_config(config_path, overrides, seed)
    if length_mode:
        config = config.evolve(length_mode=length_mode)
    counts = parse_ints(iterations, "--iterations")
    run_dir = os.path.join(settings.run_root, name or "iter-curve")
    log_to(run_dir)
    vocab = load_vocab(config)
    loaded = load_checkpoint(checkpoint)
    check_vocab(loaded, vocab)
    pairs = load_pairs(load_manifest(config), config.test_split, config.src_lang, config.tgt_lang, sys.maxsize)
    path = os.path.join(run_dir, "iteration_curve.csv")
    curve = iteration_curve(
        loaded.model(),
        vocab,
        pairs,
        LanguageTag(config.tgt_lang),
        counts,
        config.decode_config(),
        config.bleu_smoothing,
        path,
        progress=True,
    )
    table = rich.table.Table(title=f"Mask-Predict iterations ({config.length_mode} length)", show_lines=True)
    table.add_column("Iterations", style="cyan", justify="right")
    table.add_column("BLEU", style="bold green", justify="right")
    for count, score in curve:
        table.add_row(str(count), f"{score:.2f}")
    console.print(table)
    console.print(f"Curve written to [bold blue]{path}[/]")


main.add_command(version)
main.add_command(make_toy)
main.add_command(learn_vocab)
main.add_command(preprocess)
main.add_command(stats)
main.add_command(pretrain)
main.add_command(finetune_at)
main.add_command(finetune_nat)
main.add_command(translate_at)
main.add_command(translate_nat)
main.add_command(score_bleu)
main.add_command(ablate)
main.add_command(iter_curve)


if __name__ == "__main__":
    main()
