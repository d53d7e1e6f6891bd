"""Experiment reporting: the ablation grid and Mask-Predict iteration curves."""

import csv
import logging
import os
import re
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import attr

from cemat.configuration.configuration import RunConfig
from cemat.configuration.jobs import Job, Scenario
from cemat.data.corpus import LanguageTag, SentencePair
from cemat.data.vocab import Vocabulary
from cemat.decoding.hypothesis import DecodeConfig
from cemat.decoding.translate import translate
from cemat.errors import UsageError
from cemat.evaluation.bleu import bleu
from cemat.model.transformer import Transformer

log = logging.getLogger(__name__)

ABLATION_CELLS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "w/o aligned cs": {"code_switch": False},
    "w/o dynamic (0.15)": {"dynamic": False, "fixed_ratio": 0.15},
    "w/o dynamic (0.35)": {"dynamic": False, "fixed_ratio": 0.35},
    "w/o aligned cs & dynamic": {"code_switch": False, "dynamic": False, "fixed_ratio": 0.15},
    "w/ bilingual": {"regime": "bilingual"},
    "w/ monolingual": {"regime": "monolingual"},
    "scratch": {"pretrain_steps": 0},
}


@attr.s(auto_attribs=True, frozen=True)
class AblationResult:
    cell: str
    seed: int
    bleu: float


CellRunner = Callable[[str, RunConfig, str, bool], float]


def slug(name: str) -> str:
    """Directory-safe cell name: `w/o dynamic (0.15)` -> `w-o-dynamic-0-15`."""
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def cell_scenario(name: str, config: RunConfig, directory: str, progress: bool = False) -> Scenario:
    """Pre-train (unless the cell has no pre-training), fine-tune AT, translate the test split, score it."""
    jobs: List[Job] = []
    init = None
    if config.pretrain_steps > 0:
        init = os.path.join(directory, "pretrain")
        jobs.append(Job(kind="pretrain", config=config, run_dir=init, resume=True, progress=progress))
    finetune = os.path.join(directory, "finetune-at")
    jobs.append(Job(kind="finetune-at", config=config, run_dir=finetune, init=init, resume=True, progress=progress))
    translate_job = Job(
        kind="translate-at", config=config, run_dir=os.path.join(directory, "translate-at"), checkpoint=finetune
    )
    jobs.append(translate_job)
    jobs.append(
        Job(
            kind="score-bleu",
            config=config,
            run_dir=translate_job.run_dir,
            hypotheses=translate_job.hypotheses_path,
            references=translate_job.references_path,
        )
    )
    return Scenario(name, jobs, description=f"{name} with seed {config.seed}")


def run_cell(name: str, config: RunConfig, directory: str, progress: bool = False) -> float:
    report = cell_scenario(name, config, directory, progress).run()[-1]
    return report.bleu


def ablation_run(
    config: RunConfig,
    root: str,
    cells: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = (1,),
    runner: CellRunner = run_cell,
    progress: bool = False,
) -> List[AblationResult]:
    """Run every cell of the grid with every seed and write `ablation.csv` into `root`.

    Each cell applies its overrides on top of `config`; runs live under
    `<root>/<cell>/seed_<n>/`.
    """
    cells = list(cells) if cells else list(ABLATION_CELLS)
    for name in cells:
        if name not in ABLATION_CELLS:
            raise UsageError(f"Unknown ablation cell {name!r}")
    if not seeds:
        raise UsageError("An ablation needs at least one seed")
    results = []
    for name in cells:
        for seed in seeds:
            cell_config = config.evolve(seed=seed, **ABLATION_CELLS[name])
            directory = os.path.join(root, slug(name), f"seed_{seed}")
            score = runner(name, cell_config, directory, progress)
            log.info("Ablation cell %s seed %d: BLEU %.2f", name, seed, score)
            results.append(AblationResult(name, seed, float(score)))
    write_ablation(os.path.join(root, "ablation.csv"), results)
    return results


def ablation_means(results: Sequence[AblationResult]) -> Dict[str, float]:
    scores: Dict[str, List[float]] = {}
    for result in results:
        scores.setdefault(result.cell, []).append(result.bleu)
    return {cell: sum(values) / len(values) for cell, values in scores.items()}


def write_ablation(path: str, results: Sequence[AblationResult]) -> None:
    """CSV of `cell,seed,bleu` rows followed by one `mean` row per cell."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["cell", "seed", "bleu"])
        for result in results:
            writer.writerow([result.cell, result.seed, f"{result.bleu:.2f}"])
        for cell, mean in ablation_means(results).items():
            writer.writerow([cell, "mean", f"{mean:.2f}"])


def iteration_curve(
    model: Transformer,
    vocab: Vocabulary,
    pairs: Sequence[SentencePair],
    tgt_lang: LanguageTag,
    iterations: Sequence[int],
    config: DecodeConfig,
    smoothing: bool = True,
    path: Optional[str] = None,
    progress: bool = False,
) -> List[Tuple[int, float]]:
    """BLEU of Mask-Predict on `pairs` for each iteration count."""
    if not iterations:
        raise UsageError("No iteration counts given")
    sources = [pair.src for pair in pairs]
    gold = [pair.tgt for pair in pairs]
    references = [" ".join(pair.tgt.words) for pair in pairs]
    curve = []
    for count in iterations:
        outputs = translate(
            model, vocab, sources, tgt_lang, "nat", attr.evolve(config, nat_iterations=count), gold, progress=progress
        )
        curve.append((int(count), bleu(outputs, references, smoothing).bleu))
    drops = [(a, b) for (a, x), (b, y) in zip(curve, curve[1:]) if y < x]
    if drops:
        log.info("BLEU drops between iteration counts %s", ", ".join(f"{a}->{b}" for a, b in drops))
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file)
            writer.writerow(["iterations", "bleu"])
            for count, score in curve:
                writer.writerow([count, f"{score:.2f}"])
    return curve
