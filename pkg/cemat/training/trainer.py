import csv
import logging
import os
import time
from typing import Dict, List, Optional

import attr
import rich.progress

from cemat.errors import DataError, UsageError
from cemat.model.transformer import Transformer
from cemat.tensor.core import backward
from cemat.training.checkpoint import load_checkpoint, save_checkpoint
from cemat.training.objectives import Objective
from cemat.training.optim import Adam, lr_schedule
from cemat.utils.seeding import derive_rng

log = logging.getLogger(__name__)

METRICS = "metrics.csv"


def _check_warmup(instance, attribute, value):
    if value >= instance.total_steps:
        raise UsageError(f"warmup_steps {value} must be smaller than total_steps {instance.total_steps}")


@attr.s(auto_attribs=True, frozen=True)
class TrainConfig:
    lr_peak: float = attr.ib(default=5e-4, converter=float)
    warmup_steps: int = attr.ib(default=400, converter=int, validator=_check_warmup)
    total_steps: int = attr.ib(default=20000, converter=int)
    decay_power: float = attr.ib(default=1.0, converter=float)
    beta1: float = attr.ib(default=0.9, converter=float)
    beta2: float = attr.ib(default=0.98, converter=float)
    adam_eps: float = attr.ib(default=1e-6, converter=float)
    clip_norm: float = attr.ib(default=0.0, converter=float)
    batch_tokens: int = attr.ib(default=2048, converter=int)
    update_frequency: int = attr.ib(default=1, converter=int)
    checkpoint_every: int = attr.ib(default=1000, converter=int)
    log_every: int = attr.ib(default=100, converter=int)
    seed: int = attr.ib(default=1, converter=int)

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.lr_peak, self.warmup_steps, self.total_steps, self.decay_power)

    def optimizer(self) -> Adam:
        return Adam(self.beta1, self.beta2, self.adam_eps, self.clip_norm)


class Trainer:
    """Runs updates of one objective on one model and records them in a run directory.

    Batches and dropout masks are keyed by `(seed, step, micro-batch)`, so a
    run resumed from a checkpoint continues exactly as the uninterrupted run.
    """

    def __init__(
        self,
        model: Transformer,
        objective: Objective,
        source,
        config: TrainConfig,
        run_dir: str,
        extra: Optional[Dict] = None,
    ):
        self.model = model
        self.objective = objective
        self.source = source
        self.config = config
        self.run_dir = run_dir
        self.extra = extra or {}
        self.optimizer = config.optimizer()
        self.step = 0
        os.makedirs(run_dir, exist_ok=True)

    def resume(self) -> int:
        """Restore the newest checkpoint of the run directory, if any."""
        try:
            checkpoint = load_checkpoint(self.run_dir)
        except DataError:
            log.info("No checkpoint in %s, starting from scratch", self.run_dir)
            return 0
        self.model.load_state_dict(checkpoint.params())
        checkpoint.restore_optimizer(self.optimizer)
        self.step = checkpoint.step
        self._truncate_metrics(self.step)
        log.info("Resumed from %s at step %d", checkpoint.path, self.step)
        return self.step

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.run_dir, METRICS)

    def _truncate_metrics(self, step: int) -> None:
        if not os.path.isfile(self.metrics_path):
            return
        with open(self.metrics_path, "r", encoding="utf-8", newline="") as file:
            rows = list(csv.reader(file))
        kept = [rows[0]] + [row for row in rows[1:] if int(row[0]) <= step]
        with open(self.metrics_path, "w", encoding="utf-8", newline="") as file:
            csv.writer(file).writerows(kept)

    def _write_metrics(self, row: Dict[str, object]) -> None:
        new = not os.path.isfile(self.metrics_path)
        with open(self.metrics_path, "a", encoding="utf-8", newline="") as file:
            writer = csv.DictWriter(file, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)

    def update(self) -> Dict[str, object]:
        """One optimizer update over `update_frequency` micro-batches."""
        config = self.config
        inputs = []
        for micro in range(config.update_frequency):
            batch = self.source.batch(self.step, config.batch_tokens, micro)
            inputs.append(self.objective.prepare(batch, derive_rng(config.seed, "prepare", self.step, micro)))
        totals: Dict[str, int] = {}
        for item in inputs:
            for key, count in item.counts.items():
                totals[key] = totals.get(key, 0) + count

        self.model.zero_grad()
        loss = 0.0
        components: Dict[str, float] = {}
        for micro, item in enumerate(inputs):
            output = self.objective.loss(
                self.model, item, True, derive_rng(config.seed, "dropout", self.step, micro), totals
            )
            backward(output.loss)
            loss += output.loss.item()
            for key, value in output.components.items():
                components[key] = components.get(key, 0.0) + value

        lr = config.lr(self.step + 1)
        applied = self.optimizer.apply(self.model.params, lr)
        self.step += 1
        row: Dict[str, object] = {"step": self.step, "lr": f"{lr:.8g}", "loss": f"{loss:.6f}"}
        row.update({key: f"{value:.6f}" for key, value in components.items()})
        row["tokens"] = sum(item.tokens for item in inputs)
        row["applied"] = int(applied)
        return row

    def run(self, steps: Optional[int] = None, progress: bool = True) -> List[Dict[str, object]]:
        """Train until `total_steps` (or `steps` more updates) and checkpoint."""
        config = self.config
        target = config.total_steps if steps is None else min(config.total_steps, self.step + steps)
        rows = []
        columns = (
            rich.progress.TextColumn("[bold blue]{task.description}"),
            rich.progress.BarColumn(),
            rich.progress.TextColumn("{task.completed}/{task.total}"),
            rich.progress.TextColumn("loss {task.fields[loss]}"),
            rich.progress.TimeRemainingColumn(),
        )
        with rich.progress.Progress(*columns, disable=not progress, transient=True) as bar:
            task = bar.add_task(self.objective.kind, total=target, completed=self.step, loss="-")
            started, tokens = time.perf_counter(), 0
            while self.step < target:
                row = self.update()
                self._write_metrics(row)
                rows.append(row)
                tokens += int(row["tokens"])
                bar.update(task, advance=1, loss=row["loss"])
                if self.step % config.log_every == 0 or self.step == target:
                    elapsed = max(time.perf_counter() - started, 1e-9)
                    log.info(
                        "step %d lr %s loss %s (%.0f tokens/sec)", self.step, row["lr"], row["loss"], tokens / elapsed
                    )
                    started, tokens = time.perf_counter(), 0
                if self.step % config.checkpoint_every == 0 and self.step != target:
                    self.save()
        self.save()
        return rows

    def save(self) -> str:
        return save_checkpoint(self.run_dir, self.step, self.model, self.optimizer, self.extra)
