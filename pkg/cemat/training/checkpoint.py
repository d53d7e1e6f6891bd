"""Checkpoint directories.

    <run>/checkpoints/step_<n>/manifest.yaml   step, model config, vocabulary digest, ...
    <run>/checkpoints/step_<n>/params.bin      named parameter arrays
    <run>/checkpoints/step_<n>/optimizer.bin   Adam moments
    <run>/checkpoints/latest                   name of the newest step directory
"""

import logging
import os
from typing import Any, Dict, Optional

import attr
import numpy as np
import yaml

from cemat.errors import DataError
from cemat.model.transformer import ModelConfig, Transformer
from cemat.tensor.io import load_arrays, save_arrays
from cemat.training.optim import Adam

log = logging.getLogger(__name__)

LATEST = "latest"


@attr.s(auto_attribs=True)
class Checkpoint:
    path: str
    manifest: Dict[str, Any]

    @property
    def step(self) -> int:
        return int(self.manifest["step"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.manifest["model"])

    @property
    def vocab_digest(self) -> str:
        return self.manifest.get("vocab_digest", "")

    def params(self):
        return load_arrays(os.path.join(self.path, "params.bin"))

    def model(self) -> Transformer:
        config = self.model_config
        model = Transformer.init(config, np.random.default_rng(0))
        model.load_state_dict(self.params())
        return model

    def restore_optimizer(self, optimizer: Adam) -> None:
        optimizer.load_state_dict(
            load_arrays(os.path.join(self.path, "optimizer.bin")),
            int(self.manifest.get("optimizer_step", self.step)),
            int(self.manifest.get("skipped", 0)),
        )


def save_checkpoint(
    run_dir: str,
    step: int,
    model: Transformer,
    optimizer: Optional[Adam] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    directory = os.path.join(run_dir, "checkpoints")
    name = f"step_{step}"
    path = os.path.join(directory, name)
    os.makedirs(path, exist_ok=True)
    manifest = {"step": step, "model": model.config.as_dict()}
    if optimizer is not None:
        manifest.update(optimizer_step=optimizer.step, skipped=optimizer.skipped)
    manifest.update(extra or {})
    save_arrays(os.path.join(path, "params.bin"), model.state_dict())
    if optimizer is not None:
        save_arrays(os.path.join(path, "optimizer.bin"), optimizer.state_dict())
    with open(os.path.join(path, "manifest.yaml"), "w", encoding="utf-8") as file:
        yaml.safe_dump(manifest, file, sort_keys=False)
    with open(os.path.join(directory, LATEST), "w", encoding="utf-8") as file:
        file.write(name + "\n")
    log.info("Saved checkpoint %s", path)
    return path


def resolve_checkpoint(path: str) -> str:
    """Accept a step directory, a checkpoints directory or a run directory."""
    for candidate in (path, os.path.join(path, "checkpoints")):
        if os.path.isfile(os.path.join(candidate, "manifest.yaml")):
            return candidate
        pointer = os.path.join(candidate, LATEST)
        if os.path.isfile(pointer):
            with open(pointer, "r", encoding="utf-8") as file:
                return os.path.join(candidate, file.read().strip())
    raise DataError(f"No checkpoint found at {path}")


def load_checkpoint(path: str) -> Checkpoint:
    path = resolve_checkpoint(path)
    try:
        with open(os.path.join(path, "manifest.yaml"), "r", encoding="utf-8") as file:
            manifest = yaml.safe_load(file)
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"Unreadable checkpoint manifest in {path}: {e}")
    return Checkpoint(path, manifest)
