import logging
import os
from typing import Any, Dict, Mapping, Optional, Sequence

import attr
import yaml
from config import ConfigurationSet, config_from_dict, config_from_yaml

from cemat.data.masking import MaskingPolicy
from cemat.data.vocab import BalancingPolicy
from cemat.decoding.hypothesis import DecodeConfig
from cemat.errors import DataError, UsageError
from cemat.model.transformer import ModelConfig
from cemat.training.batching import REGIMES
from cemat.training.trainer import TrainConfig
from cemat.utils.converters import to_bool, to_floats, to_range

log = logging.getLogger(__name__)

SNAPSHOT = "config.yaml"


def _check_regime(instance, attribute, value):
    if value not in REGIMES:
        raise UsageError(f"regime must be one of {', '.join(REGIMES)}, got {value}")


def _check_positions(instance, attribute, value):
    if value < instance.max_length + 2:
        raise ValueError(
            f"max_positions {value} cannot hold max_length {instance.max_length} plus the language tag and eos"
        )


@attr.s(auto_attribs=True, frozen=True)
class RunConfig:
    """Every setting of a run, flat.

    Values are merged from `--set key=value` flags, a YAML file and the
    defaults below, in that order of precedence. Converters coerce strings
    coming from flags, so `--set dynamic=false` works as expected.
    """

    seed: int = attr.ib(default=1, converter=int)

    # Data
    manifest: str = attr.ib(default="", converter=str)
    vocab: str = attr.ib(default="", converter=str)
    dictionaries: str = attr.ib(default="", converter=str)
    max_length: int = attr.ib(default=128, converter=int)
    vocab_size: int = attr.ib(default=4096, converter=int)
    vocab_sample: int = attr.ib(default=0, converter=int)
    min_frequency: int = attr.ib(default=2, converter=int)
    balancing_temperature: float = attr.ib(default=0.7, converter=float)
    regime: str = attr.ib(default="both", converter=str, validator=_check_regime)
    src_lang: str = attr.ib(default="en", converter=str)
    tgt_lang: str = attr.ib(default="xa", converter=str)
    finetune_split: str = attr.ib(default="finetune", converter=str)
    test_split: str = attr.ib(default="test", converter=str)

    # Masking
    cs_ratio_bilingual: float = attr.ib(default=0.15, converter=float)
    cs_ratio_mono: float = attr.ib(default=0.30, converter=float)
    dm_tgt_range_bilingual: tuple = attr.ib(default=(0.2, 0.5), converter=to_range)
    dm_src_range_bilingual: tuple = attr.ib(default=(0.1, 0.2), converter=to_range)
    dm_range_mono: tuple = attr.ib(default=(0.3, 0.4), converter=to_range)
    corruption: tuple = attr.ib(default=(0.8, 0.1, 0.1), converter=to_floats)
    dynamic: bool = attr.ib(default=True, converter=to_bool)
    fixed_ratio: float = attr.ib(default=0.15, converter=float)
    code_switch: bool = attr.ib(default=True, converter=to_bool)

    # Model
    enc_layers: int = attr.ib(default=2, converter=int)
    dec_layers: int = attr.ib(default=2, converter=int)
    model_dim: int = attr.ib(default=64, converter=int)
    heads: int = attr.ib(default=4, converter=int)
    ffn_dim: int = attr.ib(default=256, converter=int)
    dropout: float = attr.ib(default=0.1, converter=float)
    max_positions: int = attr.ib(default=256, converter=int, validator=_check_positions)
    tie_embeddings: bool = attr.ib(default=True, converter=to_bool)
    learned_positions: bool = attr.ib(default=False, converter=to_bool)
    length_offsets: int = attr.ib(default=20, converter=int)

    # Training
    lam: float = attr.ib(default=0.7, converter=float)
    lr_peak: float = attr.ib(default=5e-4, converter=float)
    warmup_steps: int = attr.ib(default=400, converter=int)
    pretrain_steps: int = attr.ib(default=20000, converter=int)
    finetune_steps: int = attr.ib(default=4000, converter=int)
    decay_power: float = attr.ib(default=1.0, converter=float)
    beta1: float = attr.ib(default=0.9, converter=float)
    beta2: float = attr.ib(default=0.98, converter=float)
    adam_eps: float = attr.ib(default=1e-6, converter=float)
    clip_norm: float = attr.ib(default=0.0, converter=float)
    label_smoothing: float = attr.ib(default=0.0, converter=float)
    at_label_smoothing: float = attr.ib(default=0.2, converter=float)
    nat_label_smoothing: float = attr.ib(default=0.0, converter=float)
    length_loss_weight: float = attr.ib(default=0.1, converter=float)
    batch_tokens: int = attr.ib(default=2048, converter=int)
    update_frequency: int = attr.ib(default=1, converter=int)
    checkpoint_every: int = attr.ib(default=1000, converter=int)
    log_every: int = attr.ib(default=100, converter=int)

    # Decoding and scoring
    beam_size: int = attr.ib(default=5, converter=int)
    length_penalty: float = attr.ib(default=1.0, converter=float)
    max_len_ratio: float = attr.ib(default=2.0, converter=float)
    max_len_offset: int = attr.ib(default=10, converter=int)
    nat_iterations: int = attr.ib(default=10, converter=int)
    nat_length_candidates: int = attr.ib(default=1, converter=int)
    length_mode: str = attr.ib(default="predicted", converter=str)
    bleu_smoothing: bool = attr.ib(default=True, converter=to_bool)

    @classmethod
    def keys(cls) -> Sequence[str]:
        return [field.name for field in attr.fields(cls)]

    @classmethod
    def defaults(cls) -> Dict[str, Any]:
        return cls().as_dict()

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """Merge overrides, the YAML file at `path` and the defaults.

        Raises:
            UsageError: on an unknown key or a value of the wrong type.
            DataError: if the file is missing or is not a YAML mapping.
        """
        overrides = {str(key).lower(): value for key, value in (overrides or {}).items()}
        _check_keys(overrides, "--set")
        sources = [config_from_dict(overrides)]
        if path:
            try:
                with open(path, "r", encoding="utf-8") as file:
                    raw = yaml.safe_load(file)
            except FileNotFoundError:
                raise DataError(f"Config file not found: {path}")
            except yaml.YAMLError as e:
                raise DataError(f"Malformed config file {path}: {e}")
            if raw is not None:
                if not isinstance(raw, dict):
                    raise DataError(f"Config file {path} must hold a mapping of keys to values")
                _check_keys({str(key).lower(): value for key, value in raw.items()}, path)
                sources.append(config_from_yaml(path, read_from_file=True, lowercase_keys=True))
        sources.append(config_from_dict(cls.defaults()))
        merged = ConfigurationSet(*sources)
        values = {key: merged[key] for key in cls.keys()}
        try:
            config = cls(**values)
        except (TypeError, ValueError) as e:
            raise UsageError(f"Invalid configuration: {e}")
        log.debug("Loaded configuration from %s with %d overrides", path or "defaults", len(overrides))
        return config

    def evolve(self, **changes) -> "RunConfig":
        _check_keys(changes, "override")
        try:
            return attr.evolve(self, **changes)
        except (TypeError, ValueError) as e:
            raise UsageError(f"Invalid configuration: {e}")

    def as_dict(self) -> Dict[str, Any]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in attr.asdict(self).items()}

    def save(self, directory: str) -> str:
        """Snapshot the configuration into a run directory."""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, SNAPSHOT)
        with open(path, "w", encoding="utf-8") as file:
            yaml.safe_dump(self.as_dict(), file, sort_keys=False, default_flow_style=None)
        return path

    def masking_policy(self) -> MaskingPolicy:
        try:
            return MaskingPolicy(
                cs_ratio_bilingual=self.cs_ratio_bilingual,
                cs_ratio_mono=self.cs_ratio_mono,
                dm_tgt_range_bilingual=self.dm_tgt_range_bilingual,
                dm_src_range_bilingual=self.dm_src_range_bilingual,
                dm_range_mono=self.dm_range_mono,
                corruption=self.corruption,
                dynamic=self.dynamic,
                fixed_ratio=self.fixed_ratio,
                code_switch=self.code_switch,
            )
        except ValueError as e:
            raise UsageError(f"Invalid masking settings: {e}")

    def balancing_policy(self) -> BalancingPolicy:
        try:
            return BalancingPolicy(self.balancing_temperature)
        except ValueError as e:
            raise UsageError(f"Invalid balancing settings: {e}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        try:
            return ModelConfig(
                vocab_size=vocab_size,
                enc_layers=self.enc_layers,
                dec_layers=self.dec_layers,
                model_dim=self.model_dim,
                heads=self.heads,
                ffn_dim=self.ffn_dim,
                dropout=self.dropout,
                max_positions=self.max_positions,
                tie_embeddings=self.tie_embeddings,
                learned_positions=self.learned_positions,
                length_offsets=self.length_offsets,
            )
        except ValueError as e:
            raise UsageError(f"Invalid model settings: {e}")

    def train_config(self, steps: int) -> TrainConfig:
        """Optimizer settings for a run of `steps` updates.

        Warmup is shortened to fit runs shorter than `warmup_steps`.
        """
        if steps < 1:
            raise UsageError(f"A training run needs at least one step, got {steps}")
        warmup = min(self.warmup_steps, steps - 1)
        if warmup < self.warmup_steps:
            log.warning("warmup_steps %d cut to %d for a %d-step run", self.warmup_steps, warmup, steps)
        return TrainConfig(
            lr_peak=self.lr_peak,
            warmup_steps=warmup,
            total_steps=steps,
            decay_power=self.decay_power,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            clip_norm=self.clip_norm,
            batch_tokens=self.batch_tokens,
            update_frequency=self.update_frequency,
            checkpoint_every=self.checkpoint_every,
            log_every=self.log_every,
            seed=self.seed,
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            beam_size=self.beam_size,
            length_penalty=self.length_penalty,
            max_len_ratio=self.max_len_ratio,
            max_len_offset=self.max_len_offset,
            nat_iterations=self.nat_iterations,
            nat_length_candidates=self.nat_length_candidates,
            length_mode=self.length_mode,
        )


def _check_keys(values: Mapping[str, Any], origin: str) -> None:
    known = set(RunConfig.keys())
    for key in values:
        if key not in known:
            raise UsageError(f"Unknown configuration key {key!r} in {origin}")


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    """Turn `key=value` flags into a mapping."""
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"Expected key=value, got {item!r}")
        overrides[key.strip().lower()] = value.strip()
    return overrides
