from cemat.model.transformer import (
    EncoderOutput,
    ModelConfig,
    Transformer,
    expected_parameter_count,
    pad_batch,
    sinusoidal_positions,
)

__all__ = [
    "EncoderOutput",
    "ModelConfig",
    "Transformer",
    "expected_parameter_count",
    "pad_batch",
    "sinusoidal_positions",
]
