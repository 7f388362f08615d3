from tppkit.models.model import (
    CLI_MODEL_NAMES,
    DecoderConfig,
    EncoderConfig,
    MarkDistribution,
    ModelConfig,
    NeuralTppModel,
    load_checkpoint,
    pad_batch,
    save_checkpoint,
)
from tppkit.models.encoder import temporal_encoding

__all__ = [
    "CLI_MODEL_NAMES",
    "DecoderConfig",
    "EncoderConfig",
    "MarkDistribution",
    "ModelConfig",
    "NeuralTppModel",
    "load_checkpoint",
    "pad_batch",
    "save_checkpoint",
    "temporal_encoding",
]
