"""capfuse: MLLM-captioned multimodal fine-tuning over frozen embeddings."""

__version__ = "0.1.0"

from .data import CaptionRecord, EmbeddingStore, FewShotSpec, SampleRecord
from .losses import LossConfig, combined_loss
from .training import AdapterParams, TrainConfig, train

__all__ = [
    "AdapterParams",
    "CaptionRecord",
    "EmbeddingStore",
    "FewShotSpec",
    "LossConfig",
    "SampleRecord",
    "TrainConfig",
    "combined_loss",
    "train",
    "__version__",
]
