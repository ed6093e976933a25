"""Human-centric multi-task translation model: four modalities, one encoder-decoder."""
from .codecs import Modality, ModalitySample
from .model import HulkModel, ModelConfig
from .tasks import SyntheticDatasetConfig, encode_targets, get_task, synth_generate, task_registry

__all__ = ["Modality", "ModalitySample", "HulkModel", "ModelConfig", "SyntheticDatasetConfig",
           "encode_targets", "get_task", "synth_generate", "task_registry"]
