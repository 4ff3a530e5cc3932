"""ResMLP image classifiers and sequence models on a small numpy autodiff engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_config, parse_config
from .fusion import FusedVisionModel, fuse_affine
from .seq2seq import Seq2SeqConfig, Seq2SeqModel, beam_search, greedy_decode
from .tensor import GradientTape, Tensor, backward
from .training import TrainConfig, evaluate, fit
from .vision import ModelConfig, VisionModel, count_flops, count_params, preset

__version__ = "0.1.0"

__all__ = [
    "GradientTape", "Tensor", "backward",
    "ModelConfig", "VisionModel", "count_flops", "count_params", "preset",
    "FusedVisionModel", "fuse_affine",
    "TrainConfig", "evaluate", "fit",
    "Seq2SeqConfig", "Seq2SeqModel", "beam_search", "greedy_decode",
    "load_checkpoint", "save_checkpoint",
    "RunConfig", "format_config", "parse_config",
]
