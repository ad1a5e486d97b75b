"""Joint speaker diarization, separation and counting on a small numpy autograd core."""

from .diarization import binarize, count_speakers
from .inference import InferenceOptions, InferenceResult, align_speakers, fuse, infer
from .model import EENDSS, TOY_CONFIG, ModelConfig
from .tensor import Tensor

__all__ = ["EENDSS", "ModelConfig", "TOY_CONFIG", "Tensor", "infer", "InferenceOptions", "InferenceResult",
           "align_speakers", "fuse", "count_speakers", "binarize"]
__version__ = "0.1.0"
