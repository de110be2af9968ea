"""Multi-task EEG gaze transformer on a small numpy autodiff core."""
from .tensor import Parameter, Tensor, backward, no_grad
from .rng import RngStream
from .model import ModelConfig, ModelOutput, MTLTransformer

__version__ = "0.1.0"
