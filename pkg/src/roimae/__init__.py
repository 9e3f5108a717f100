"""Masked ROI time-series pre-training and fine-tuning for a transformer encoder."""

from ._kernels import BACKEND
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .masking import MaskSpec, MaskStrategy, apply_mask, make_mask, sample_ratio
from .model import ModelConfig, TransformerModel
from .rng import Rng
from .synth import SynthConfig
from .training import FinetuneConfig, PretrainConfig, finetune, pretrain

__version__ = "0.1.0"
