"""Multi-part prompt learning for cross-modality, cross-platform person re-identification.

Frozen surrogate encoders, identity / modality / platform prompt tokens with a
visual-enhanced meta-network, two-stage contrastive training, and the
12-setting retrieval protocol (CMC and mAP).
"""
from .diffcore import Tensor, backward, finite_diff
from .encoders import EncoderConfig
from .evaluator import ALL_SETTINGS, Setting, evaluate, summarize
from .losses import LossConfig
from .prompts import PromptConfig
from .synthdata import SynthConfig, generate
from .trainer import PRESETS, TrainConfig, UniPromptModel, new_state, train

__all__ = [
    "ALL_SETTINGS", "EncoderConfig", "LossConfig", "PRESETS", "PromptConfig", "Setting",
    "SynthConfig", "Tensor", "TrainConfig", "UniPromptModel", "backward", "evaluate",
    "finite_diff", "generate", "new_state", "summarize", "train",
]
__version__ = "0.1.0"
