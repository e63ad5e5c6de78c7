"""Multimodal dialogue transformer with response, video-feature and caption objectives."""
from .autodiff import Tape, Tensor, backward, grad_check
from .corpus import DialogueSample, SyntheticSpec, generate_synthetic, load_dataset
from .generation import DecodeConfig, Setting, respond
from .metrics import score_all
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .text import Vocab, build_vocab, tokenize
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"
