"""Masked vision-language pre-training with unimodal and multimodal momentum
contrastive losses, transferred to generative visual question answering."""

__version__ = "0.1.0"

from .config import RunConfig, default_config  # noqa: F401
from .model import MumcModel  # noqa: F401
from .tokenizer import Vocab, build_vocab  # noqa: F401
