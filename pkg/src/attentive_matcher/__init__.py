"""Relational one-shot character matching with self- and cross-attention."""

from .config import ModelConfig, RunConfig, TrainConfig, preset
from .model import AttentiveMatcher, TemplateMatcher

__all__ = ["AttentiveMatcher", "TemplateMatcher", "ModelConfig", "TrainConfig", "RunConfig", "preset"]
__version__ = "0.1.0"
