"""Multimodal recurrent neural network for image captioning and retrieval."""

from .corpus import Vocabulary, build_vocabulary, encode_caption, tokenize
from .model import MRnnConfig, Parameters, Variant, forward_sentence, init_parameters

__all__ = [
    "MRnnConfig",
    "Parameters",
    "Variant",
    "Vocabulary",
    "build_vocabulary",
    "encode_caption",
    "forward_sentence",
    "init_parameters",
    "tokenize",
]
