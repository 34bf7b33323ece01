"""Kernel graph attention for claim verification, in plain numpy."""

from .config import Config, load_config
from .data import ClaimInstance, EvidenceSentence, Label, Vocabulary, generate_synthetic, load_dataset
from .kernels import KernelBank, default_bank
from .model import KGAT, AblationMode, batch_graphs, build_graph

__all__ = [
    "AblationMode",
    "ClaimInstance",
    "Config",
    "EvidenceSentence",
    "KGAT",
    "KernelBank",
    "Label",
    "Vocabulary",
    "batch_graphs",
    "build_graph",
    "default_bank",
    "generate_synthetic",
    "load_config",
    "load_dataset",
]
