from .checkpoint import fingerprint, load_checkpoint, save_checkpoint
from .layers import cross_entropy, relu, softmax
from .model import (ArchitectureError, LayerSpec, NetworkModel, backward, extract_features, forward,
                    minibn_body)

__all__ = [
    "ArchitectureError", "LayerSpec", "NetworkModel", "backward", "cross_entropy", "extract_features",
    "fingerprint", "forward", "load_checkpoint", "minibn_body", "relu", "save_checkpoint", "softmax",
]
