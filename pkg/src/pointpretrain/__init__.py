"""Multi-view point cloud pretraining: unified-frame fusion, masked patch
autoencoding, and contrastive alignment against precomputed teacher
embeddings, with frozen-feature probes for representation quality."""

__version__ = "0.1.0"

from . import autodiff, checkpoint, datagen, geometry, losses, model, patching, training

__all__ = [
    "autodiff", "checkpoint", "datagen", "geometry", "losses", "model",
    "patching", "training", "__version__",
]
