"""BCDU-Net segmentation kit built from scratch on numpy.

Modules:
    tensor    autodiff tensors and the core spatial ops
    nn        parameterized layers (conv blocks, ConvLSTM, batch norm)
    model     the full encoder/decoder assembly
    train     loss, optimizers, training loop with early stopping
    metrics   confusion-based scores, ROC and AUC
    data      images, masks, patches, synthetic sets, PGM/BT1 files
    gradcheck finite-difference verification suite
    cli       command-line entry point
"""

from .model import Model, ModelConfig, PRESETS, build, load_model
from .tensor import Tensor, no_grad

__all__ = ["Model", "ModelConfig", "PRESETS", "Tensor", "build", "load_model", "no_grad"]
__version__ = "0.1.0"
