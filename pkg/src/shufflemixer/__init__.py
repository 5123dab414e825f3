"""3D Shuffle-Mixer: a local vision transformer-MLP for volumetric dense prediction.

Pure numpy reverse-mode autodiff, the Shuffle-Mixer block and pyramid
network, volumetric metrics, an analytic complexity auditor and a CLI.
"""

from .network import DESK_CONFIG, DEFAULT_CONFIG, TINY_CONFIG, PyramidConfig, ShuffleMixerNet, build_model
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "DESK_CONFIG",
    "DEFAULT_CONFIG",
    "TINY_CONFIG",
    "PyramidConfig",
    "ShuffleMixerNet",
    "Tensor",
    "backward",
    "build_model",
    "no_grad",
]
