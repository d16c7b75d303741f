"""RGB-thermal salient object detection on a small numpy autodiff core.

Submodules: ``tensor`` (autodiff), ``nn`` (layers), ``model`` (the
network), ``losses``, ``metrics``, ``data``, ``checkpoint``, ``engine`` and
``cli``.
"""

from .losses import LossConfig
from .model import ICANet, ModelConfig
from .tensor import Tensor

__all__ = ["ICANet", "LossConfig", "ModelConfig", "Tensor"]
__version__ = "0.1.0"
