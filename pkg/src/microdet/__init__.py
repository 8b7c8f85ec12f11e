"""microdet: a desk-scale micro-target detector for ground-to-air scenes.

High-resolution P2 detection, NMS-free dual label assignment, hybrid
orthogonalised-update training and knowledge distillation, trained and
evaluated end to end on a deterministic synthetic dataset.
"""

from microdet.tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "MicroTargetDetector", "__version__"]


def __getattr__(name):
    if name == "MicroTargetDetector":
        from microdet.estimator import MicroTargetDetector
        return MicroTargetDetector
    raise AttributeError(name)
