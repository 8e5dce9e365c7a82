"""Block-based compressed sensing with physics-guided unrolled networks.

Public surface: the differentiable tensor core (:mod:`unrollcs.tensor`),
block sampling physics (:mod:`unrollcs.physics`), unrolled reconstruction
models (:mod:`unrollcs.models`), a classical iterative baseline
(:mod:`unrollcs.baseline`), the training harness (:mod:`unrollcs.training`),
image I/O and quality metrics (:mod:`unrollcs.evalio`), and the ``unrollcs``
command line (:mod:`unrollcs.cli`).
"""

__version__ = "0.1.0"

from .tensor import Tensor, concat, conv2d, grad_check, pixel_shuffle, pixel_unshuffle

__all__ = [
    "Tensor",
    "concat",
    "conv2d",
    "grad_check",
    "pixel_shuffle",
    "pixel_unshuffle",
    "__version__",
]
