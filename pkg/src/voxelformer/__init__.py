"""voxelformer: 3D volumetric transformer segmentation, verifiable at desk scale.

A small numpy/scipy stack: a from-scratch tensor engine with reverse-mode
differentiation, a patch tokenizer, a fused-head attention encoder, a
convolution/attention decoder, segmentation metrics, a synthetic phantom
generator, and a deterministic trainer.
"""

from .tensor import (
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    TensorError,
    concat,
    conv3d,
    conv3d_transpose,
    finite_diff_check,
    gelu,
    layernorm,
    matmul,
    relu,
    softmax,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "NumericError",
    "TapeError",
    "matmul",
    "concat",
    "conv3d",
    "conv3d_transpose",
    "layernorm",
    "softmax",
    "relu",
    "gelu",
    "finite_diff_check",
    "__version__",
]
