"""Raw numpy kernels for 3D cross-correlation and its two adjoints.

These operate on plain ndarrays; the differentiable wrappers live in
:mod:`voxelformer.tensor`.  Layouts: inputs are ``(C, h, w, d)``, kernels are
``(C_out, C_in, k1, k2, k3)``.  All three routines are deterministic and
single-threaded.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kshape, stride: int, padding: int) -> np.ndarray:
    """Strided sliding windows of the padded input, shape (C, h', w', d', k1, k2, k3)."""
    p = padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(x, kshape, axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def conv3d_raw(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int) -> np.ndarray:
    win = _windows(x, kernel.shape[2:], stride, padding)
    return np.einsum("cxyzijk,ocijk->oxyz", win, kernel, optimize=True)


def conv3d_kernel_grad_raw(
    x: np.ndarray, gy: np.ndarray, stride: int, padding: int, kshape
) -> np.ndarray:
    """Gradient of conv3d w.r.t. the kernel; x and gy in forward roles."""
    win = _windows(x, kshape[2:], stride, padding)
    return np.einsum("cxyzijk,oxyz->ocijk", win, gy, optimize=True)


def conv3d_input_grad_raw(
    gy: np.ndarray, kernel: np.ndarray, stride: int, padding: int, x_spatial
) -> np.ndarray:
    """Gradient of conv3d w.r.t. its input: scatter gy back through the kernel.

    Doubles as the forward pass of the transposed convolution.  `x_spatial`
    is the (h, w, d) of the tensor being reconstructed.
    """
    _, ho, wo, do = gy.shape
    cin = kernel.shape[1]
    k1, k2, k3 = kernel.shape[2:]
    h, w, d = x_spatial
    p, s = padding, stride
    gp = np.zeros((cin, h + 2 * p, w + 2 * p, d + 2 * p), dtype=gy.dtype)
    # One fused contraction, then scatter per kernel offset; each strided
    # destination slice is self-disjoint, so += is safe.
    full = np.einsum("oxyz,ocijk->cijkxyz", gy, kernel, optimize=True)
    for i in range(k1):
        for j in range(k2):
            for l in range(k3):
                gp[:, i : i + s * ho : s, j : j + s * wo : s, l : l + s * do : s] += full[
                    :, i, j, l
                ]
    if p:
        gp = gp[:, p : p + h, p : p + w, p : p + d]
    return np.ascontiguousarray(gp)
