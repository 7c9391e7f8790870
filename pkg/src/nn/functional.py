# src/nn/functional.py
"""
Dense forward math for the RoI head. Arrays are plain numpy; computation runs in
float64 and callers cast to float32 at file boundaries.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.utils.errors import ShapeError


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    y = x Wᵀ + b over the last axis; W is (out, in), b is (out,), x is (..., in).
    Row permutations of x permute y exactly.
    """
    W, b, x = _f64(W), _f64(b), _f64(x)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ShapeError(f"affine weights must be (out, in) and (out,), got {W.shape} and {b.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight width {W.shape[1]}")
    return np.einsum("...i,oi->...o", x, W) + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(_f64(x), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(_f64(x))


def global_avg_pool(v: np.ndarray) -> np.ndarray:
    """(C, D, H, W) -> (C,) per-channel mean over all spatial cells."""
    v = _f64(v)
    if v.ndim != 4 or v[0].size == 0:
        raise ShapeError(f"expected a non-empty (C, D, H, W) volume, got {v.shape}")
    return v.reshape(v.shape[0], -1).mean(axis=1)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"({size} + 2*{padding} - {kernel}) / {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def _windows(v: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        v = np.pad(v, ((0, 0), (padding, padding), (padding, padding), (padding, padding)))
    win = sliding_window_view(v, (k, k, k), axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def conv3d_forward(
    kernel: np.ndarray,
    bias: Optional[np.ndarray],
    v: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """
    Dense 3-D cross-correlation. kernel (Cout, Cin, k, k, k), v (Cin, D, H, W)
    -> (Cout, D', H', W'). Empty cells are plain zeros.
    """
    kernel, v = _f64(kernel), _f64(v)
    if kernel.ndim != 5 or len(set(kernel.shape[2:])) != 1:
        raise ShapeError(f"kernel must be (Cout, Cin, k, k, k), got {kernel.shape}")
    if v.ndim != 4 or v.shape[0] != kernel.shape[1]:
        raise ShapeError(f"volume {v.shape} does not match kernel input channels {kernel.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    k = kernel.shape[2]
    for size in v.shape[1:]:
        conv_output_size(size, k, stride, padding)

    win = _windows(v, k, stride, padding)
    # (Cin, D', H', W', k, k, k) · (Cout, Cin, k, k, k) -> (D', H', W', Cout)
    out = np.tensordot(win, kernel, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 0)
    if bias is not None:
        bias = _f64(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"bias must be ({kernel.shape[0]},), got {bias.shape}")
        out = out + bias[:, None, None, None]
    return np.ascontiguousarray(out)


def conv3d_backward(
    kernel: np.ndarray,
    v: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv3d_forward: (d_input, d_kernel, d_bias)."""
    kernel, v, grad_out = _f64(kernel), _f64(v), _f64(grad_out)
    k = kernel.shape[2]
    win = _windows(v, k, stride, padding)
    # (Cin, D', H', W', k, k, k) x (Cout, D', H', W') -> (Cin, k, k, k, Cout)
    d_kernel = np.tensordot(win, grad_out, axes=([1, 2, 3], [1, 2, 3]))
    d_kernel = np.moveaxis(d_kernel, -1, 0)
    d_bias = grad_out.reshape(grad_out.shape[0], -1).sum(axis=1)

    cin = v.shape[0]
    padded = tuple(s + 2 * padding for s in v.shape[1:])
    d_pad = np.zeros((cin,) + padded, dtype=np.float64)
    od, oh, ow = grad_out.shape[1:]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                contrib = np.tensordot(kernel[:, :, a, b, c], grad_out, axes=([0], [0]))
                d_pad[:, a:a + stride * od:stride, b:b + stride * oh:stride, c:c + stride * ow:stride] += contrib
    d_input = d_pad[:, padding:padded[0] - padding, padding:padded[1] - padding, padding:padded[2] - padding]
    return d_input, d_kernel, d_bias
