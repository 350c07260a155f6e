"""Bicubic resampling for channel-first float images.

All internal arithmetic is float64 so that down/up round trips are
reproducible bit-for-bit across runs. The kernel is the cubic convolution
interpolant with a = -0.5 and the half-pixel center convention
``src = (dst + 0.5) * (n_in / n_out) - 0.5``, matching the classic
photographic resize rather than torch's a = -0.75 variant.
"""

from __future__ import annotations

import numpy as np

# Cubic convolution coefficient. -0.5 gives the Catmull-Rom spline, which is
# interpolating (exact on the source grid) and C1 continuous.
KERNEL_A = -0.5


def cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Evaluate the a = -0.5 cubic convolution kernel at offsets ``x``.

    Piecewise cubic with support (-2, 2):
      |x| <= 1:      (a+2)|x|^3 - (a+3)|x|^2 + 1
      1 < |x| < 2:   a(|x|^3 - 5|x|^2 + 8|x| - 4)
    """
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    xn = x[near]
    xf = x[far]
    out[near] = ((KERNEL_A + 2.0) * xn - (KERNEL_A + 3.0)) * xn * xn + 1.0
    out[far] = KERNEL_A * (((xf - 5.0) * xf + 8.0) * xf - 4.0)
    return out


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Build the [n_out, n_in] 1-D resampling operator for one axis.

    Each output sample takes four kernel taps around its source position.
    Taps falling outside the signal are clamped to the edge sample
    (replicate padding), and each row is renormalized to sum to one so that
    constant signals are preserved exactly.
    """
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"axis sizes must be positive, got {n_in} -> {n_out}")
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = base + tap
        w = cubic_kernel(centers - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), w)
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def bicubic_resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a [C, H, W] image to ``size`` = (H_out, W_out).

    Separable bicubic: one matrix multiply per spatial axis, float64
    throughout, output clipped to [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a [C, H, W] array, got shape {img.shape}")
    h_out, w_out = int(size[0]), int(size[1])
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    _, h_in, w_in = img.shape
    row_op = resample_matrix(h_in, h_out)
    col_op = resample_matrix(w_in, w_out)
    out = np.einsum("oh,chw->cow", row_op, img, optimize=True)
    out = np.einsum("pw,cow->cop", col_op, out, optimize=True)
    return np.clip(out, 0.0, 1.0)
