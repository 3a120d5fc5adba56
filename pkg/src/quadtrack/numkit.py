"""Small numeric kernels shared by every stage of the pipeline.

All arrays are float64 and C-contiguous. There is no autodiff here: ops are
plain functions, and the loss module carries its own hand-derived gradients.

``matmul`` deliberately accumulates over the inner dimension in ascending
order (one rank-1 update per k). Floating-point addition is not associative,
and downstream identities compare a sub-matrix product against entries of the
full product bit for bit; pinning the summation order is what makes those
comparisons exact rather than approximate.
"""

from __future__ import annotations

import numpy as np

EPS_GROUP_NORM = 1e-5


def as_tensor(data, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Validate and convert to a float64 C-order array with finite entries."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    return arr


def as_matrix(data) -> np.ndarray:
    arr = as_tensor(data)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got ndim={arr.ndim}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(m x k) @ (k x n) with a fixed left-to-right accumulation order.

    Each output entry is built as a[i,0]*b[0,j] + a[i,1]*b[1,j] + ... in
    exactly that order, so any row/column sub-selection of the inputs yields
    bitwise-identical entries to the full product. k = 0 is rejected: an
    empty accumulation has no well-defined entry.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dimensions differ: {k} vs {k2}")
    if k == 0:
        raise ValueError("matmul with inner dimension 0 is disallowed")
    out = np.zeros((m, n), dtype=np.float64)
    for kk in range(k):
        out += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return out


def softmax_rows(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m / temperature, max-subtracted for stability."""
    if m.ndim != 2:
        raise ValueError("softmax_rows expects a 2-d matrix")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax_rows input must be finite")
    z = m / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-d cross-correlation of an (h, w, c_in) map with (kh, kw, c_in, c_out).

    Zero padding, odd kernel sides only. No bias: callers add their own.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d expects (h, w, c_in) input and (kh, kw, c_in, c_out) kernel")
    kh, kw, cin, _ = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel sides must be odd")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if x.shape[2] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[2]}, kernel expects {cin}")
    h, w = x.shape[:2]
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError("input too small for kernel")
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # (h_out, w_out, c_in, kh, kw)
    return np.einsum("ijcuv,uvco->ijo", win, kernel, optimize=True)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (h, w, c) map to (out_h, out_w, c).

    Sample centers are aligned half-pixel style: source coordinate for output
    index i is (i + 0.5) * in/out - 0.5, clamped at the edges.
    """
    if x.ndim != 3:
        raise ValueError("bilinear_resize expects an (h, w, c) map")
    if out_h < 1 or out_w < 1:
        raise ValueError("output sides must be >= 1")
    in_h, in_w = x.shape[:2]

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ry_lo, ry_hi, fy = axis_weights(in_h, out_h)
    rx_lo, rx_hi, fx = axis_weights(in_w, out_w)
    top = x[ry_lo][:, rx_lo] * (1 - fx)[None, :, None] + x[ry_lo][:, rx_hi] * fx[None, :, None]
    bot = x[ry_hi][:, rx_lo] * (1 - fx)[None, :, None] + x[ry_hi][:, rx_hi] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def bilinear_upsample2x(x: np.ndarray) -> np.ndarray:
    """Double both spatial sides of an (h, w, c) map."""
    if x.ndim != 3:
        raise ValueError("bilinear_upsample2x expects an (h, w, c) map")
    return bilinear_resize(x, 2 * x.shape[0], 2 * x.shape[1])


def group_norm(x: np.ndarray, groups: int, eps: float = EPS_GROUP_NORM) -> np.ndarray:
    """Normalize an (h, w, c) map per channel group (population variance)."""
    if x.ndim != 3:
        raise ValueError("group_norm expects an (h, w, c) map")
    h, w, c = x.shape
    if groups < 1 or c % groups != 0:
        raise ValueError(f"channel count {c} not divisible into {groups} groups")
    g = x.reshape(h, w, groups, c // groups)
    mean = g.mean(axis=(0, 1, 3), keepdims=True)
    var = g.var(axis=(0, 1, 3), keepdims=True)
    return ((g - mean) / np.sqrt(var + eps)).reshape(h, w, c)
