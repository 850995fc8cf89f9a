"""Numeric primitives on float64 arrays.

All functions are pure and operate on arrays laid out with optional leading
batch axes, then grid axes, then the channel axis last. The two convolutions
implement the skewed cross-layer geometry: a hidden-state window on the
concatenated (P+1)-sized grid aligned one cell deeper than the output
location, and a same-grid memory-cell window with replication padding.

Window geometry. With kernel radius ``r = (K - K mod 2) // 2``:

* cross-layer window for output cell ``i`` (0-based, P-sized grid) reads
  input cells ``i + k - (r - 1)`` for ``k = 0..K-1`` on the (P+1)-sized
  grid, out-of-range cells read as zero;
* memory-cell window for cell ``i`` reads cells ``i + k - r`` on the same
  P-sized grid, out-of-range cells replicate the boundary value.

This alignment puts ``r`` reachable cells above each output location and is
the unique choice for which the delayed output's receptive field covers
exactly the past inputs when the depth satisfies L = ceil(2P / (K - K mod 2)).
"""

from __future__ import annotations

from itertools import product

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor

NORM_EPS = 1e-5


def kernel_radius(k: int) -> int:
    return (k - k % 2) // 2


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias over the last axis of x."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"affine: input shape {tuple(x.shape)} does not match "
            f"weight shape {tuple(weight.shape)}"
        )
    return x @ weight + bias


def tanh(z: Tensor) -> Tensor:
    return np.tanh(z)


def sigmoid(z: Tensor) -> Tensor:
    return expit(z)


def softmax_last_axis(z: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if z.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- window gather/scatter -------------------------------------------------

def _pads(kshape: tuple[int, ...], mode: str) -> list[tuple[int, int]]:
    # "zero": (P+1)-grid input, output grid P; "edge": same-size grids.
    out = []
    for k in kshape:
        r = kernel_radius(k)
        out.append((r - 1, k - r - 1) if mode == "zero" else (r, k - r - 1))
    return out


def gather_windows(x: Tensor, kshape: tuple[int, ...], mode: str) -> Tensor:
    """Collect convolution windows.

    ``x`` has shape [..., G_1..G_n, C]; returns [..., P_1..P_n, <K>, C]
    where P = G - 1 for mode "zero" and P = G for mode "edge", and <K> is
    the product of kernel sizes. Windows are enumerated in row-major kernel
    order.
    """
    n = len(kshape)
    grid = x.shape[-n - 1 : -1]
    out_grid = tuple(g - 1 for g in grid) if mode == "zero" else grid
    if any(p < 1 for p in out_grid):
        raise ShapeError(f"grid {grid} too small for kernel {kshape}")
    pads = _pads(kshape, mode)
    lead_n = x.ndim - n - 1
    crop = tuple(
        slice(-lo if lo < 0 else 0, None) for lo, _ in pads
    )
    x = x[(slice(None),) * lead_n + crop + (slice(None),)]
    pad_spec = (
        [(0, 0)] * lead_n + [(max(lo, 0), hi) for lo, hi in pads] + [(0, 0)]
    )
    padded = np.pad(x, pad_spec, mode="constant" if mode == "zero" else "edge")
    # windows over the grid axes: [..., P.., C, K..] -> [..., P.., <K>, C]
    view = np.lib.stride_tricks.sliding_window_view(
        padded, kshape, axis=tuple(range(lead_n, lead_n + n))
    )
    view = np.moveaxis(view, lead_n + n, view.ndim - 1)
    kk = int(np.prod(kshape))
    return np.ascontiguousarray(view).reshape(
        view.shape[: lead_n + n] + (kk, padded.shape[-1])
    )


def scatter_windows(
    gwin: Tensor, kshape: tuple[int, ...], mode: str
) -> Tensor:
    """Adjoint of :func:`gather_windows`.

    ``gwin`` has shape [..., P_1..P_n, <K>, C]; returns the gradient with
    respect to the original input grid ([..., G.., C]). For "edge" mode the
    out-of-range contributions fold back into the boundary cells.
    """
    n = len(kshape)
    out_grid = gwin.shape[-n - 2 : -2]
    pads = _pads(kshape, mode)
    buf_grid = tuple(p + k - 1 for p, k in zip(out_grid, kshape))
    lead_shape = gwin.shape[: -n - 2]
    buf = np.zeros(lead_shape + buf_grid + gwin.shape[-1:], dtype=np.float64)
    lead = (slice(None),) * len(lead_shape)
    for flat, offs in enumerate(product(*[range(k) for k in kshape])):
        idx = lead + tuple(
            slice(o, o + p) for o, p in zip(offs, out_grid)
        ) + (slice(None),)
        buf[idx] += gwin[lead + (Ellipsis, flat, slice(None))]
    # undo padding axis by axis (a negative low pad was a crop: restore it
    # with zero cells)
    for d, (lo, hi) in enumerate(pads):
        axis = len(lead_shape) + d
        if lo < 0:
            spec = [(0, 0)] * buf.ndim
            spec[axis] = (-lo, 0)
            buf = np.pad(buf, spec)
            lo = 0
        size = buf.shape[axis]
        core = [slice(None)] * buf.ndim
        core[axis] = slice(lo, size - hi)
        cropped = buf[tuple(core)]
        if mode == "edge":
            cropped = cropped.copy()
            if lo:
                head = [slice(None)] * buf.ndim
                head[axis] = slice(0, lo)
                first = [slice(None)] * cropped.ndim
                first[axis] = 0
                cropped[tuple(first)] += buf[tuple(head)].sum(axis=axis)
            if hi:
                tail = [slice(None)] * buf.ndim
                tail[axis] = slice(size - hi, size)
                last = [slice(None)] * cropped.ndim
                last[axis] = cropped.shape[axis] - 1
                cropped[tuple(last)] += buf[tuple(tail)].sum(axis=axis)
        buf = cropped
    return buf


# -- convolutions ----------------------------------------------------------

def cross_layer_conv(hcat: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Convolve the concatenated hidden state across implicit layers.

    ``hcat``: [..., (P+1)_1..(P+1)_n, M_in]; ``weight``: [K_1..K_n, M_in,
    M_out]; ``bias``: [M_out]. Returns [..., P_1..P_n, M_out]. Channels are
    fully connected; out-of-range grid cells read as zero.
    """
    kshape = weight.shape[:-2]
    m_in, m_out = weight.shape[-2:]
    if hcat.shape[-1] != m_in:
        raise ShapeError(
            f"cross_layer_conv: input channels {hcat.shape[-1]} "
            f"(input shape {tuple(hcat.shape)}) do not match kernel "
            f"shape {tuple(weight.shape)}"
        )
    if hcat.ndim < len(kshape) + 1:
        raise ShapeError(
            f"cross_layer_conv: input shape {tuple(hcat.shape)} has fewer "
            f"grid axes than kernel shape {tuple(weight.shape)}"
        )
    win = gather_windows(hcat, kshape, "zero")  # [..., P.., <K>, Mi]
    return conv_from_windows(win, weight, bias)


def conv_from_windows(win: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Channel-mixing contraction of gathered windows with a kernel."""
    kk, m_in = win.shape[-2:]
    m_out = weight.shape[-1]
    flat = win.reshape(win.shape[:-2] + (kk * m_in,))
    return flat @ weight.reshape(kk * m_in, m_out) + bias


def memory_cell_conv(c: Tensor, bank: Tensor, kshape: tuple[int, ...]) -> Tensor:
    """Convolve each memory-cell channel with its location's dynamic kernel.

    ``c``: [..., P_1..P_n, M]; ``bank``: [..., P_1..P_n, <K>] holding one
    normalized kernel per grid location (row-major kernel order). Boundary
    cells replicate; output shape equals ``c``'s.
    """
    kshape = tuple(int(k) for k in kshape)
    n = len(kshape)
    kk = int(np.prod(kshape))
    if bank.shape[-1] != kk:
        raise ShapeError(
            f"memory_cell_conv: bank shape {tuple(bank.shape)} does not hold "
            f"{kk} taps for kernel {kshape}"
        )
    if bank.shape[:-1] != c.shape[:-1]:
        raise ShapeError(
            f"memory_cell_conv: bank grid {tuple(bank.shape[:-1])} does not "
            f"match cell grid {tuple(c.shape[:-1])}"
        )
    win = gather_windows(c, kshape, "edge")  # [..., P.., <K>, M]
    return mix_from_windows(win, bank)


def mix_from_windows(win: Tensor, bank: Tensor) -> Tensor:
    """Per-location kernel mix of gathered single-channel windows."""
    return np.einsum("...km,...k->...m", win, bank)


# -- normalization ---------------------------------------------------------

def _norm_stats(z: Tensor, axes: tuple[int, ...]) -> tuple[Tensor, Tensor]:
    mu = z.mean(axis=axes, keepdims=True)
    var = z.var(axis=axes, keepdims=True)  # population variance
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    return (z - mu) * inv, inv


def channel_norm(z: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each grid location's channel vector, then scale and shift."""
    zhat, _ = _norm_stats(z, (-1,))
    return zhat * gain + bias


def layer_norm(
    z: Tensor, gain: Tensor, bias: Tensor, axes: tuple[int, ...] | None = None
) -> Tensor:
    """Normalize with one mean/std over ``axes`` (default: the whole tensor)."""
    if axes is None:
        axes = tuple(range(z.ndim))
    zhat, _ = _norm_stats(z, axes)
    return zhat * gain + bias
