"""Dense tensor values.

Every value in this package is a dense float64 array in row-major (C) order,
with grid axes first and the channel axis last. ``Tensor`` is an alias for
``numpy.ndarray`` under that convention; the helpers here construct and
validate such arrays.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


def tensor(data, shape: tuple[int, ...] | None = None) -> Tensor:
    """Build a float64 row-major tensor from array-like data.

    If ``shape`` is given, ``data`` is taken as flat row-major storage and
    reshaped; the element count must match exactly.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(
                f"flat data of length {arr.size} does not fill shape {shape}"
            )
        arr = arr.reshape(shape)
    return arr


def flat_data(x: Tensor) -> Tensor:
    """Row-major flat view of a tensor's storage."""
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x

