"""Sequence-level forward pass, objective, and memory-cell traces.

A tensorized cell of depth L answers for input t only at step t + L - 1, so
a length-T sequence runs T + L - 1 cell steps; the trailing steps consume
zero input vectors. The stacked baseline has no such delay and instead runs
L layer updates per timestep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import cells
from .cells import CellState, TlstmConfig
from .tensor import Tensor


@dataclass
class SequenceBatch:
    """A batch of sequences: one-hot or real inputs [N, T, R], integer
    targets [N, T], and a boolean loss mask [N, T]."""

    inputs: Tensor
    targets: Tensor
    mask: Tensor

    def __post_init__(self) -> None:
        n, t, _ = self.inputs.shape
        if self.targets.shape != (n, t) or self.mask.shape != (n, t):
            raise ValueError(
                f"targets {self.targets.shape} and mask {self.mask.shape} "
                f"must both be {(n, t)}"
            )
        if t < 1:
            raise ValueError("sequences must have at least one position")


@dataclass
class SequenceResult:
    outputs: list  # per timestep, class distributions [N, S]
    state: CellState
    updates: int  # cell steps (tensorized) or layer updates (stacked)
    trace: Optional[Tensor] = None  # [P, T + L - 1] diagonal channel means


def forward_sequence(
    batch: SequenceBatch,
    params,
    config: TlstmConfig,
    carry_in: Optional[CellState] = None,
    collect_trace: bool = False,
) -> SequenceResult:
    """Run the cell over a batch and return the T output distributions.

    Output t is read after cell step t + L - 1; steps beyond T consume zero
    inputs. ``carry_in`` seeds the state (for subsequence continuation) and
    must already be detached from any tape.
    """
    n, t_len, _ = batch.inputs.shape
    depth = config.depth
    state = carry_in if carry_in is not None else cells.initial_state(config, n)
    outputs = []
    trace_cols = []

    if config.variant == "sLSTM":
        for t in range(t_len):
            state = cells.step(batch.inputs[:, t], state, params, config)
            outputs.append(cells.extract_output(state, params, config))
        return SequenceResult(outputs, state, updates=t_len * depth)

    zero_x = np.zeros((n, config.input_size))
    total = t_len + depth - 1
    for t in range(total):
        x = batch.inputs[:, t] if t < t_len else zero_x
        state = cells.step(x, state, params, config)
        if t >= depth - 1:
            outputs.append(cells.extract_output(state, params, config))
        if collect_trace:
            trace_cols.append(_diagonal_channel_means(state, config))
    trace = np.stack(trace_cols, axis=1) if collect_trace else None
    return SequenceResult(outputs, state, updates=total, trace=trace)


def _diagonal_channel_means(state: CellState, config: TlstmConfig) -> Tensor:
    """Mean over channels of the first example's memory cell (hidden state
    for the memoryless variant) at the grid diagonal, input corner first."""
    source = state.c if state.c is not None else state.h
    grid = ad.value_of(source)[0]
    n_axes = config.dims - 1
    return np.array(
        [grid[(i,) * n_axes].mean() for i in range(config.tensor_size)]
    )


def nll_loss(outputs: list, targets: Tensor, mask: Tensor):
    """Mean over masked positions of -ln p(target class)."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no positions")
    total = None
    for t, probs in enumerate(outputs):
        picked = ad.log(ad.pick_class(probs, targets[:, t]))
        term = ad.sum_all(ad.mul(picked, mask[:, t].astype(np.float64)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -1.0 / count)


def carry_state(state: CellState) -> CellState:
    """Detach a state from its tape: values are preserved bitwise, but no
    gradient flows across the boundary."""

    def detach(x):
        return np.array(ad.value_of(x))

    if state.layers is not None:
        return CellState(layers=[(detach(h), detach(c)) for h, c in state.layers])
    return CellState(
        h=detach(state.h), c=None if state.c is None else detach(state.c)
    )


def outputs_array(outputs: list) -> Tensor:
    """Stack per-step distributions into [T, N, S] floats."""
    return np.stack([ad.value_of(o) for o in outputs], axis=0)


def masked_accuracy(outputs: list, targets: Tensor, mask: Tensor) -> float:
    """Fraction of masked positions whose argmax matches the target."""
    probs = outputs_array(outputs)  # [T, N, S]
    pred = probs.argmax(axis=-1).T  # [N, T]
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("accuracy mask selects no positions")
    return float((pred[mask] == np.asarray(targets)[mask]).mean())


def normalize_trace(trace: Tensor) -> Tensor:
    """Min-max normalize trace values into [0, 1] (zeros if constant)."""
    lo, hi = float(trace.min()), float(trace.max())
    if hi - lo < 1e-12:
        return np.zeros_like(trace)
    return (trace - lo) / (hi - lo)


def export_trace(trace: Tensor, path) -> Tensor:
    """Write the normalized trace as CSV, one row per diagonal location
    (P rows, T + L - 1 columns). Returns the normalized array."""
    norm = normalize_trace(trace)
    np.savetxt(path, norm, fmt="%.6f", delimiter=",")
    return norm
