"""Tensorized LSTM: tensor-grid hidden states updated by cross-layer
convolutions, with dynamic memory-cell convolutions, channel normalization,
a reverse-mode training stack, and task harnesses."""

from .cells import (
    CellState,
    TlstmConfig,
    depth_from,
    init_params,
    initial_state,
    parameter_count,
)
from .model import SequenceBatch, forward_sequence, nll_loss, carry_state
from .autodiff import Tape, backward, finite_diff, grad_check

__all__ = [
    "CellState",
    "TlstmConfig",
    "SequenceBatch",
    "Tape",
    "backward",
    "carry_state",
    "depth_from",
    "finite_diff",
    "forward_sequence",
    "grad_check",
    "init_params",
    "initial_state",
    "nll_loss",
    "parameter_count",
]

__version__ = "0.1.0"
