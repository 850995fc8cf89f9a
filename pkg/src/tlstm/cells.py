"""Per-timestep recurrent updates.

The tensorized cells keep a (D-1)-dimensional grid of channel vectors as
hidden state. Each step concatenates the projected input at the origin
corner of the grid (shifting the previous state one cell diagonally),
applies one cross-layer convolution to produce gate activations, and for
the full variant also generates per-location memory kernels that convolve
the previous memory cell. The stacked baseline shares one dense LSTM block
across all layers.

All step functions accept parameter mappings of either plain arrays or
tape-recorded :class:`~tlstm.autodiff.Var` values, so the same code path
serves evaluation and training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .tensor import Tensor

VARIANTS = ("tRNN", "tLSTM_noM", "tLSTM", "sLSTM")
NORMS = ("none", "LN", "CN")

# channel blocks along the convolution output axis, in storage order
GATE_ORDER = ("g", "i", "f", "o", "q")


def depth_from(tensor_size: int, kernel_size: int) -> int:
    """Implicit depth L required for the delayed output to cover exactly
    the past inputs: L = ceil(2P / (K - K mod 2))."""
    if tensor_size < 1:
        raise ValueError(f"tensor size must be >= 1, got {tensor_size}")
    if kernel_size < 2:
        raise ValueError(
            f"kernel size must be >= 2 (got {kernel_size}): a smaller window "
            "cannot reach below its own location, so no depth satisfies the "
            "receptive-field constraint"
        )
    return math.ceil(2 * tensor_size / (kernel_size - kernel_size % 2))


@dataclass(frozen=True)
class TlstmConfig:
    """Architecture descriptor. Depth is always derived, never stored."""

    input_size: int
    output_size: int
    channels: int
    variant: str = "tLSTM"
    dims: int = 2
    tensor_size: int = 2
    kernel_size: int = 3
    norm: str = "none"
    layers: int = 1  # stacked depth, used by the sLSTM baseline only

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}, expected one of {NORMS}")
        if min(self.input_size, self.output_size, self.channels) < 1:
            raise ValueError("input_size, output_size and channels must be >= 1")
        if self.variant == "sLSTM":
            if self.layers < 1:
                raise ValueError("sLSTM needs layers >= 1")
            if self.norm != "none":
                raise ValueError("the stacked baseline does not support normalization")
        else:
            if self.dims < 2:
                raise ValueError(f"dims must be >= 2, got {self.dims}")
            depth_from(self.tensor_size, self.kernel_size)  # validates P, K

    @property
    def depth(self) -> int:
        if self.variant == "sLSTM":
            return self.layers
        return depth_from(self.tensor_size, self.kernel_size)

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.tensor_size,) * (self.dims - 1)

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return (self.kernel_size,) * (self.dims - 1)

    @property
    def kernel_taps(self) -> int:
        """<K>: number of taps of one dynamic memory kernel."""
        return int(np.prod(self.kernel_shape))

    @property
    def conv_out_channels(self) -> int:
        m = self.channels
        if self.variant == "tRNN":
            return m
        if self.variant == "tLSTM_noM":
            return 4 * m
        return 4 * m + self.kernel_taps

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "dims": self.dims,
            "tensor_size": self.tensor_size,
            "channels": self.channels,
            "kernel_size": self.kernel_size,
            "norm": self.norm,
            "input_size": self.input_size,
            "output_size": self.output_size,
            "layers": self.layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TlstmConfig":
        return cls(**d)


@dataclass
class CellState:
    """Hidden state and memory cell for one tensorized sequence position.

    For the stacked baseline, ``layers`` holds one (h, c) pair per layer
    and the grid fields are unused.
    """

    h: object = None
    c: object = None
    layers: Optional[list] = None


def initial_state(config: TlstmConfig, batch: int) -> CellState:
    m = config.channels
    if config.variant == "sLSTM":
        pairs = [
            (np.zeros((batch, m)), np.zeros((batch, m)))
            for _ in range(config.layers)
        ]
        return CellState(layers=pairs)
    shape = (batch,) + config.grid_shape + (m,)
    h = np.zeros(shape)
    c = None if config.variant == "tRNN" else np.zeros(shape)
    return CellState(h=h, c=c)


# -- parameters --------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def center_tap(kshape: tuple[int, ...]) -> int:
    """Row-major index of the (ceiled) center of a kernel grid; a one-hot
    dynamic kernel at this tap makes the memory convolution the identity."""
    radius = tuple((k - k % 2) // 2 for k in kshape)
    return int(np.ravel_multi_index(radius, kshape))


def init_params(
    config: TlstmConfig, rng: np.random.Generator, forget_bias: float = 1.0
) -> dict[str, Tensor]:
    """Freshly initialized named parameters in a fixed, stable order.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)); biases are zero
    except the forget-gate block, which starts at ``forget_bias``.
    """
    r, m, s = config.input_size, config.channels, config.output_size
    params: dict[str, Tensor] = {}
    params["w_x"] = _uniform(rng, (r, m), r, m)
    params["b_x"] = np.zeros(m)
    if config.variant == "sLSTM":
        params["w_h"] = _uniform(rng, (2 * m, 4 * m), 2 * m, 4 * m)
        params["b_h"] = np.zeros(4 * m)
        params["b_h"][2 * m : 3 * m] = forget_bias
    else:
        kk = config.kernel_taps
        mo = config.conv_out_channels
        params["w_h"] = _uniform(
            rng, config.kernel_shape + (m, mo), kk * m, kk * mo
        )
        params["b_h"] = np.zeros(mo)
        if config.variant != "tRNN":
            params["b_h"][2 * m : 3 * m] = forget_bias
    params["w_y"] = _uniform(rng, (m, s), m, s)
    params["b_y"] = np.zeros(s)
    if config.norm != "none":
        norm_shape = config.grid_shape + (m,)
        params["norm_gain"] = np.ones(norm_shape)
        params["norm_bias"] = np.zeros(norm_shape)
    return params


def parameter_count(config: TlstmConfig, weights_only: bool = False) -> int:
    """Closed-form count of trainable scalars.

    ``weights_only`` counts just the projection/kernel matrices, the
    convention under which the reference channel sizes pin the model family
    to a common budget; the default counts every trainable scalar. Both are
    independent of the tensor size except for the normalization gains.
    """
    r, m, s = config.input_size, config.channels, config.output_size
    total = r * m + m * s
    if config.variant == "sLSTM":
        total += 2 * m * 4 * m
        biases = m + 4 * m + s
    else:
        kk = config.kernel_taps
        mo = config.conv_out_channels
        total += kk * m * mo
        biases = m + mo + s
        if config.norm != "none":
            biases += 2 * int(np.prod(config.grid_shape)) * m
    return total if weights_only else total + biases


# -- tensorized steps ---------------------------------------------------------

def concat_input(x, h_prev, params, config: TlstmConfig):
    """Project the input and place it at the origin corner of a grid one
    cell larger per axis, with the previous state shifted diagonally."""
    proj = ad.affine(x, params["w_x"], params["b_x"])
    return ad.shift_concat(proj, h_prev)


def _normalize(z, params, config: TlstmConfig):
    if config.norm == "CN":
        return ad.channel_norm(z, params["norm_gain"], params["norm_bias"])
    # LN: one mean/std per example over all grid and channel entries
    axes = tuple(range(1, ad.value_of(z).ndim))
    return ad.layer_norm(z, params["norm_gain"], params["norm_bias"], axes)


def trnn_step(x, state: CellState, params, config: TlstmConfig) -> CellState:
    hcat = concat_input(x, state.h, params, config)
    a = ad.cross_layer_conv(hcat, params["w_h"], params["b_h"])
    if config.norm != "none":
        # no memory cell to normalize; normalize the pre-activation instead
        a = _normalize(a, params, config)
    return CellState(h=ad.tanh(a))


def _gates(a, m: int):
    new = ad.tanh(ad.take_channels(a, 0, m))
    ifo = ad.sigmoid(ad.take_channels(a, m, 4 * m))
    gate_i = ad.take_channels(ifo, 0, m)
    gate_f = ad.take_channels(ifo, m, 2 * m)
    gate_o = ad.take_channels(ifo, 2 * m, 3 * m)
    return new, gate_i, gate_f, gate_o


def _finish_cell(c, gate_o, params, config: TlstmConfig):
    pre = c if config.norm == "none" else _normalize(c, params, config)
    return ad.mul(ad.tanh(pre), gate_o)


def tlstm_step_nomem(x, state: CellState, params, config: TlstmConfig) -> CellState:
    m = config.channels
    hcat = concat_input(x, state.h, params, config)
    a = ad.cross_layer_conv(hcat, params["w_h"], params["b_h"])
    new, gate_i, gate_f, gate_o = _gates(a, m)
    c = ad.add(ad.mul(new, gate_i), ad.mul(state.c, gate_f))
    return CellState(h=_finish_cell(c, gate_o, params, config), c=c)


def tlstm_step(x, state: CellState, params, config: TlstmConfig) -> CellState:
    m = config.channels
    kk = config.kernel_taps
    hcat = concat_input(x, state.h, params, config)
    a = ad.cross_layer_conv(hcat, params["w_h"], params["b_h"])
    new, gate_i, gate_f, gate_o = _gates(a, m)
    bank = ad.softmax_last_axis(ad.take_channels(a, 4 * m, 4 * m + kk))
    c_conv = ad.memory_cell_conv(state.c, bank, config.kernel_shape)
    c = ad.add(ad.mul(new, gate_i), ad.mul(c_conv, gate_f))
    return CellState(h=_finish_cell(c, gate_o, params, config), c=c)


def slstm_step(x, state: CellState, params, config: TlstmConfig) -> CellState:
    """One timestep of the stacked baseline: every layer applies the same
    shared LSTM block, layer input is the layer below's fresh output."""
    m = config.channels
    inp = ad.affine(x, params["w_x"], params["b_x"])
    new_layers = []
    for h_prev, c_prev in state.layers:
        z = ad.affine(ad.concat_last(inp, h_prev), params["w_h"], params["b_h"])
        new, gate_i, gate_f, gate_o = _gates(z, m)
        c = ad.add(ad.mul(new, gate_i), ad.mul(c_prev, gate_f))
        h = ad.mul(ad.tanh(c), gate_o)
        new_layers.append((h, c))
        inp = h
    return CellState(layers=new_layers)


_STEPS = {
    "tRNN": trnn_step,
    "tLSTM_noM": tlstm_step_nomem,
    "tLSTM": tlstm_step,
    "sLSTM": slstm_step,
}


def step(x, state: CellState, params, config: TlstmConfig) -> CellState:
    return _STEPS[config.variant](x, state, params, config)


def extract_output(state: CellState, params, config: TlstmConfig):
    """Class distribution read from the far corner of the hidden state (the
    top layer, for the stacked baseline)."""
    if config.variant == "sLSTM":
        vec = state.layers[-1][0]
    else:
        vec = ad.corner_take(state.h, config.dims - 1)
    return ad.softmax_last_axis(ad.affine(vec, params["w_y"], params["b_y"]))
