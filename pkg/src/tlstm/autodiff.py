"""Reverse-mode differentiation over the numeric primitives.

A :class:`Tape` records eagerly executed operations in order; recording
order is execution order, so it is already topological. Every primitive in
this module accepts either a :class:`Var` (recorded value) or a plain
ndarray (constant); the forward result is computed by :mod:`tlstm.ops` and a
vector-Jacobian closure is stored for the reverse sweep. Gradients of a
scalar loss are accumulated additively per recorded slot in a fixed reverse
order, which makes the sweep bit-reproducible.

``finite_diff`` is the independent central-difference oracle used to verify
the analytic rules, and ``grad_check`` wires a full model step to it.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class Tape:
    """Ordered record of executed operations and their gradient slots."""

    def __init__(self) -> None:
        self._nodes: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._n_slots = 0

    def _new_slot(self) -> int:
        self._n_slots += 1
        return self._n_slots - 1

    def leaf(self, value) -> "Var":
        """Register a differentiable leaf (parameter or input)."""
        return Var(np.asarray(value, dtype=np.float64), self, self._new_slot())

    def record(self, out_data: Tensor, inputs: tuple, vjp: Callable) -> "Var":
        slots = tuple(x.slot if isinstance(x, Var) else None for x in inputs)
        out = Var(out_data, self, self._new_slot())
        self._nodes.append((out.slot, slots, vjp))
        return out

    def __len__(self) -> int:
        return len(self._nodes)


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("data", "tape", "slot")
    __array_ufunc__ = None  # keep numpy from consuming Var operands

    def __init__(self, data: Tensor, tape: Tape, slot: int) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.slot = slot

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, slot={self.slot})"


def value_of(x) -> Tensor:
    """Underlying ndarray of a Var or array-like."""
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _emit(tape: Tape | None, out: Tensor, inputs: tuple, vjp: Callable):
    if tape is None:
        return out
    return tape.record(out, inputs, vjp)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Var, wrt: Mapping[str, Var]) -> dict[str, Tensor]:
    """Reverse sweep; returns d(loss)/d(param) for every entry of ``wrt``.

    Gradient slots of parameters the loss never touched come back as zeros.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a value recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, Tensor] = {loss.slot: np.ones_like(loss.data)}
    for out_slot, in_slots, vjp in reversed(tape._nodes):
        g = grads.pop(out_slot, None)
        if g is None:
            continue
        for slot, piece in zip(in_slots, vjp(g)):
            if slot is None or piece is None:
                continue
            acc = grads.get(slot)
            grads[slot] = piece if acc is None else acc + piece
    return {
        name: grads.get(v.slot, np.zeros_like(v.data)) for name, v in wrt.items()
    }


# -- elementwise and linear primitives --------------------------------------

def add(a, b):
    ad, bd = value_of(a), value_of(b)
    out = ad + bd
    return _emit(
        _tape_of(a, b), out, (a, b),
        lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)),
    )


def mul(a, b):
    ad, bd = value_of(a), value_of(b)
    out = ad * bd
    return _emit(
        _tape_of(a, b), out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x, s: float):
    xd = value_of(x)
    return _emit(_tape_of(x), xd * s, (x,), lambda g: (g * s,))


def tanh(x):
    y = ops.tanh(value_of(x))
    return _emit(_tape_of(x), y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = ops.sigmoid(value_of(x))
    return _emit(_tape_of(x), y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x):
    xd = value_of(x)
    return _emit(_tape_of(x), np.log(xd), (x,), lambda g: (g / xd,))


def sum_all(x):
    xd = value_of(x)
    out = np.asarray(xd.sum())
    return _emit(
        _tape_of(x), out, (x,), lambda g: (np.broadcast_to(g, xd.shape),)
    )


def affine(x, weight, bias):
    xd, wd, bd = value_of(x), value_of(weight), value_of(bias)
    out = ops.affine(xd, wd, bd)

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        gb = _unbroadcast(g, bd.shape)
        return gx, gw, gb

    return _emit(_tape_of(x, weight, bias), out, (x, weight, bias), vjp)


def softmax_last_axis(x):
    y = ops.softmax_last_axis(value_of(x))

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(_tape_of(x), y, (x,), vjp)


# -- convolutions ------------------------------------------------------------

def cross_layer_conv(hcat, weight, bias):
    hd, wd, bd = value_of(hcat), value_of(weight), value_of(bias)
    kshape = wd.shape[:-2]
    m_in, m_out = wd.shape[-2:]
    if hd.shape[-1] != m_in:
        raise ShapeError(
            f"cross_layer_conv: input channels {hd.shape[-1]} (input shape "
            f"{tuple(hd.shape)}) do not match kernel shape {tuple(wd.shape)}"
        )
    win = ops.gather_windows(hd, kshape, "zero")
    out = ops.conv_from_windows(win, wd, bd)
    tape = _tape_of(hcat, weight, bias)
    if tape is None:
        return out
    kk = int(np.prod(kshape))

    def vjp(g):
        gm = g.reshape(-1, m_out)
        flat = win.reshape(-1, kk * m_in)
        gw = (flat.T @ gm).reshape(wd.shape)
        gb = gm.sum(axis=0)
        gwin = (gm @ wd.reshape(kk * m_in, m_out).T).reshape(win.shape)
        gh = ops.scatter_windows(gwin, kshape, "zero")
        return gh, gw, gb

    return tape.record(out, (hcat, weight, bias), vjp)


def memory_cell_conv(c, bank, kshape: tuple[int, ...]):
    cd, qd = value_of(c), value_of(bank)
    kk = int(np.prod(kshape))
    if qd.shape[-1] != kk or qd.shape[:-1] != cd.shape[:-1]:
        raise ShapeError(
            f"memory_cell_conv: bank shape {tuple(qd.shape)} does not fit "
            f"cell shape {tuple(cd.shape)} with kernel {tuple(kshape)}"
        )
    win = ops.gather_windows(cd, kshape, "edge")
    out = ops.mix_from_windows(win, qd)
    tape = _tape_of(c, bank)
    if tape is None:
        return out

    def vjp(g):
        gbank = np.einsum("...km,...m->...k", win, g)
        gwin = np.einsum("...k,...m->...km", qd, g)
        gc = ops.scatter_windows(gwin, kshape, "edge")
        return gc, gbank

    return tape.record(out, (c, bank), vjp)


# -- normalization -----------------------------------------------------------

def _norm(z, gain, bias, axes: tuple[int, ...]):
    zd, gd, bd = value_of(z), value_of(gain), value_of(bias)
    zhat, inv = ops._norm_stats(zd, axes)
    out = zhat * gd + bd
    tape = _tape_of(z, gain, bias)
    if tape is None:
        return out

    def vjp(g):
        ggain = _unbroadcast(g * zhat, gd.shape)
        gbias = _unbroadcast(g, bd.shape)
        gz = g * gd
        gz_mu = gz.mean(axis=axes, keepdims=True)
        proj = (gz * zhat).mean(axis=axes, keepdims=True)
        return inv * (gz - gz_mu - zhat * proj), ggain, gbias

    return tape.record(out, (z, gain, bias), vjp)


def channel_norm(z, gain, bias):
    return _norm(z, gain, bias, (-1,))


def layer_norm(z, gain, bias, axes: tuple[int, ...] | None = None):
    if axes is None:
        axes = tuple(range(value_of(z).ndim))
    return _norm(z, gain, bias, axes)


# -- structural primitives ---------------------------------------------------

def shift_concat(proj, h):
    """Assemble the concatenated grid: ``proj`` at the origin corner, ``h``
    shifted one cell along every grid axis, zeros elsewhere."""
    pd, hd = value_of(proj), value_of(h)
    n_grid = hd.ndim - pd.ndim
    lead = hd.shape[: pd.ndim - 1]
    grid = hd.shape[pd.ndim - 1 : -1]
    out = np.zeros(lead + tuple(g + 1 for g in grid) + hd.shape[-1:])
    sl = (slice(None),) * (pd.ndim - 1)
    corner = sl + (0,) * n_grid + (slice(None),)
    block = sl + (slice(1, None),) * n_grid + (slice(None),)
    out[corner] = pd
    out[block] = hd

    def vjp(g):
        return g[corner], g[block]

    return _emit(_tape_of(proj, h), out, (proj, h), vjp)


def corner_take(h, n_grid: int):
    """Channel vector at the far corner (last index along every grid axis)."""
    hd = value_of(h)
    idx = (Ellipsis,) + (-1,) * n_grid + (slice(None),)

    def vjp(g):
        gh = np.zeros_like(hd)
        gh[idx] = g
        return (gh,)

    return _emit(_tape_of(h), hd[idx].copy(), (h,), vjp)


def take_channels(x, lo: int, hi: int):
    xd = value_of(x)

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[..., lo:hi] = g
        return (gx,)

    return _emit(_tape_of(x), xd[..., lo:hi].copy(), (x,), vjp)


def concat_last(a, b):
    ad, bd = value_of(a), value_of(b)
    na = ad.shape[-1]

    def vjp(g):
        return g[..., :na].copy(), g[..., na:].copy()

    return _emit(_tape_of(a, b), np.concatenate([ad, bd], axis=-1), (a, b), vjp)


def pick_class(probs, idx):
    """probs[..., S] indexed row-wise by integer classes idx[...]."""
    pd = value_of(probs)
    ii = np.asarray(idx)
    lead = np.indices(ii.shape, sparse=True)
    out = pd[(*lead, ii)].copy()

    def vjp(g):
        gp = np.zeros_like(pd)
        gp[(*lead, ii)] = g
        return (gp,)

    return _emit(_tape_of(probs), out, (probs,), vjp)


# -- verification -------------------------------------------------------------

def finite_diff(
    f: Callable[[Mapping[str, Tensor]], float],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
) -> dict[str, Tensor]:
    """Central-difference gradient of ``f`` at ``params``, per coordinate.

    ``f`` must be a pure function of the parameter values; entries are
    perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = {}
    for name, arr in params.items():
        out = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = float(f(params))
            arr[idx] = orig - step
            f_minus = float(f(params))
            arr[idx] = orig
            out[idx] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = out
    return grads


def max_relative_error(
    analytic: Mapping[str, Tensor], numeric: Mapping[str, Tensor]
) -> float:
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def grad_check(config, seq_len: int, seed: int, batch: int = 2) -> float:
    """Max relative error between the tape gradient and central differences
    of the sequence NLL for a randomly initialized model on random data."""
    from . import cells, model

    rng = np.random.default_rng(seed)
    params = cells.init_params(config, rng)
    inputs = rng.standard_normal((batch, seq_len, config.input_size))
    targets = rng.integers(0, config.output_size, size=(batch, seq_len))
    mask = np.ones((batch, seq_len), dtype=bool)
    batch_data = model.SequenceBatch(inputs=inputs, targets=targets, mask=mask)

    def loss_fn(values: Mapping[str, Tensor]) -> float:
        result = model.forward_sequence(batch_data, values, config)
        return float(value_of(model.nll_loss(result.outputs, targets, mask)))

    tape = Tape()
    wrapped = {name: tape.leaf(v) for name, v in params.items()}
    result = model.forward_sequence(batch_data, wrapped, config)
    loss = model.nll_loss(result.outputs, targets, mask)
    analytic = backward(tape, loss, wrapped)
    numeric = finite_diff(loss_fn, params)
    return max_relative_error(analytic, numeric)
