"""Adam optimization, training loop, checkpoints, and metrics.

Training is deterministic given (config, task, settings, seed): the
initializer and the data order draw from independent generators spawned
from the seed, metrics are appended as JSONL once per evaluation interval,
and checkpoints capture parameters, optimizer moments, and the data
generator state bit-exactly so a resumed run equals an uninterrupted one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import model
from .cells import TlstmConfig, init_params
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    """First/second moment estimates and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **kw,
        )


def clip_gradients(grads: dict[str, Tensor], threshold: float) -> dict[str, Tensor]:
    """Scale gradients so their global L2 norm does not exceed ``threshold``."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= threshold:
        return grads
    factor = threshold / total
    return {k: g * factor for k, g in grads.items()}


def adam_step(
    params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState
) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam update, applied in parameter order, in place."""
    state.step += 1
    t = state.step
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        m_hat = state.m[name] / (1 - state.beta1**t)
        v_hat = state.v[name] / (1 - state.beta2**t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# -- checkpoints ---------------------------------------------------------------

def _carry_tensors(carry) -> list[tuple[str, Tensor]]:
    if carry is None:
        return []
    if carry.layers is not None:
        out = []
        for i, (h, c) in enumerate(carry.layers):
            out.append((f"carry.l{i}.h", h))
            out.append((f"carry.l{i}.c", c))
        return out
    out = [("carry.h", carry.h)]
    if carry.c is not None:
        out.append(("carry.c", carry.c))
    return out


def _carry_from_tensors(tensors: dict[str, Tensor]):
    from .cells import CellState

    names = sorted(k for k in tensors if k.startswith("carry."))
    if not names:
        return None
    if any(k.startswith("carry.l") for k in names):
        n_layers = len(names) // 2
        return CellState(layers=[
            (tensors[f"carry.l{i}.h"], tensors[f"carry.l{i}.c"])
            for i in range(n_layers)
        ])
    return CellState(h=tensors["carry.h"], c=tensors.get("carry.c"))


def save_checkpoint(
    path,
    config: TlstmConfig,
    params: dict[str, Tensor],
    adam: AdamState,
    data_rng_state: dict,
    counters: dict,
    carry=None,
) -> None:
    """Versioned container: length-prefixed JSON header, then the named f64
    arrays back to back in header order.

    ``data_rng_state`` must be the generator state captured at the start of
    the current epoch; with the epoch position in ``counters`` this lets a
    resume replay the data stream exactly.
    """
    groups = (
        [("p." + k, v) for k, v in params.items()]
        + [("m." + k, v) for k, v in adam.m.items()]
        + [("v." + k, v) for k, v in adam.v.items()]
        + _carry_tensors(carry)
    )
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "counters": counters,
        "adam": {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step": adam.step,
        },
        "rng_state": data_rng_state,
        "tensors": [{"name": n, "shape": list(np.asarray(a).shape)} for n, a in groups],
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in groups:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (config, params, adam, data_rng, counters, carry); the
    generator is restored to the epoch-start state recorded by save."""
    path = Path(path)
    with open(path, "rb") as fh:
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header.get('format_version')!r}"
            )
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    config = TlstmConfig.from_dict(header["config"])
    params = {k[2:]: v for k, v in tensors.items() if k.startswith("p.")}
    adam = AdamState(
        lr=header["adam"]["lr"],
        beta1=header["adam"]["beta1"],
        beta2=header["adam"]["beta2"],
        eps=header["adam"]["eps"],
        step=header["adam"]["step"],
        m={k[2:]: v for k, v in tensors.items() if k.startswith("m.")},
        v={k[2:]: v for k, v in tensors.items() if k.startswith("v.")},
    )
    data_rng = np.random.default_rng()
    data_rng.bit_generator.state = header["rng_state"]
    carry = _carry_from_tensors(tensors)
    return config, params, adam, data_rng, header["counters"], carry


# -- training loop --------------------------------------------------------------

@dataclass
class TrainSettings:
    batch_size: int = 15
    eval_interval: int = 1000
    max_samples: Optional[int] = None
    max_epochs: int = 1
    patience: Optional[int] = None  # evaluations without improvement
    stop_at_accuracy: Optional[float] = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    checkpoint: bool = True


@dataclass
class TrainReport:
    iterations: int
    samples_seen: int
    epochs: int
    records: list[dict]
    stop_reason: str
    best_accuracy: float
    params: dict[str, Tensor]
    adam: AdamState
    wall_seconds: float


def evaluate(task, params, config: TlstmConfig, batch_size: int) -> dict:
    """Average NLL and masked accuracy over the task's held-out batches."""
    losses, weights, accs = [], [], []
    carry = None
    for batch in task.eval_batches(batch_size):
        result = model.forward_sequence(
            batch, params, config,
            carry_in=carry if task.carry_between_batches else None,
        )
        loss = float(ad.value_of(model.nll_loss(result.outputs, batch.targets, batch.mask)))
        losses.append(loss)
        weights.append(int(batch.mask.sum()))
        accs.append(model.masked_accuracy(result.outputs, batch.targets, batch.mask))
        if task.carry_between_batches:
            carry = model.carry_state(result.state)
    total_w = sum(weights)
    loss = sum(ls * w for ls, w in zip(losses, weights)) / total_w
    acc = sum(a * w for a, w in zip(accs, weights)) / total_w
    out = {"loss": loss, "accuracy": acc}
    if task.kind == "charlm":
        out["bpc"] = loss / np.log(2.0)
    return out


def train(
    config: TlstmConfig,
    task,
    settings: TrainSettings,
    seed: int = 0,
    out_dir=None,
    resume_from=None,
) -> TrainReport:
    """Run the training protocol for ``task`` and return the full report.

    Stopping honors, in order: divergence (abort, last checkpoint kept),
    ``stop_at_accuracy`` on the held-out set, ``patience`` evaluations
    without accuracy improvement, ``max_samples``, and ``max_epochs``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl" if out_dir is not None else None

    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    if resume_from is not None:
        config, params, adam, data_rng, counters, carry = load_checkpoint(resume_from)
        iteration = counters["iteration"]
        samples_seen = counters["samples_seen"]
        epoch = counters["epoch"]
        epoch_iteration = counters["epoch_iteration"]
    else:
        forget_bias = 4.0 if task.kind == "image" else 1.0
        params = init_params(config, np.random.default_rng(init_ss), forget_bias)
        adam = AdamState.for_params(
            params, lr=settings.lr, beta1=settings.beta1,
            beta2=settings.beta2, eps=settings.eps,
        )
        data_rng = np.random.default_rng(data_ss)
        iteration = samples_seen = epoch = epoch_iteration = 0
        carry = None

    records: list[dict] = []
    best_acc = -1.0
    evals_since_best = 0
    stop_reason = "max_epochs"
    step_wall = 0.0
    steps_timed = 0
    t_start = time.time()

    def emit(record: dict) -> None:
        records.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def checkpoint(name: str) -> None:
        if out_dir is not None and settings.checkpoint:
            save_checkpoint(
                out_dir / name, config, params, adam, epoch_start_rng,
                {
                    "iteration": iteration,
                    "samples_seen": samples_seen,
                    "epoch": epoch,
                    "epoch_iteration": epoch_iteration,
                },
                carry=carry,
            )

    done = False
    epoch_start_rng = data_rng.bit_generator.state
    while epoch < settings.max_epochs and not done:
        # data positions are replayable: the generator state is snapshotted
        # at epoch start, and a resume skips the already-trained batches
        epoch_start_rng = data_rng.bit_generator.state
        batches = iter(task.epoch_batches(epoch, data_rng, settings.batch_size))
        for _ in range(epoch_iteration):
            next(batches)
        exhausted = True
        for batch in batches:
            t0 = time.time()
            tape = ad.Tape()
            wrapped = {k: tape.leaf(v) for k, v in params.items()}
            result = model.forward_sequence(
                batch, wrapped, config,
                carry_in=carry if task.carry_between_batches else None,
            )
            loss = model.nll_loss(result.outputs, batch.targets, batch.mask)
            loss_value = float(ad.value_of(loss))
            if not np.isfinite(loss_value):
                # last.ckpt from the previous interval stays on disk
                raise TrainingDiverged(f"training loss diverged at iteration {iteration}")
            grads = ad.backward(tape, loss, wrapped)
            if settings.grad_clip is not None:
                grads = clip_gradients(grads, settings.grad_clip)
            params, adam = adam_step(params, grads, adam)
            if task.carry_between_batches:
                carry = model.carry_state(result.state)
            iteration += 1
            epoch_iteration += 1
            samples_seen += batch.inputs.shape[0]
            step_wall += time.time() - t0
            steps_timed += 1

            if iteration % settings.eval_interval == 0:
                stats = evaluate(task, params, config, settings.batch_size)
                emit({
                    "iteration": iteration,
                    "samples_seen": samples_seen,
                    "loss": stats["loss"],
                    "accuracy": stats["accuracy"],
                    **({"bpc": stats["bpc"]} if "bpc" in stats else {}),
                    "wall_ms_per_step": 1000.0 * step_wall / max(steps_timed, 1),
                })
                step_wall, steps_timed = 0.0, 0
                checkpoint("last.ckpt")
                if stats["accuracy"] > best_acc + 1e-12:
                    best_acc = stats["accuracy"]
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                if (
                    settings.stop_at_accuracy is not None
                    and stats["accuracy"] >= settings.stop_at_accuracy
                ):
                    stop_reason, done, exhausted = "target_accuracy", True, False
                    break
                if settings.patience is not None and evals_since_best > settings.patience:
                    stop_reason, done, exhausted = "early_stopping", True, False
                    break
            if settings.max_samples is not None and samples_seen >= settings.max_samples:
                stop_reason, done, exhausted = "max_samples", True, False
                break
        if exhausted:
            epoch += 1
            epoch_iteration = 0
            carry = None  # data streams restart at the corpus start
            epoch_start_rng = data_rng.bit_generator.state
    checkpoint("final.ckpt")
    return TrainReport(
        iterations=iteration,
        samples_seen=samples_seen,
        epochs=epoch,
        records=records,
        stop_reason=stop_reason,
        best_accuracy=best_acc,
        params=params,
        adam=adam,
        wall_seconds=time.time() - t_start,
    )
