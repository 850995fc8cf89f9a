"""Operator entry point.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``bench``, ``trace``. Run
configurations are JSON documents validated strictly (unknown keys are
rejected with field-level messages). All outputs land in the configured
output directory: metrics as JSONL, traces and bench tables as CSV, each
with a rendered PNG figure alongside.

Exit codes: 0 success; 1 invalid configuration or arguments; 2 divergence
(train) or a failed threshold (gradcheck).

The ``TLSTM_DATA_DIR`` environment variable supplies the dataset root for
tasks that read files and do not specify their own path.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model, report, tasks, training
from .cells import TlstmConfig, init_params, parameter_count


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "seed": int,
    "out_dir": str,
    "model": {
        "variant": str,
        "dims": int,
        "tensor_size": int,
        "channels": int,
        "kernel_size": int,
        "norm": str,
        "layers": int,
    },
    "task": {
        "preset": str,
        "task": str,
        "num_digits": int,
        "num_symbols": int,
        "vocab_size": int,
        "test_samples": int,
        "path": str,
        "subseq_len": int,
        "val_fraction": float,
        "data_dir": str,
        "downsample": int,
        "permute": bool,
        "permutation_seed": int,
        "train_size": int,
    },
    "optimizer": {
        "lr": float,
        "beta1": float,
        "beta2": float,
        "eps": float,
        "grad_clip": float,
    },
    "training": {
        "batch_size": int,
        "eval_interval": int,
        "max_samples": int,
        "max_epochs": int,
        "patience": int,
        "stop_at_accuracy": float,
        "checkpoint": bool,
    },
}


def _check_section(data: dict, schema: dict, prefix: str) -> None:
    for key, value in data.items():
        where = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"{where}: unknown key")
        expect = schema[key]
        if isinstance(expect, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            _check_section(value, expect, where + ".")
        elif value is not None:
            if expect is float and isinstance(value, int) and not isinstance(value, bool):
                continue
            if not isinstance(value, expect) or isinstance(value, bool) != (expect is bool):
                raise ConfigError(
                    f"{where}: expected {expect.__name__}, got {type(value).__name__}"
                )


def load_run_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_section(data, _SCHEMA, "")
    for required in ("model", "task"):
        if required not in data:
            raise ConfigError(f"{required}: section is required")
    return data


def _build_task(section: dict, seed: int):
    section = dict(section)
    name = section.get("task") or tasks.TASK_PRESETS.get(section.get("preset", ""), {}).get("task")
    data_root = os.environ.get("TLSTM_DATA_DIR")
    if name == "mnist" and "data_dir" not in section and data_root:
        section["data_dir"] = data_root
    if name == "charlm" and "path" not in section and data_root:
        section["path"] = str(Path(data_root) / "corpus.txt")
    try:
        return tasks.make_task(section, seed=seed)
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"task: {exc}") from exc


def _build_model_config(section: dict, task) -> TlstmConfig:
    try:
        return TlstmConfig(
            input_size=task.input_size,
            output_size=task.output_size,
            **section,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def _build_settings(run: dict) -> training.TrainSettings:
    opt = run.get("optimizer", {})
    tr = run.get("training", {})
    try:
        return training.TrainSettings(
            batch_size=tr.get("batch_size", 15),
            eval_interval=tr.get("eval_interval", 1000),
            max_samples=tr.get("max_samples"),
            max_epochs=tr.get("max_epochs", 1),
            patience=tr.get("patience"),
            stop_at_accuracy=tr.get("stop_at_accuracy"),
            lr=opt.get("lr", 1e-3),
            beta1=opt.get("beta1", 0.9),
            beta2=opt.get("beta2", 0.999),
            eps=opt.get("eps", 1e-8),
            grad_clip=opt.get("grad_clip"),
            checkpoint=tr.get("checkpoint", True),
        )
    except TypeError as exc:
        raise ConfigError(f"training: {exc}") from exc


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    seed = run.get("seed", 0)
    out_dir = Path(args.out_dir or run.get("out_dir") or "run")
    task = _build_task(run["task"], seed)
    config = _build_model_config(run["model"], task)
    settings = _build_settings(run)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(run, indent=2))
    try:
        rep = training.train(
            config, task, settings, seed=seed, out_dir=out_dir,
            resume_from=args.resume,
        )
    except training.TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2
    report.render_metrics(rep.records, out_dir / "training_curves.png")
    print(
        f"done: {rep.iterations} iterations, {rep.samples_seen} samples, "
        f"best accuracy {rep.best_accuracy:.4f}, stopped by {rep.stop_reason} "
        f"({rep.wall_seconds:.1f}s)"
    )
    return 0


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    seed = run.get("seed", 0)
    task = _build_task(run["task"], seed)
    config, params, _, _, counters, _ = training.load_checkpoint(args.checkpoint)
    stats = training.evaluate(task, params, config, run.get("training", {}).get("batch_size", 15))
    stats["checkpoint_iteration"] = counters["iteration"]
    out_dir = Path(args.out_dir or run.get("out_dir") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(json.dumps(stats, indent=2))
    print(json.dumps(stats))
    return 0


def cmd_gradcheck(args) -> int:
    try:
        config = TlstmConfig(
            input_size=args.inputs,
            output_size=args.outputs,
            channels=args.channels,
            variant=args.variant,
            dims=args.dims,
            tensor_size=args.tensor_size,
            kernel_size=args.kernel,
            norm=args.norm,
            layers=args.layers,
        )
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    if args.depth is not None and args.depth != config.depth:
        print(
            f"invalid geometry: requested depth {args.depth} but tensor size "
            f"{args.tensor_size} with kernel {args.kernel} implies depth {config.depth}",
            file=sys.stderr,
        )
        return 1
    seq_len = args.seq_len if args.seq_len is not None else max(config.depth, 3)
    err = ad.grad_check(config, seq_len=seq_len, seed=args.seed)
    ok = err < 1e-4
    print(f"{'PASS' if ok else 'FAIL'}, max_rel_err={err:.3e}")
    return 0 if ok else 2


def cmd_bench(args) -> int:
    depths = [int(d) for d in args.depths.split(",") if d]
    if not depths or min(depths) < 1:
        print("depths must be positive integers", file=sys.stderr)
        return 1
    task = _build_task({"preset": args.task}, seed=0)
    if not hasattr(task, "sample_batch"):
        print("bench needs a generator task (addition/memorization preset)",
              file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    batch = task.sample_batch(rng, args.batch)
    t_len = batch.inputs.shape[1]
    rows = []
    for depth in depths:
        for name in ("tLSTM", "sLSTM"):
            if name == "sLSTM":
                config = TlstmConfig(
                    input_size=task.input_size, output_size=task.output_size,
                    channels=args.channels, variant="sLSTM", layers=depth,
                )
            else:
                config = TlstmConfig(
                    input_size=task.input_size, output_size=task.output_size,
                    channels=args.channels, variant="tLSTM", dims=args.dims,
                    tensor_size=depth, kernel_size=3,
                )
            params = init_params(config, np.random.default_rng(1))
            best = np.inf
            updates = 0
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                tape = ad.Tape()
                wrapped = {k: tape.leaf(v) for k, v in params.items()}
                result = model.forward_sequence(batch, wrapped, config)
                loss = model.nll_loss(result.outputs, batch.targets, batch.mask)
                ad.backward(tape, loss, wrapped)
                best = min(best, time.perf_counter() - t0)
                updates = result.updates
            rows.append({
                "model": name,
                "depth": depth,
                "updates_per_sequence": updates,
                "wall_ms_per_step": 1000.0 * best / (t_len * args.batch),
                "params": parameter_count(config),
            })
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    report.render_bench(rows, out_dir / "bench.png")
    header = f"{'model':8s} {'L':>3s} {'updates':>8s} {'ms/step':>9s} {'params':>10s}"
    print(header)
    for r in rows:
        print(
            f"{r['model']:8s} {r['depth']:3d} {r['updates_per_sequence']:8d} "
            f"{r['wall_ms_per_step']:9.3f} {r['params']:10d}"
        )
    return 0


def cmd_trace(args) -> int:
    run = load_run_config(args.config)
    task = _build_task(run["task"], run.get("seed", 0))
    config, params, _, _, _, _ = training.load_checkpoint(args.checkpoint)
    if config.variant == "sLSTM":
        print("trace export needs a tensorized model", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.example_seed)
    batch = task.sample_batch(rng, 1) if hasattr(task, "sample_batch") else next(
        iter(task.eval_batches(1))
    )
    result = model.forward_sequence(batch, params, config, collect_trace=True)
    out_dir = Path(args.out_dir or run.get("out_dir") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = model.export_trace(result.trace, out_dir / "trace.csv")
    report.render_trace(norm, out_dir / "trace.png")
    print(f"wrote trace.csv ({norm.shape[0]} rows x {norm.shape[1]} cols) and trace.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlstm", description="train and probe tensorized LSTM models"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training protocol from a JSON config")
    p.add_argument("config")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task's held-out set")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare tape gradients with central differences")
    p.add_argument("--variant", default="tLSTM")
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--tensor-size", type=int, default=2)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--norm", default="none")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--depth", type=int, default=None,
                   help="consistency check only; must match the derived depth")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--inputs", type=int, default=3)
    p.add_argument("--outputs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="step counts, wall time and parameter counts by depth")
    p.add_argument("--task", default="addition-desk")
    p.add_argument("--depths", default="1,2,3,4")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("trace", help="export memory-cell diagonal traces for one example")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example-seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
