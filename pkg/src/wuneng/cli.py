"""Command-line front end: train, eval, gradcheck, params, ablate.

Conventions:
  * plain-text configs, one ``key = value`` per line, ``#`` comments;
    ``--set key=value`` overrides file values; unknown keys are rejected
  * machine-readable JSON records go to stdout, everything human-readable
    goes to stderr
  * exit 0 on success, 1 on usage or config errors, 2 on numeric aborts

The metrics file written by ``train`` holds step/loss/acc only; wall-clock
times appear on the live stdout stream but would break byte-identical
replay of the file, so they stay out of it.
"""

from __future__ import annotations

import os

for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_k, "1")

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import CombineMode, MiddleMode
from .gradcheck import run_suite
from .harness import (TrainConfig, TrainDiverged, evaluate, train)
from .model import (CheckpointError, ModelConfig, count_params, init_params,
                    load_checkpoint, save_checkpoint)
from .numerics import NumericOverflow


class ConfigError(ValueError):
    pass


DEFAULTS = {
    # model
    "vocab_size": 64,
    "d_model": 64,
    "n_heads": 4,
    "n_layers": 2,
    "d_ffn": 0,  # 0 = 4 * d_model
    "combine_mode": "concat_project",
    "middle_mode": "gated",
    "seed": 0,
    # training
    "task": "copy",
    "steps": 3000,
    "batch": 32,
    "seq_len": 32,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
}

# gradcheck is quadratic in parameter count; default to the small shape
GRADCHECK_DEFAULTS = {"vocab_size": 11, "d_model": 8, "n_heads": 2,
                      "n_layers": 2, "seed": 7}

_INT_KEYS = {"vocab_size", "d_model", "n_heads", "n_layers", "d_ffn", "seed",
             "steps", "batch", "seq_len"}
_FLOAT_KEYS = {"lr", "beta1", "beta2", "adam_eps"}


@dataclass
class RunConfig:
    values: dict
    explicit: set

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            vocab_size=v["vocab_size"], d_model=v["d_model"],
            n_heads=v["n_heads"], n_layers=v["n_layers"], d_ffn=v["d_ffn"],
            combine_mode=CombineMode(v["combine_mode"]),
            middle_mode=MiddleMode(v["middle_mode"]), seed=v["seed"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(task=v["task"], steps=v["steps"], batch=v["batch"],
                           seq_len=v["seq_len"], lr=v["lr"], seed=v["seed"],
                           beta1=v["beta1"], beta2=v["beta2"],
                           adam_eps=v["adam_eps"])

    def to_lines(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    if key == "combine_mode" and raw not in [m.value for m in CombineMode]:
        raise ConfigError(f"bad value for combine_mode: {raw!r}")
    if key == "middle_mode" and raw not in [m.value for m in MiddleMode]:
        raise ConfigError(f"bad value for middle_mode: {raw!r}")
    return raw


def parse_run_config(path: str | None, overrides: list[str] | None) -> RunConfig:
    values = dict(DEFAULTS)
    explicit = set()

    def apply(key: str, raw: str, where: str):
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} in {where}")
        values[key] = _parse_value(key, raw)
        explicit.add(key)

    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path!r}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            apply(key, raw, f"{path}:{lineno}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key, raw, "--set")
    return RunConfig(values=values, explicit=explicit)


def emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def note(msg: str) -> None:
    sys.stderr.write(msg + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = parse_run_config(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = run.model_config()
    train_cfg = run.train_config()
    params = init_params(model_cfg)
    (out_dir / "config.txt").write_text(run.to_lines())
    note(f"training {train_cfg.task} for {train_cfg.steps} steps "
         f"(d_model={model_cfg.d_model}, heads={model_cfg.n_heads}, "
         f"layers={model_cfg.n_layers}, middle={model_cfg.middle_mode.value})")

    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as metrics:
        def on_step(rec):
            emit({"step": rec.step, "loss": rec.loss, "acc": rec.acc,
                  "ms": rec.ms})
            metrics.write(json.dumps(
                {"step": rec.step, "loss": rec.loss, "acc": rec.acc}) + "\n")
            if rec.step % 100 == 0 or rec.step == train_cfg.steps - 1:
                note(f"step {rec.step:5d}  loss {rec.loss:.4f}  acc {rec.acc:.3f}")

        try:
            train(params, train_cfg, on_step=on_step)
        except (TrainDiverged, NumericOverflow, ArithmeticError) as e:
            note(f"numeric abort: {e}")
            return 2
    save_checkpoint(out_dir / "checkpoint.bin", params)
    note(f"wrote {metrics_path} and {out_dir / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    params = load_checkpoint(args.checkpoint)
    loss, acc = evaluate(params, args.task, args.n, args.seq_len, seed=args.seed)
    emit({"task": args.task, "n": args.n, "seq_len": args.seq_len,
          "seed": args.seed, "loss": loss, "acc": acc})
    return 0


def cmd_gradcheck(args) -> int:
    run = parse_run_config(args.config, args.set)
    dims = {k: (run.values[k] if k in run.explicit else v)
            for k, v in GRADCHECK_DEFAULTS.items()}
    all_ok = True
    reports = []
    for cfg, report in run_suite(d_model=dims["d_model"], n_heads=dims["n_heads"],
                                 n_layers=dims["n_layers"],
                                 vocab_size=dims["vocab_size"], seed=dims["seed"]):
        ok = report.passed
        all_ok = all_ok and ok
        worst = report.worst()
        note(f"[{cfg.combine_mode.value} / {cfg.middle_mode.value}]")
        note(report.render())
        emit({"combine_mode": cfg.combine_mode.value,
              "middle_mode": cfg.middle_mode.value, "passed": ok,
              "worst_tensor": worst.name, "worst_rel": worst.max_rel})
        reports.append((cfg, report))
    if args.report_file:
        with open(args.report_file, "w") as fh:
            for cfg, report in reports:
                fh.write(json.dumps({
                    "combine_mode": cfg.combine_mode.value,
                    "middle_mode": cfg.middle_mode.value,
                    "report": json.loads(report.to_json()),
                }) + "\n")
    return 0 if all_ok else 1


def cmd_params(args) -> int:
    run = parse_run_config(args.config, args.set)
    counts = count_params(run.model_config())
    note(f"{'component':<24} {'floats':>12}")
    for part, vals in (("base", counts.base), ("additions", counts.additions)):
        for k, v in vals.items():
            note(f"{part + '.' + k:<24} {v:>12}")
    note(f"{'total':<24} {counts.total:>12}")
    note(f"additions / base ratio: {counts.ratio:.4f}")
    emit({"base": counts.base, "additions": counts.additions,
          "base_total": counts.base_total,
          "additions_total": counts.additions_total,
          "total": counts.total, "ratio": counts.ratio})
    return 0


def cmd_ablate(args) -> int:
    run = parse_run_config(args.config, args.set)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in [x.value for x in MiddleMode]:
            raise ConfigError(f"unknown middle mode {m!r} in --modes")
    table = {}
    for mode in modes:
        values = dict(run.values)
        values["middle_mode"] = mode
        mode_run = RunConfig(values=values, explicit=run.explicit | {"middle_mode"})
        params = init_params(mode_run.model_config())
        records = train(params, mode_run.train_config())
        loss, acc = evaluate(params, values["task"], args.eval_n,
                             values["seq_len"], seed=args.eval_seed)
        table[mode] = {"final_train_loss": records[-1].loss if records else None,
                       "final_train_acc": records[-1].acc if records else None,
                       "eval_loss": loss, "eval_acc": acc}
        note(f"mode {mode:<10} eval_acc {acc:.3f}  eval_loss {loss:.4f}")
    emit({"task": run.values["task"], "modes": table})
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        note(f"error: {message}")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wuneng",
                     description="hybrid-head sequence model workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p_train = sub.add_parser("train", help="train a model on a synthetic task")
    add_config_args(p_train)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--task", default="copy", choices=["copy", "assoc_recall",
                                                           "perm_compose"])
    p_eval.add_argument("--n", type=int, default=256, help="number of samples")
    p_eval.add_argument("--seq-len", type=int, default=32)
    p_eval.add_argument("--seed", type=int, default=12345)
    p_eval.set_defaults(fn=cmd_eval)

    p_grad = sub.add_parser("gradcheck",
                            help="analytic vs finite-difference gradients, "
                                 "all fusion modes")
    add_config_args(p_grad)
    p_grad.add_argument("--report-file", default=None,
                        help="write machine-readable reports here")
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_params = sub.add_parser("params", help="parameter accounting")
    add_config_args(p_params)
    p_params.set_defaults(fn=cmd_params)

    p_ablate = sub.add_parser("ablate",
                              help="train matched seeds across middle modes")
    add_config_args(p_ablate)
    p_ablate.add_argument("--modes", default="off,concat,additive,gated")
    p_ablate.add_argument("--eval-n", type=int, default=256)
    p_ablate.add_argument("--eval-seed", type=int, default=12345)
    p_ablate.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, ValueError, OSError) as e:
        note(f"error: {e}")
        return 1
    except (TrainDiverged, NumericOverflow, ArithmeticError) as e:
        note(f"numeric abort: {e}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
