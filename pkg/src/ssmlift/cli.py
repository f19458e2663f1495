"""Command line surface: train, eval, infer, gradcheck, bench-scan, ablate.

Exit codes: 0 success, 2 configuration error, 3 numerical failure. All
output is line-oriented key=value so runs are machine-parseable.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data_io import load_dataset, save_dataset, SequenceRecord
from .errors import (
    AlignmentError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EvaluationError,
    NumericalFailure,
    ParameterError,
    ParseError,
    StructureError,
    ValidationError,
)
from .losses_metrics import LossWeights, total_loss
from .model import ModelConfig, PoseLifter, load_checkpoint, parameter_count
from .numerics import Tensor, grad_check
from .ssm_core import DiscretizedStep, scan_parallel, scan_sequential
from .training import TrainConfig, evaluate_records, predict_record, run_ablation, train

__all__ = ["main", "entry", "cmd_train", "cmd_eval", "cmd_infer",
           "cmd_gradcheck", "cmd_bench_scan", "cmd_ablate"]

_CONFIG_ERRORS = (ConfigError, ParseError, ValidationError, ParameterError,
                  StructureError, DimensionError)
_NUMERIC_ERRORS = (NumericalFailure, EvaluationError, AlignmentError, DegenerateInputError)


def _kv(**kw) -> None:
    print(" ".join(f"{k}={v}" for k, v in kw.items()), flush=True)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.checkpoint_dir = args.out
    if args.flip:
        cfg.flip_augment = True
    result = train(cfg)
    _kv(event="train_complete", checkpoint=result.checkpoint_path,
        steps=result.steps_run, final_train_mpjpe=f"{result.final_train_mpjpe:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.dataset)
    report = evaluate_records(model, records, flip=args.flip, protocol=args.protocol)
    table = report.to_table()
    if args.out:
        Path(args.out).write_text(table)
        _kv(event="eval_table_written", path=args.out)
    sys.stdout.write(table)
    _kv(event="eval_complete", protocol=args.protocol, flip=args.flip,
        mpjpe=f"{report.aggregate.mpjpe_mm:.4f}",
        p_mpjpe=f"{report.aggregate.p_mpjpe_mm:.4f}",
        mpjve=f"{report.aggregate.mpjve_mm:.4f}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.input)
    out_records = []
    for record in records:
        pred = predict_record(model, record, flip=args.flip)
        out_records.append(SequenceRecord(
            id=record.id,
            action=record.action,
            fps=record.fps,
            keypoints_2d=record.keypoints_2d,
            poses_3d=pred,
            confidence=record.confidence,
        ))
    save_dataset(out_records, args.out)
    _kv(event="infer_complete", records=len(out_records), out=args.out)
    return 0


def _gradcheck_config(args) -> ModelConfig:
    if args.config:
        obj = json.loads(Path(args.config).read_text())
        obj.setdefault("precision", args.precision)
        return ModelConfig.from_dict(obj)
    return ModelConfig(depth=2, d_m=8, frames=4, joints=17, state_size=16,
                       precision=args.precision)


def cmd_gradcheck(args) -> int:
    """Finite-difference check of the full model loss at reduced size.

    The checked function is the composite loss on unit-scale targets with
    unit weights, normalized to ~1e-2 magnitude: central differences are
    cancellation-limited otherwise, which would fail any correct gradient.
    """
    config = _gradcheck_config(args)
    model = PoseLifter(config, seed=args.seed or 0)
    rng = np.random.default_rng((args.seed or 0) + 7)
    t, j = config.frames, config.joints
    c = rng.normal(0.0, 0.3, size=(t, j, 2))
    gt = rng.normal(0.0, 1.0, size=(t, j, 3))
    gt[:, 0, :] = 0.0
    weights = LossWeights(1.0, 1.0, 1.0)

    def loss_fn(_: Tensor) -> Tensor:
        pred = model.forward(c, mode=args.mode)
        return nm.mul(total_loss(pred, gt, c, weights), 2e-4)

    worst_name, worst = "", 0.0
    for name, tensor in model.named_parameters().items():
        err = grad_check(loss_fn, tensor, h=args.h)
        if err > worst:
            worst_name, worst = name, err
        _kv(event="gradcheck", tensor=name, rel_err=f"{err:.3e}")
    passed = worst < args.tolerance
    _kv(event="gradcheck_summary", worst_tensor=worst_name, worst_rel_err=f"{worst:.3e}",
        tolerance=args.tolerance, status="pass" if passed else "fail")
    return 0 if passed else 3


def _scan_inputs(length: int, rng: np.random.Generator, dtype=np.float64):
    d_inner, n = 16, 8
    a = np.exp(-rng.uniform(0.05, 1.0, size=(length, d_inner, n))).astype(dtype)
    b = rng.normal(size=(length, d_inner, n)).astype(dtype)
    return DiscretizedStep(a_bar=Tensor(a, copy=False), b_bar_x=Tensor(b, copy=False))


def _time_scan(fn, steps, repeats: int = 5) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        with nm.no_grad():
            fn(steps)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_bench_scan(args) -> int:
    lengths = sorted(int(v) for v in args.lengths.split(","))
    rng = np.random.default_rng(args.seed or 0)
    # Verification pass before timing.
    steps = _scan_inputs(257, rng)
    seq_states, _ = scan_sequential(steps)
    par_states, _ = scan_parallel(steps)
    gap = float(np.max(np.abs(seq_states.data - par_states.data)))
    _kv(event="bench_verify", length=257, max_abs_diff=f"{gap:.3e}")
    if gap > 1e-10:
        _kv(event="bench_verify_failed", tolerance="1e-10")
        return 3
    results = {}
    for length in lengths:
        steps = _scan_inputs(length, rng)
        row = {"length": length}
        if args.mode in ("sequential", "both"):
            row["seq_ms"] = 1e3 * _time_scan(lambda s: scan_sequential(s), steps)
        if args.mode in ("parallel", "both"):
            row["par_ms"] = 1e3 * _time_scan(lambda s: scan_parallel(s), steps)
        results[length] = row
        _kv(event="bench", **{k: (f"{v:.3f}" if isinstance(v, float) else v)
                              for k, v in row.items()})
    key = "par_ms" if args.mode == "parallel" else ("seq_ms" if args.mode == "sequential" else "par_ms")
    ok = True
    for length in lengths:
        if 2 * length in results and length >= 1024:
            ratio = results[2 * length][key] / max(results[length][key], 1e-9)
            _kv(event="bench_ratio", base=length, ratio=f"{ratio:.3f}", bound=2.5)
            if ratio >= 2.5:
                ok = False
    _kv(event="bench_complete", status="pass" if ok else "fail")
    return 0 if ok else 3


def cmd_ablate(args) -> int:
    rows = run_ablation(seed=args.seed or 0, steps=args.steps, log=print)
    header = ["strategy", "params", "macs", "final_mpjpe"]
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join([row["strategy"], str(row["params"]), str(row["macs"]),
                                f"{row['final_mpjpe']:.4f}"]))
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(table)
        _kv(event="ablate_table_written", path=args.out)
    sys.stdout.write(table)
    bad = [r for r in rows if not np.isfinite(r["final_mpjpe"])]
    return 3 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmlift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="checkpoint directory override")
    p.add_argument("--flip", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--protocol", choices=("p1", "p2", "all"), default="all")
    p.add_argument("--flip", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="predict 3D poses for 2D records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flip", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check at reduced size")
    p.add_argument("--config", default=None, help="ModelConfig JSON override")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=("sequential", "parallel"), default="parallel")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time sequential vs parallel scans")
    p.add_argument("--lengths", default="1024,2048,4096")
    p.add_argument("--mode", choices=("sequential", "parallel", "both"), default="both")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_bench_scan)

    p = sub.add_parser("ablate", help="compare scan strategies on synthetic data")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=30)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (*_CONFIG_ERRORS, FileNotFoundError) as e:
        _kv(event="error", kind="config", message=repr(str(e)))
        return 2
    except _NUMERIC_ERRORS as e:
        _kv(event="error", kind="numerical", message=repr(str(e)))
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
