"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime contract violation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import load_config
from .errors import ConfigError, TerrafedError
from .experiments import (
    SWEEP_PARAMS,
    recover_bench,
    save_final_checkpoint,
    sensitivity_experiment,
    sweep,
    write_json,
)
from .federation import run_lifecycle
from .reporting import emit


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="flat key=value config file")
    parser.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terrafed",
        description="Federated continual learning simulator for terrain segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full lifecycle: tasks, rounds, recovery")
    _add_config_arg(p_run)
    p_run.add_argument("--svg", action="store_true", help="also write curves.svg")

    p_sens = sub.add_parser("sensitivity", help="layer-replacement sensitivity experiment")
    _add_config_arg(p_sens)

    p_bench = sub.add_parser("recover-bench", help="degrade-then-recover comparison")
    _add_config_arg(p_bench)

    p_sweep = sub.add_parser("sweep", help="robustness sweeps over beta/buffers/tau")
    _add_config_arg(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values; buffer lists use colons, e.g. 30:50:70")

    sub.add_parser("gradcheck", help="autodiff acceptance suite")
    return parser


def cmd_run(args) -> int:
    config = load_config(args.config)
    result = run_lifecycle(config)
    paths = emit(result, args.out, svg=args.svg)
    checkpoint = os.path.join(args.out, "checkpoint.json")
    save_final_checkpoint(result, checkpoint)
    paths["checkpoint"] = checkpoint
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    final = result.task_summaries[-1].end_miou
    print(f"final cumulative mIoU: {final:.4f} (tau {result.tau:.4f})")
    return 0


def cmd_sensitivity(args) -> int:
    config = load_config(args.config)
    outcome = sensitivity_experiment(config)
    payload = {
        "base_miou": outcome.result.base_miou,
        "delta_miou": outcome.result.delta_miou,
        "forgetting_shares": outcome.result.shares,
        "degenerate": outcome.result.degenerate,
        "task0_miou": outcome.task0_miou,
        "final_miou": outcome.final_miou,
    }
    path = os.path.join(args.out, "sensitivity.json")
    write_json(path, payload)
    for group in ("shallow", "deep", "head"):
        print(
            f"{group:8s} delta mIoU {outcome.result.delta_miou[group]:+.4f}  "
            f"share {outcome.result.shares[group]:+.3f}"
        )
    print(f"wrote {path}")
    return 0


def cmd_recover_bench(args) -> int:
    config = load_config(args.config)
    outcome = recover_bench(config)
    payload = {
        "tau": outcome.tau,
        "task0_miou": outcome.task0_miou,
        "mean_epochs": outcome.mean_epochs,
        "epochs": {m: {str(k): v for k, v in d.items()} for m, d in outcome.epochs.items()},
        "capped": outcome.capped,
        "degraded_miou": {str(k): v for k, v in outcome.degraded_miou_per_client.items()},
    }
    path = os.path.join(args.out, "recover_bench.json")
    write_json(path, payload)
    for method, mean in sorted(outcome.mean_epochs.items()):
        print(f"{method:8s} mean epochs to tau: {mean:.2f}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    raw_values = [v for v in args.values.split(",") if v]
    if not raw_values:
        raise ConfigError("sweep needs at least one value")
    outcome = sweep(config, args.param, raw_values)
    path = os.path.join(args.out, f"sweep_{args.param}.json")
    write_json(path, {"param": outcome.param, "rows": outcome.rows})
    for row in outcome.rows:
        print(f"{args.param}={row['value']}: final mIoU {row['final_miou']:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import tensor as T
    from .segnet import SegNet

    rng = np.random.default_rng(0)
    net = SegNet.init_random(3, np.random.default_rng(21))
    img = T.Tensor(rng.uniform(size=(3, 8, 8)))
    labels = rng.integers(0, 3, size=(8, 8))

    def closure():
        return T.pixel_cross_entropy(net.forward(img), labels)

    report = T.grad_check(closure, dict(net.param_items()), step=1e-5, tol=1e-4)
    worst = max(report.errors.items(), key=lambda kv: kv[1])
    print(f"segnet gradcheck: max relative error {report.max_rel_error:.3e} "
          f"(worst: {worst[0]})")
    if not report.passed:
        print("gradcheck FAILED")
        return 2
    print("gradcheck passed")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "sensitivity": cmd_sensitivity,
        "recover-bench": cmd_recover_bench,
        "sweep": cmd_sweep,
        "gradcheck": cmd_gradcheck,
    }
    try:
        code = handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TerrafedError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
