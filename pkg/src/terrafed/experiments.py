"""Analysis experiments on top of the lifecycle: sensitivity, recovery bench, sweeps."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .federation import LifecycleResult, run_lifecycle
from .lsr import preserved_knowledge
from .metrics import SensitivityResult, layer_sensitivity
from .rkr import RecoveryFn, cache_features, encode_and_fuse, head_sgd, meta_train, _head_miou
from .rng import stream
from .segnet import FEATURE_DIM, SegNet
from .serialize import save_checkpoint
from .terrain import MemoryBuffer


@dataclass
class SensitivityOutcome:
    result: SensitivityResult
    final_miou: float
    task0_miou: float


def sensitivity_experiment(config: ExperimentConfig) -> SensitivityOutcome:
    """Train task 0, continue with plain rehearsal, then swap groups back.

    The continued model keeps the exemplar memory but no stratified
    corrections: rehearsal holds the backbone compatible across tasks, so the
    replacement deltas isolate where forgetting actually lives. The base
    model must be near-converged for the deltas to measure forgetting rather
    than leftover underfitting, so the local budget is floored.
    """
    run_cfg = config.replace(
        mode="uniform", recovery="off", local_epochs=max(config.local_epochs, 24)
    )
    result = run_lifecycle(run_cfg)
    sens = layer_sensitivity(result.task0_model, result.model, result.test_splits[0])
    return SensitivityOutcome(
        result=sens,
        final_miou=result.task_summaries[-1].end_miou,
        task0_miou=result.task0_miou,
    )


@dataclass
class RecoverBenchOutcome:
    tau: float
    task0_miou: float
    degraded_miou_per_client: dict[int, float]
    epochs: dict[str, dict[int, int]]        # method -> client -> epochs to tau
    mean_epochs: dict[str, float]
    capped: dict[str, int]                   # clients that hit the epoch cap


BENCH_METHODS = ("rkr", "warm", "retrain")


def recover_bench(config: ExperimentConfig, max_epochs: int | None = None) -> RecoverBenchOutcome:
    """Degrade the head after task 0 and race three repair strategies to tau.

    rkr: psi correction then head fine-tuning on the client buffer;
    warm: fine-tuning from the degraded head unchanged;
    retrain: fine-tuning from a fresh randomly re-initialized head.
    """
    run_cfg = config.replace(tasks=1, recovery="on")
    result = run_lifecycle(run_cfg)
    if result.psi is None:
        raise ConfigError("recover-bench requires a trained recovery function")
    cap = max_epochs if max_epochs is not None else max(30, 3 * config.max_finetune_epochs)
    model = result.model
    test = result.test_splits[0]
    test_feats = cache_features(model, test)
    test_labels = [s.labels for s in test]
    classes = model.class_count
    tau = result.tau
    degrade_rng = stream(config.seed, "degrade")
    head_scale = float(np.sqrt(3.0 / FEATURE_DIM))
    w_deg = degrade_rng.uniform(-head_scale, head_scale, size=(classes, FEATURE_DIM))
    b_deg = np.zeros(classes)

    epochs: dict[str, dict[int, int]] = {m: {} for m in BENCH_METHODS}
    capped: dict[str, int] = {m: 0 for m in BENCH_METHODS}
    degraded_miou: dict[int, float] = {}

    for client in result.clients:
        if client.buffer.is_empty():
            continue
        mem = client.buffer.all_samples()
        mem_feats = cache_features(model, mem)
        mem_labels = [s.labels for s in mem]
        pk = preserved_knowledge(client.buffer, model)
        degraded_miou[client.id] = _head_miou(w_deg, b_deg, test_feats, test_labels, classes)
        reinit_rng = stream(config.seed, "reinit", client.id)
        starts = {
            "rkr": None,  # filled below
            "warm": (w_deg.copy(), b_deg.copy()),
            "retrain": (
                reinit_rng.uniform(-head_scale, head_scale, size=(classes, FEATURE_DIM)),
                np.zeros(classes),
            ),
        }
        d_w, d_b = encode_and_fuse(result.psi, w_deg, b_deg, pk)
        starts["rkr"] = (w_deg + d_w, b_deg + d_b)
        for method in BENCH_METHODS:
            w, b = starts[method]
            rng = stream(config.seed, f"bench-{method}", client.id)
            used = 0
            miou = _head_miou(w, b, test_feats, test_labels, classes)
            while miou < tau and used < cap:
                order = rng.permutation(len(mem))
                for pos in range(0, len(order), config.batch):
                    idx = order[pos:pos + config.batch]
                    w, b = head_sgd(
                        w, b, [mem_feats[i] for i in idx], [mem_labels[i] for i in idx],
                        1, config.recover_lr,
                    )
                used += 1
                miou = _head_miou(w, b, test_feats, test_labels, classes)
            epochs[method][client.id] = used
            if miou < tau:
                capped[method] += 1
    mean_epochs = {
        m: float(np.mean(list(v.values()))) if v else float("nan") for m, v in epochs.items()
    }
    return RecoverBenchOutcome(
        tau=tau,
        task0_miou=result.task0_miou,
        degraded_miou_per_client=degraded_miou,
        epochs=epochs,
        mean_epochs=mean_epochs,
        capped=capped,
    )


SWEEP_PARAMS = ("beta", "buffers", "tau")


def parse_sweep_values(param: str, raw_values: list[str], config: ExperimentConfig):
    values = []
    for raw in raw_values:
        if param == "beta":
            values.append(float(raw))
        elif param == "tau":
            values.append(float(raw))
        elif param == "buffers":
            if ":" in raw:
                values.append([int(x) for x in raw.split(":")])
            else:
                values.append(int(raw))
        else:
            raise ConfigError(f"unknown sweep parameter {param!r}")
    return values


def apply_sweep_value(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param == "beta":
        return config.replace(beta=value)
    if param == "tau":
        return config.replace(tau_fraction=value)
    if param == "buffers":
        return config.replace(buffer_capacity=value)
    raise ConfigError(f"unknown sweep parameter {param!r}")


@dataclass
class SweepOutcome:
    param: str
    rows: list[dict]


def sweep(config: ExperimentConfig, param: str, raw_values: list[str]) -> SweepOutcome:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    rows = []
    for raw, value in zip(raw_values, parse_sweep_values(param, raw_values, config)):
        result = run_lifecycle(apply_sweep_value(config, param, value))
        table = result.forgetting_table
        rows.append(
            {
                "value": raw,
                "final_miou": result.task_summaries[-1].end_miou,
                "task0_miou": result.task0_miou,
                "mean_forgetting_miou": (
                    float(np.mean(list(table.cumulative_miou.values())))
                    if table is not None and table.cumulative_miou
                    else None
                ),
                "triggers": sum(
                    1 for s in result.task_summaries if s.trigger is not None
                ),
            }
        )
    return SweepOutcome(param=param, rows=rows)


def write_json(path, payload) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_final_checkpoint(result: LifecycleResult, path) -> None:
    save_checkpoint(
        path,
        result.model,
        psi=result.psi,
        generators={c.id: c.generators for c in result.clients},
    )
