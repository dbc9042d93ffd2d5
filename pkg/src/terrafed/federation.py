"""In-process server/client round loop over the full training lifecycle.

Transport is simulated: distribution and upload move model parameters only
(an explicit byte ledger records them), generators never leave the client,
and the recovery function is broadcast exactly once at the end of task 0.
Per-client random streams are keyed by (seed, client, task, round), so a
round's outcome is identical no matter how client training is interleaved.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import DimensionError
from .lsr import GeneratorSet, LocalHyper, ProtectionWeights, local_train
from .metrics import EvalResult, evaluate, forgetting
from .rkr import RecoveryFn, check_trigger, meta_train, recover
from .rng import stream
from .segnet import LayerGroup, SegNet, expand_head
from .tensor import Tensor
from .terrain import (
    MemoryBuffer,
    TerrainSample,
    buffer_update,
    dirichlet_partition,
    gen_terrain,
    majority_label,
    make_task_sequence,
    mask_for_task,
)

BYTES_PER_PARAM = 8


@dataclass
class ClientState:
    """Everything that lives on one simulated rover between rounds."""

    id: int
    buffer: MemoryBuffer
    generators: GeneratorSet
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    shard: list[TerrainSample] = field(default_factory=list)
    theta_ref: dict[str, np.ndarray] = field(default_factory=dict)
    psi: RecoveryFn | None = None


@dataclass
class RoundRecord:
    task: int
    round: int
    selected: list[int]
    mean_train_loss: float
    miou_cumulative: float
    per_class_iou: list[float | None]
    bytes_up: int
    bytes_down: int


@dataclass
class TriggerEvent:
    task: int
    tau: float
    miou_before: float
    miou_after: float
    epochs_per_client: dict[int, int]


@dataclass
class TaskSummary:
    task: int
    classes: tuple[int, ...]
    end_miou: float
    per_class_iou: list[float | None]
    split_evals: dict[int, tuple[float, float]]  # t' -> (loss, miou)
    trigger: TriggerEvent | None


@dataclass
class BufferAudit:
    task: int
    client: int
    capacity: int
    total: int
    per_class: dict[int, int]


@dataclass
class LifecycleResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    task_summaries: list[TaskSummary]
    forgetting_table: object
    tau: float
    task0_miou: float
    psi_broadcast_bytes: int
    buffer_audits: list[BufferAudit]
    model: SegNet
    psi: RecoveryFn | None
    clients: list[ClientState]
    test_splits: list[list[TerrainSample]]
    task0_model: SegNet
    task0_train: list[TerrainSample]

    def cumulative_test(self, task: int) -> list[TerrainSample]:
        out: list[TerrainSample] = []
        for split in self.test_splits[: task + 1]:
            out.extend(split)
        return out


def select_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, size ceil(fraction * K), sorted."""
    size = max(1, math.ceil(fraction * n_clients))
    picked = rng.choice(n_clients, size=size, replace=False)
    return sorted(int(k) for k in picked)


def aggregate(models: list[SegNet]) -> SegNet:
    """Unweighted elementwise mean of all parameters."""
    if not models:
        raise DimensionError("aggregate needs at least one model")
    first = models[0]
    for other in models[1:]:
        for name, p in first.param_items():
            if other.params[name].shape != p.shape:
                raise DimensionError(f"heterogeneous shapes for {name}")
    out = first.clone()
    if len(models) == 1:
        return out
    n = float(len(models))
    for name, p in out.param_items():
        acc = models[0].params[name].data.copy()
        for other in models[1:]:
            acc = acc + other.params[name].data
        p.data = acc / n
    return out


def _sample_seeds(cfg_seed: int, tag: str, task: int, count: int) -> list[int]:
    return [int(s) for s in stream(cfg_seed, tag, task).integers(0, 2**62, size=count)]


def build_test_splits(config: ExperimentConfig, tasks) -> list[list[TerrainSample]]:
    """Held-out per-task pools with full labels over all classes seen so far."""
    splits = []
    seen: list[int] = []
    for task in tasks:
        seen.extend(task.classes)
        seeds = _sample_seeds(config.seed, "test", task.id, config.test_samples_per_task)
        splits.append(
            [
                gen_terrain(s, tuple(seen), config.grid, config.grid,
                            config.n_cells, config.sigma_noise)
                for s in seeds
            ]
        )
    return splits


def build_task_data(config: ExperimentConfig, tasks, task_id: int) -> list[TerrainSample]:
    """Fresh samples over all seen classes, conditioned on new-class presence.

    Incremental-task draws are retried deterministically until a new-class
    pixel appears: the data exists because new terrain showed up in it.
    """
    seen: list[int] = []
    for task in tasks[: task_id + 1]:
        seen.extend(task.classes)
    new_classes = np.array(tasks[task_id].classes)
    seeds = _sample_seeds(config.seed, "train", task_id, tasks[task_id].sample_count)
    out = []
    for s in seeds:
        attempt = 0
        while True:
            sample = gen_terrain(
                s + attempt, tuple(seen), config.grid, config.grid,
                config.n_cells, config.sigma_noise,
            )
            if task_id == 0 or np.isin(sample.labels, new_classes).any():
                break
            attempt += 1
        out.append(sample)
    return out


def _alphas_for(config: ExperimentConfig, task_id: int):
    """Correction strengths for this mode and task; None disables corrections.

    uniform mode is plain rehearsal SGD (the same-lambda replay baseline):
    zero generator outputs reduce an LSR step to exactly this.
    """
    if config.mode in ("finetune", "uniform") or task_id == 0:
        return None
    return ProtectionWeights(config.alpha_s, config.alpha_d, config.alpha_c).mapping()


def _local_hyper(config: ExperimentConfig, task_id: int) -> LocalHyper:
    return LocalHyper(
        eta=config.lr_base if task_id == 0 else config.lr_incr,
        lam=config.rehearsal_lambda,
        alphas=_alphas_for(config, task_id),
        epochs=config.local_epochs,
        batch=config.batch,
        mu_momentum=config.momentum,
        weight_decay=config.weight_decay,
        eta_gen=config.eta_gen,
        rehearse=config.mode != "finetune",
        fresh_head_rows=config.classes_per_increment if task_id > 0 else 0,
    )


def run_round(
    server_model: SegNet,
    clients: list[ClientState],
    config: ExperimentConfig,
    task_id: int,
    round_id: int,
    cumulative_test: list[TerrainSample],
) -> tuple[SegNet, RoundRecord]:
    """Distribute, train selected clients, aggregate, evaluate."""
    selected = select_clients(
        config.clients, config.client_fraction, stream(config.seed, "select", task_id, round_id)
    )
    hyper = _local_hyper(config, task_id)

    def train_one(k: int):
        client = clients[k]
        return local_train(
            server_model,
            client.generators,
            client.shard,
            client.buffer,
            hyper,
            client.theta_ref,
            client.momentum,
            stream(config.seed, "local", k, task_id, round_id),
        )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = dict(zip(selected, pool.map(train_one, selected)))
    else:
        results = {k: train_one(k) for k in selected}
    new_model = aggregate([results[k].net for k in selected])
    losses = [results[k].mean_loss for k in selected]
    ev = evaluate(new_model, cumulative_test, new_model.class_count)
    payload = server_model.param_count() * BYTES_PER_PARAM
    record = RoundRecord(
        task=task_id,
        round=round_id,
        selected=selected,
        mean_train_loss=float(np.mean(losses)),
        miou_cumulative=ev.miou,
        per_class_iou=ev.per_class_iou,
        bytes_up=len(selected) * payload,
        bytes_down=len(selected) * payload,
    )
    return new_model, record


def _candidates_by_containment(
    samples: list[TerrainSample], model: SegNet
) -> dict[int, tuple[list[TerrainSample], np.ndarray]]:
    """A sample is a candidate for every class it has supervised pixels of."""
    if not samples:
        return {}
    feats = model.features(Tensor(np.stack([s.image for s in samples]))).data.mean(axis=(2, 3))
    by_class: dict[int, tuple[list[TerrainSample], list[int]]] = {}
    for i, s in enumerate(samples):
        for cls in np.unique(s.labels):
            if cls == 255:
                continue
            by_class.setdefault(int(cls), ([], []))[0].append(s)
            by_class[int(cls)][1].append(i)
    return {
        cls: (group, feats[np.array(idx)]) for cls, (group, idx) in sorted(by_class.items())
    }


def _update_client_buffer(
    client: ClientState, model: SegNet, seen_class_count: int
) -> None:
    """Admit this task's shard into the exemplar buffer via herding."""
    candidates = _candidates_by_containment(client.shard, model)
    client.buffer = buffer_update(client.buffer, candidates, seen_class_count)


def _server_reference_buffer(
    config: ExperimentConfig, model: SegNet, task0_data: list[TerrainSample]
) -> MemoryBuffer:
    """Server-side exemplar set over the full task-0 pool, for meta-training."""
    capacity = (
        max(config.buffer_capacity)
        if isinstance(config.buffer_capacity, list)
        else config.buffer_capacity
    )
    candidates = _candidates_by_containment(task0_data, model)
    return buffer_update(MemoryBuffer(capacity), candidates, config.base_classes)


def run_lifecycle(config: ExperimentConfig) -> LifecycleResult:
    """Algorithm-1 end to end: task 0, meta-training, incremental tasks, recovery."""
    tasks = make_task_sequence(
        config.total_classes, config.base_classes, config.classes_per_increment,
        config.samples_per_task, config.seed,
    )
    test_splits = build_test_splits(config, tasks)
    model = SegNet.init_random(config.base_classes, stream(config.seed, "init"))
    clients = [
        ClientState(
            id=k,
            buffer=MemoryBuffer(config.capacity_for(k)),
            generators=GeneratorSet.init_random(stream(config.seed, "gen", k)),
        )
        for k in range(config.clients)
    ]
    records: list[RoundRecord] = []
    summaries: list[TaskSummary] = []
    audits: list[BufferAudit] = []
    eval_log: dict[int, dict[int, tuple[float, float]]] = {}
    psi: RecoveryFn | None = None
    psi_broadcast_bytes = 0
    tau = 0.0
    task0_miou = 0.0
    task0_model: SegNet | None = None
    task0_data: list[TerrainSample] = []

    for task in tasks:
        t = task.id
        if t > 0:
            model = expand_head(
                model, config.classes_per_increment, config.init_scale,
                stream(config.seed, "expand", t),
            )
        data = build_task_data(config, tasks, t)
        shards = dirichlet_partition(
            data, config.clients, config.beta,
            int(stream(config.seed, "part", t).integers(0, 2**62)),
        )
        ref = {name: p.data.copy() for name, p in model.param_items()}
        for client in clients:
            client.shard = [mask_for_task(s, task) for s in shards[client.id].samples]
            client.theta_ref = ref
            client.momentum = {}
        cumulative = [s for split in test_splits[: t + 1] for s in split]
        for r in range(1, config.rounds + 1):
            model, record = run_round(model, clients, config, t, r, cumulative)
            records.append(record)
        seen = sum(len(tk.classes) for tk in tasks[: t + 1])
        for client in clients:
            _update_client_buffer(client, model, seen)
            audits.append(
                BufferAudit(
                    task=t, client=client.id, capacity=client.buffer.capacity,
                    total=client.buffer.total(),
                    per_class={c: len(v) for c, v in sorted(client.buffer.exemplars.items())},
                )
            )
        eval_log[t] = {}
        for t_prev in range(t + 1):
            ev = evaluate(model, test_splits[t_prev], model.class_count)
            eval_log[t][t_prev] = (ev.loss, ev.miou)
        end_eval = evaluate(model, cumulative, model.class_count)
        trigger_event: TriggerEvent | None = None

        if t == 0:
            task0_miou = end_eval.miou
            tau = config.tau_override if config.tau_override is not None else (
                config.tau_fraction * task0_miou
            )
            task0_model = model.clone()
            task0_data = data
            if config.recovery_enabled:
                psi = RecoveryFn(stream(config.seed, "psi"))
                server_buffer = _server_reference_buffer(config, model, data)
                meta_train(
                    psi, model, data, server_buffer, config.episodes, config.inner_steps,
                    config.eta_outer, config.seed, config.split_fraction, config.inner_lr,
                )
                for client in clients:
                    client.psi = psi
                psi_broadcast_bytes = config.clients * psi.param_count() * BYTES_PER_PARAM
        elif config.recovery_enabled and check_trigger(end_eval.miou, tau):
            recovered = []
            epochs: dict[int, int] = {}
            for client in clients:
                outcome = recover(
                    model, client.psi, client.buffer, cumulative, tau,
                    config.max_finetune_epochs, config.recover_lr,
                    int(stream(config.seed, "recover", client.id, t).integers(0, 2**62)),
                )
                recovered.append(outcome.net)
                epochs[client.id] = outcome.epochs
            model = aggregate(recovered)
            post = evaluate(model, cumulative, model.class_count)
            trigger_event = TriggerEvent(
                task=t, tau=tau, miou_before=end_eval.miou, miou_after=post.miou,
                epochs_per_client=epochs,
            )

        summaries.append(
            TaskSummary(
                task=t, classes=task.classes, end_miou=end_eval.miou,
                per_class_iou=end_eval.per_class_iou, split_evals=eval_log[t],
                trigger=trigger_event,
            )
        )

    table = forgetting(eval_log) if config.tasks > 1 else None
    return LifecycleResult(
        config=config,
        records=records,
        task_summaries=summaries,
        forgetting_table=table,
        tau=tau,
        task0_miou=task0_miou,
        psi_broadcast_bytes=psi_broadcast_bytes,
        buffer_audits=audits,
        model=model,
        psi=psi,
        clients=clients,
        test_splits=test_splits,
        task0_model=task0_model,
        task0_train=task0_data,
    )
