"""Segmentation metrics, forgetting bookkeeping, and diagnostic measurements."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import UndefinedMetricError
from .segnet import GROUPS, LayerGroup, SegNet, replace_group
from .tensor import Tape, Tensor, backward
from .terrain import IGNORE_VALUE, TerrainSample


@dataclass
class Confusion:
    """Per-class TP/FP/FN pixel counts; ignored pixels contribute nothing."""

    class_count: int
    tp: np.ndarray = field(init=False)
    fp: np.ndarray = field(init=False)
    fn: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tp = np.zeros(self.class_count, dtype=np.int64)
        self.fp = np.zeros(self.class_count, dtype=np.int64)
        self.fn = np.zeros(self.class_count, dtype=np.int64)

    def update(self, predictions: np.ndarray, labels: np.ndarray) -> None:
        valid = labels != IGNORE_VALUE
        pred = predictions[valid]
        lab = labels[valid]
        c = self.class_count
        joint = np.bincount(lab * c + pred, minlength=c * c).reshape(c, c)
        diag = np.diag(joint)
        self.tp += diag
        self.fn += joint.sum(axis=1) - diag
        self.fp += joint.sum(axis=0) - diag

    def iou(self) -> tuple[list[float | None], float]:
        denom = self.tp + self.fp + self.fn
        per_class: list[float | None] = []
        included = []
        for c in range(self.class_count):
            if denom[c] == 0:
                per_class.append(None)
            else:
                v = float(self.tp[c]) / float(denom[c])
                per_class.append(v)
                included.append(v)
        if not included:
            raise UndefinedMetricError("every class excluded from mIoU")
        return per_class, float(np.mean(included))


def iou_metrics(
    predictions: list[np.ndarray], labels: list[np.ndarray], class_count: int
) -> tuple[list[float | None], float]:
    """Per-class IoU and mIoU; classes with empty union are excluded."""
    conf = Confusion(class_count)
    for pred, lab in zip(predictions, labels):
        conf.update(pred, lab)
    return conf.iou()


def predict(net: SegNet, sample: TerrainSample) -> np.ndarray:
    logits = net.forward(Tensor(sample.image))
    return np.argmax(logits.data, axis=0)


@dataclass
class EvalResult:
    loss: float
    per_class_iou: list[float | None]
    miou: float


def evaluate(net: SegNet, samples: list[TerrainSample], class_count: int) -> EvalResult:
    """Mean pixel cross-entropy and IoU of a model over an evaluation set."""
    conf = Confusion(class_count)
    loss_sum = 0.0
    for s in samples:
        logits = net.forward(Tensor(s.image))
        loss_sum += T.pixel_cross_entropy(logits, s.labels).item()
        conf.update(np.argmax(logits.data, axis=0), s.labels)
    per_class, miou = conf.iou()
    return EvalResult(loss_sum / len(samples), per_class, miou)


@dataclass
class ForgettingTable:
    """Definition-style forgetting: rows are later tasks, columns earlier ones.

    loss_delta[t][t'] = loss_{t'}(model_t) - loss_{t'}(model_{t'});
    miou_delta[t][t'] = miou_{t'}(model_{t'}) - miou_{t'}(model_t).
    """

    loss_delta: dict[int, dict[int, float]]
    miou_delta: dict[int, dict[int, float]]
    cumulative_loss: dict[int, float]
    cumulative_miou: dict[int, float]


def forgetting(eval_log: dict[int, dict[int, tuple[float, float]]]) -> ForgettingTable:
    """eval_log[t][t'] = (loss, miou) of the post-task-t model on split t'."""
    loss_delta: dict[int, dict[int, float]] = {}
    miou_delta: dict[int, dict[int, float]] = {}
    cum_loss: dict[int, float] = {}
    cum_miou: dict[int, float] = {}
    for t in sorted(eval_log):
        if t == 0:
            continue
        loss_delta[t] = {}
        miou_delta[t] = {}
        for t_prev in range(t):
            if t_prev not in eval_log.get(t, {}) or t_prev not in eval_log.get(t_prev, {}):
                raise UndefinedMetricError(f"missing evaluation cell ({t},{t_prev})")
            later_loss, later_miou = eval_log[t][t_prev]
            own_loss, own_miou = eval_log[t_prev][t_prev]
            loss_delta[t][t_prev] = later_loss - own_loss
            miou_delta[t][t_prev] = own_miou - later_miou
        cum_loss[t] = float(np.mean(list(loss_delta[t].values())))
        cum_miou[t] = float(np.mean(list(miou_delta[t].values())))
    return ForgettingTable(loss_delta, miou_delta, cum_loss, cum_miou)


@dataclass
class SensitivityResult:
    """Signed mIoU change per replaced group, plus normalized forgetting shares."""

    base_miou: float
    delta_miou: dict[str, float]       # miou(replaced) - miou(base)
    shares: dict[str, float]           # (base - replaced) / sum |delta|
    degenerate: bool


def layer_sensitivity(
    theta0: SegNet, theta_t: SegNet, test0: list[TerrainSample]
) -> SensitivityResult:
    """Replace each group of theta0 with theta_t's and measure Task-0 mIoU."""
    base = evaluate(theta0, test0, theta0.class_count).miou
    delta: dict[str, float] = {}
    for group in GROUPS:
        swapped = replace_group(theta0, theta_t, group)
        delta[group.value] = evaluate(swapped, test0, theta0.class_count).miou - base
    total = sum(abs(v) for v in delta.values())
    if total == 0.0:
        return SensitivityResult(base, delta, {g.value: 0.0 for g in GROUPS}, True)
    shares = {k: (-v) / total for k, v in delta.items()}
    return SensitivityResult(base, delta, shares, False)


def _group_gradients(net: SegNet, batch: list[TerrainSample]) -> dict[LayerGroup, np.ndarray]:
    net.zero_grad()
    with Tape() as tape:
        terms = [
            T.pixel_cross_entropy(net.forward(Tensor(s.image)), s.labels) for s in batch
        ]
        loss = terms[0]
        for term in terms[1:]:
            loss = T.add(loss, term)
        loss = T.scale(loss, 1.0 / len(terms))
        backward(loss, tape)
    out = {}
    for group in GROUPS:
        parts = [
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for p in net.group_params(group).values()
        ]
        out[group] = np.concatenate(parts)
    net.zero_grad()
    return out


def gradient_conflict(
    net: SegNet, new_batch: list[TerrainSample], old_batch: list[TerrainSample]
) -> dict[str, float]:
    """Per-group squared norm of (grad on new batch - grad on old batch)."""
    g_new = _group_gradients(net, new_batch)
    g_old = _group_gradients(net, old_batch)
    return {
        group.value: float(np.sum((g_new[group] - g_old[group]) ** 2)) for group in GROUPS
    }


def heterogeneity_estimate(shards: list[list[TerrainSample]], net: SegNet) -> float:
    """(1/K) sum_k ||grad_k - mean grad||^2 over full-model gradients."""
    grads = []
    for shard in shards:
        g = _group_gradients(net, shard)
        grads.append(np.concatenate([g[group] for group in GROUPS]))
    stacked = np.stack(grads)
    # shift by the first gradient so identical shards give exactly zero
    shifted = stacked - stacked[0]
    mean = shifted.mean(axis=0)
    return float(np.mean(np.sum((shifted - mean) ** 2, axis=1)))
