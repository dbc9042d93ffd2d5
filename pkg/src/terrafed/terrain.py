"""Synthetic class-incremental terrain data and the exemplar memory.

Images are Voronoi mosaics over a fixed per-class color palette plus Gaussian
noise; labels are the cell classes. Client shards come from per-class
Dirichlet draws, exemplar selection follows iCaRL herding, and the buffer
rebalances to an even per-class quota as new classes arrive.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

IGNORE_VALUE = 255


@dataclass
class TerrainSample:
    """One image [3,H,W] in [0,1] with an integer label grid [H,W]."""

    image: np.ndarray
    labels: np.ndarray

    def copy(self) -> "TerrainSample":
        return TerrainSample(self.image.copy(), self.labels.copy())


@dataclass(frozen=True)
class TaskSpec:
    id: int
    classes: tuple[int, ...]
    sample_count: int


def class_color(class_id: int) -> np.ndarray:
    """Fixed palette: golden-ratio hue spacing, moderate saturation."""
    hue = (class_id * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.72))


def gen_terrain(
    seed: int,
    active_classes: tuple[int, ...] | list[int],
    height: int,
    width: int,
    n_cells: int,
    sigma_noise: float = 0.08,
) -> TerrainSample:
    """Voronoi mosaic sample, deterministic in (seed, arguments)."""
    if n_cells < 1:
        raise ContractError("n_cells must be >= 1")
    classes = tuple(sorted(active_classes))
    if not classes:
        raise ContractError("active_classes must be nonempty")
    rng = np.random.default_rng(seed)
    site_y = rng.uniform(0.0, height, size=n_cells)
    site_x = rng.uniform(0.0, width, size=n_cells)
    cell_class = rng.choice(np.array(classes), size=n_cells, replace=True)
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    d2 = (ys[None] - site_y[:, None, None]) ** 2 + (xs[None] - site_x[:, None, None]) ** 2
    nearest = np.argmin(d2, axis=0)  # ties break to the lowest site index
    labels = cell_class[nearest].astype(np.int64)
    palette = {c: class_color(c) for c in classes}
    image = np.zeros((3, height, width))
    for c in classes:
        mask = labels == c
        for ch in range(3):
            image[ch][mask] = palette[c][ch]
    if sigma_noise > 0.0:
        image = image + rng.normal(0.0, sigma_noise, size=image.shape)
    return TerrainSample(np.clip(image, 0.0, 1.0), labels)


def make_task_sequence(
    total_classes: int,
    base_classes: int,
    classes_per_increment: int,
    samples_per_task: int,
    seed: int,
) -> list[TaskSpec]:
    """Disjoint class blocks: task 0 owns [0, base), each later task the next block."""
    if base_classes < 1 or classes_per_increment < 1:
        raise ConfigError("base_classes and classes_per_increment must be >= 1")
    remainder = total_classes - base_classes
    if remainder < 0 or remainder % classes_per_increment != 0:
        raise ConfigError(
            f"cannot split {total_classes} classes as {base_classes} + k*{classes_per_increment}"
        )
    tasks = [TaskSpec(0, tuple(range(base_classes)), samples_per_task)]
    start = base_classes
    t = 1
    while start < total_classes:
        tasks.append(TaskSpec(t, tuple(range(start, start + classes_per_increment)), samples_per_task))
        start += classes_per_increment
        t += 1
    return tasks


def mask_for_task(sample: TerrainSample, task: TaskSpec) -> TerrainSample:
    """Set labels outside the task's class set to the ignore value."""
    out = sample.copy()
    keep = np.isin(out.labels, np.array(task.classes))
    out.labels[~keep] = IGNORE_VALUE
    return out


def majority_label(sample: TerrainSample) -> int:
    """Most frequent non-ignored label; ties break to the lowest class id."""
    valid = sample.labels[sample.labels != IGNORE_VALUE]
    if valid.size == 0:
        return -1
    return int(np.bincount(valid).argmax())


@dataclass
class Shard:
    client_id: int
    samples: list[TerrainSample] = field(default_factory=list)


def dirichlet_partition(
    samples: list[TerrainSample], n_clients: int, beta: float, seed: int
) -> list[Shard]:
    """Per-class Dirichlet proportions, realized by largest-remainder rounding."""
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if beta <= 0.0:
        raise ConfigError("beta must be positive")
    shards = [Shard(k) for k in range(n_clients)]
    if not samples:
        return shards
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(majority_label(s), []).append(idx)
    for cls in sorted(by_class):
        indices = by_class[cls]
        props = rng.dirichlet(np.full(n_clients, beta))
        counts = _largest_remainder(props, len(indices))
        pos = 0
        for k in range(n_clients):
            for idx in indices[pos:pos + counts[k]]:
                shards[k].samples.append(samples[idx])
            pos += counts[k]
    return shards


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        remainders = raw - counts
        # largest remainder first; ties to the lowest client id
        order = np.lexsort((np.arange(props.size), -remainders))
        counts[order[:leftover]] += 1
    return counts


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """iCaRL herding: greedily keep the running mean closest to the class mean.

    Ties break to the lowest index; no index repeats. Returns min(m, n) indices.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if n == 0:
        raise ContractError("herding_select needs at least one feature")
    mu = feats.mean(axis=0)
    selected: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for j in range(min(m, n)):
        cand = (running[None, :] + feats) / (j + 1)
        dist = np.linalg.norm(mu[None, :] - cand, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        selected.append(pick)
        available[pick] = False
        running += feats[pick]
    return selected


@dataclass
class MemoryBuffer:
    """Fixed-capacity exemplar store; per-class lists keep herding order."""

    capacity: int
    exemplars: dict[int, list[TerrainSample]] = field(default_factory=dict)

    def total(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def all_samples(self) -> list[TerrainSample]:
        out: list[TerrainSample] = []
        for cls in self.classes():
            out.extend(self.exemplars[cls])
        return out

    def is_empty(self) -> bool:
        return self.total() == 0


def class_quotas(capacity: int, class_ids: list[int]) -> dict[int, int]:
    """floor(M/C) per class; the first (M mod C) classes by id get one more."""
    c = len(class_ids)
    base, extra = divmod(capacity, c)
    ordered = sorted(class_ids)
    return {cls: base + (1 if i < extra else 0) for i, cls in enumerate(ordered)}


def buffer_update(
    buffer: MemoryBuffer,
    per_class_candidates: dict[int, tuple[list[TerrainSample], np.ndarray]],
    seen_class_count: int,
) -> MemoryBuffer:
    """Rebalance old classes to quota and admit new classes via herding.

    Quotas follow the largest-remainder rule over the C seen classes (ids
    0..C-1): floor(M/C) each, the first M mod C class ids get one more. Old
    classes keep their earliest-selected exemplars. A class with fewer
    candidates than its quota cycles the herding order (duplicates act as
    rehearsal weights), keeping the per-class allocation exact.
    """
    if seen_class_count < 1:
        raise ContractError("seen_class_count must be >= 1")
    for cls in list(buffer.exemplars) + list(per_class_candidates):
        if not 0 <= cls < seen_class_count:
            raise ContractError(f"class id {cls} outside the seen range")
    quotas = class_quotas(buffer.capacity, list(range(seen_class_count)))
    new = MemoryBuffer(buffer.capacity)
    for cls in sorted(buffer.exemplars):
        stored = buffer.exemplars[cls]
        if stored:
            new.exemplars[cls] = [stored[i % len(stored)].copy() for i in range(quotas[cls])]
    for cls in sorted(per_class_candidates):
        samples, features = per_class_candidates[cls]
        if not samples:
            continue
        quota = quotas[cls]
        picked = herding_select(features, quota)
        filled = [picked[i % len(picked)] for i in range(quota)]
        new.exemplars[cls] = [samples[i].copy() for i in filled]
    return new
