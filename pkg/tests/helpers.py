"""Shared fixtures-in-functions for tests that need a partially trained model."""
from __future__ import annotations

import numpy as np

from terrafed.lsr import lsr_loss
from terrafed.segnet import SegNet
from terrafed.tensor import Tape, backward
from terrafed.terrain import MemoryBuffer, TerrainSample, gen_terrain, majority_label


def train_full_net(
    net: SegNet, data: list[TerrainSample], steps: int, lr: float, seed: int, batch: int = 8
) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(data), min(batch, len(data)), replace=False)
        net.zero_grad()
        with Tape() as tape:
            loss = lsr_loss(net, [data[i] for i in idx], [], 1.0)
            backward(loss, tape)
        for _, p in net.param_items():
            if p.grad is not None:
                p.data = p.data - lr * p.grad
    net.zero_grad()


def trained_setup(seed: int, classes: int = 5, n_samples: int = 16, grid: int = 12,
                  steps: int = 120) -> tuple[SegNet, list[TerrainSample]]:
    net = SegNet.init_random(classes, np.random.default_rng(seed))
    data = [
        gen_terrain(9000 + 311 * seed + i, tuple(range(classes)), grid, grid, 5)
        for i in range(n_samples)
    ]
    train_full_net(net, data, steps, 0.05, seed)
    return net, data


def buffer_by_majority(data: list[TerrainSample], per_class: int = 3,
                       capacity: int = 40) -> MemoryBuffer:
    buf = MemoryBuffer(capacity)
    for s in data:
        cls = majority_label(s)
        buf.exemplars.setdefault(cls, []).append(s)
    for cls in list(buf.exemplars):
        buf.exemplars[cls] = buf.exemplars[cls][:per_class]
    return buf
