"""Rapid knowledge recovery for the segmentation head.

A meta-trained function maps (degraded head statistics, class prototypes,
memory features, angular features) to an additive head correction. Four
encoders share a latent width; a learnable query turns their encodings into
softmax attention weights; a fusion decoder emits one correction row per
class, conditioned on that class's prototype, so the function transfers to
heads that grew after it was trained.

Meta-training runs once, on task-0 episodes that degrade a copy of the head
on a random class subset. The outer gradient treats the degraded head as a
constant (first-order). All head-only optimization here runs on cached
backbone features: the backbone is frozen throughout and stays bitwise
untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, RecoveryImpossibleError
from .lsr import PreservedKnowledge, preserved_knowledge
from .metrics import Confusion
from .segnet import FEATURE_DIM, SegNet, channel_summary
from .tensor import Tape, Tensor, backward
from .terrain import IGNORE_VALUE, MemoryBuffer, TerrainSample

LATENT = 32
ROW_WIDTH = FEATURE_DIM + 1  # 16 weights + 1 bias per class row


def _init(rng, out_dim, in_dim, scale=None):
    a = float(np.sqrt(1.0 / in_dim)) if scale is None else scale
    w = Tensor(rng.uniform(-a, a, size=(out_dim, in_dim)), requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True)
    return w, b


class RecoveryFn:
    """psi with parameters xi: four encoders, attention query, fusion decoder."""

    def __init__(self, rng: np.random.Generator):
        self.ws1, self.bs1 = _init(rng, LATENT, 2)        # per-channel (mean, var) rows
        self.ws2, self.bs2 = _init(rng, LATENT, LATENT)
        self.wp1, self.bp1 = _init(rng, LATENT, FEATURE_DIM)
        self.wp2, self.bp2 = _init(rng, LATENT, LATENT)
        self.wm, self.bm = _init(rng, LATENT, FEATURE_DIM)
        self.wg, self.bg = _init(rng, LATENT, 3)
        self.query = Tensor(rng.uniform(-0.3, 0.3, size=LATENT), requires_grad=True)
        self.wf1, self.bf1 = _init(rng, 64, LATENT + FEATURE_DIM)
        self.wf2, self.bf2 = _init(rng, ROW_WIDTH, 64, scale=0.01)
        # direct prototype-to-row path; zero at init so psi starts as a no-op-ish map
        self.wskip, self.bskip = _init(rng, ROW_WIDTH, FEATURE_DIM, scale=0.0)

    def params(self) -> dict[str, Tensor]:
        return {
            "psi.es.l0.weight": self.ws1, "psi.es.l0.bias": self.bs1,
            "psi.es.l1.weight": self.ws2, "psi.es.l1.bias": self.bs2,
            "psi.ep.l0.weight": self.wp1, "psi.ep.l0.bias": self.bp1,
            "psi.ep.l1.weight": self.wp2, "psi.ep.l1.bias": self.bp2,
            "psi.em.weight": self.wm, "psi.em.bias": self.bm,
            "psi.eg.weight": self.wg, "psi.eg.bias": self.bg,
            "psi.query": self.query,
            "psi.fuse.l0.weight": self.wf1, "psi.fuse.l0.bias": self.bf1,
            "psi.fuse.l1.weight": self.wf2, "psi.fuse.l1.bias": self.bf2,
            "psi.fuse.skip.weight": self.wskip, "psi.fuse.skip.bias": self.bskip,
        }

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def checksum(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params()):
            h.update(name.encode())
            h.update(self.params()[name].data.tobytes())
        return h.digest()

    def _pool_rows(self, rows_data: np.ndarray, w1, b1, w2, b2) -> Tensor:
        encoded = [T.relu(T.affine(Tensor(rows_data[i]), w1, b1)) for i in range(rows_data.shape[0])]
        stacked = T.stack_rows(encoded)
        pooled = T.vecmat(Tensor(np.full(len(encoded), 1.0 / len(encoded))), stacked)
        return T.relu(T.affine(pooled, w2, b2))

    def encodings(self, head_rows: np.ndarray, pk: PreservedKnowledge) -> list[Tensor]:
        """The four latent encodings [E_s, E_p, E_m, E_g]."""
        e_s = self._pool_rows(head_rows, self.ws1, self.bs1, self.ws2, self.bs2)
        if pk.p.shape[0] == 0:
            raise ContractError("recovery needs at least one class prototype")
        e_p = self._pool_rows(pk.p, self.wp1, self.bp1, self.wp2, self.bp2)
        e_m = T.relu(T.affine(Tensor(pk.h_m), self.wm, self.bm))
        e_g = T.relu(T.affine(Tensor(pk.a), self.wg, self.bg))
        return [e_s, e_p, e_m, e_g]


@dataclass
class Episode:
    """A simulated degradation: head trained only on y_minus."""

    y_minus: tuple[int, ...]
    y_plus: tuple[int, ...]
    degraded_head: dict[str, np.ndarray]  # "weight" [C,16], "bias" [C]


def attention_weights(psi: RecoveryFn, encodings: list[Tensor]) -> Tensor:
    scores = T.concat_vec([T.reshape(T.dot(psi.query, e), (1,)) for e in encodings])
    return T.softmax_vec(scores)


def recovery_graph(
    psi: RecoveryFn,
    head_weight: np.ndarray,
    head_bias: np.ndarray,
    pk: PreservedKnowledge,
) -> tuple[Tensor, Tensor, Tensor]:
    """Build (delta_weight [C,16], delta_bias [C], attention weights [4])."""
    summary = channel_summary(head_weight.reshape(head_weight.shape + (1, 1)), head_bias)
    head_rows = np.stack([summary.per_channel_mean, summary.per_channel_var], axis=1)
    encodings = psi.encodings(head_rows, pk)
    w = attention_weights(psi, encodings)
    fused = T.vecmat(w, T.stack_rows(encodings))
    proto = {cls: pk.p[i] for i, cls in enumerate(pk.class_ids)}
    rows = []
    for c in range(head_weight.shape[0]):
        p_c = Tensor(proto.get(c, np.zeros(FEATURE_DIM)))
        x = T.concat_vec([fused, p_c])
        h = T.relu(T.affine(x, psi.wf1, psi.bf1))
        rows.append(T.add(T.affine(h, psi.wf2, psi.bf2), T.affine(p_c, psi.wskip, psi.bskip)))
    mat = T.stack_rows(rows)
    d_weight = T.slice_cols(mat, 0, FEATURE_DIM)
    d_bias = T.reshape(T.slice_cols(mat, FEATURE_DIM, ROW_WIDTH), (head_weight.shape[0],))
    return d_weight, d_bias, w


def encode_and_fuse(
    psi: RecoveryFn,
    head_weight: np.ndarray,
    head_bias: np.ndarray,
    pk: PreservedKnowledge,
) -> tuple[np.ndarray, np.ndarray]:
    """Correction values (no recording): delta for the head weight and bias."""
    d_w, d_b, _ = recovery_graph(psi, head_weight, head_bias, pk)
    return d_w.data, d_b.data


# ---------------------------------------------------------------------------
# head-only training on cached backbone features
# ---------------------------------------------------------------------------


def cache_features(net: SegNet, samples: list[TerrainSample]) -> list[np.ndarray]:
    feats = net.features(Tensor(np.stack([s.image for s in samples]))).data
    return [feats[i] for i in range(feats.shape[0])]


def _head_batch_ce(
    w: Tensor, b: Tensor, feats: list[np.ndarray], labels: list[np.ndarray]
) -> Tensor | None:
    keep = [i for i, lab in enumerate(labels) if np.any(lab != IGNORE_VALUE)]
    if not keep:
        return None
    stacked = Tensor(np.stack([feats[i] for i in keep]))
    labs = np.stack([labels[i] for i in keep])
    return T.pixel_cross_entropy_batch(T.pointwise_conv(stacked, w, b), labs)


def head_sgd(
    weight: np.ndarray,
    bias: np.ndarray,
    feats: list[np.ndarray],
    labels: list[np.ndarray],
    steps: int,
    lr: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch SGD on the head alone; returns the updated copies."""
    w = Tensor(weight, requires_grad=True)
    b = Tensor(bias, requires_grad=True)
    for _ in range(steps):
        with Tape() as tape:
            loss = _head_batch_ce(w, b, feats, labels)
            if loss is None:
                break
            backward(loss, tape)
        if w.grad is not None:
            w.data = w.data - lr * w.grad
        if b.grad is not None:
            b.data = b.data - lr * b.grad
        w.grad = b.grad = None
    return w.data, b.data


def _mask_labels(labels: np.ndarray, keep: tuple[int, ...]) -> np.ndarray:
    out = labels.copy()
    out[~np.isin(out, np.array(keep))] = IGNORE_VALUE
    return out


def make_episode(
    net: SegNet,
    task0_classes: tuple[int, ...],
    feats: list[np.ndarray],
    labels: list[np.ndarray],
    split_fraction: float,
    steps: int,
    seed: int,
    lr: float,
) -> Episode:
    """Split task 0's label space and degrade a head copy on the kept half."""
    n = len(task0_classes)
    if n < 2:
        raise ConfigError("episodes need at least two task-0 classes")
    rng = np.random.default_rng(seed)
    size = int(round(split_fraction * n))
    size = min(max(size, 1), n - 1)
    minus = tuple(sorted(rng.choice(np.array(task0_classes), size, replace=False).tolist()))
    plus = tuple(c for c in task0_classes if c not in minus)
    masked = [_mask_labels(lab, minus) for lab in labels]
    w, b = head_sgd(
        net.params["head.weight"].data.copy(),
        net.params["head.bias"].data.copy(),
        feats, masked, steps, lr,
    )
    return Episode(minus, plus, {"weight": w, "bias": b})


def _clip_gradients(params: dict[str, Tensor], max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    total = float(np.sqrt(total))
    if total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor


def meta_train(
    psi: RecoveryFn,
    net: SegNet,
    task0_data: list[TerrainSample],
    buffer: MemoryBuffer,
    n_episodes: int,
    inner_steps: int,
    eta_outer: float,
    seed: int,
    split_fraction: float = 0.6,
    inner_lr: float = 0.1,
    clip_norm: float = 5.0,
) -> list[float]:
    """Episodic first-order meta-training of psi on task 0; returns outer losses."""
    if buffer.is_empty():
        raise RecoveryImpossibleError("meta_train needs a populated buffer")
    task0_classes = tuple(range(net.class_count))
    feats = cache_features(net, task0_data)
    labels = [s.labels for s in task0_data]
    pk = preserved_knowledge(buffer, net)
    losses: list[float] = []
    for e in range(n_episodes):
        ep = make_episode(
            net, task0_classes, feats, labels, split_fraction, inner_steps,
            seed * 100003 + e, inner_lr,
        )
        plus_labels = [_mask_labels(lab, ep.y_plus) for lab in labels]
        psi.zero_grad()
        with Tape() as tape:
            d_w, d_b, _ = recovery_graph(psi, ep.degraded_head["weight"], ep.degraded_head["bias"], pk)
            w_plus = T.add(Tensor(ep.degraded_head["weight"]), d_w)
            b_plus = T.add(Tensor(ep.degraded_head["bias"]), d_b)
            outer = _head_batch_ce(w_plus, b_plus, feats, plus_labels)
            if outer is None:
                continue
            backward(outer, tape)
        _clip_gradients(psi.params(), clip_norm)
        for p in psi.params().values():
            if p.grad is not None:
                p.data = p.data - eta_outer * p.grad
        psi.zero_grad()
        losses.append(float(outer.data))
    return losses


def check_trigger(cumulative_miou: float, tau: float) -> bool:
    """True iff the cumulative mIoU fell strictly below the threshold."""
    if not 0.0 < tau <= 1.0:
        raise ContractError("tau must lie in (0, 1]")
    return cumulative_miou < tau


def _head_miou(
    weight: np.ndarray,
    bias: np.ndarray,
    feats: list[np.ndarray],
    labels: list[np.ndarray],
    class_count: int,
) -> float:
    conf = Confusion(class_count)
    for f, lab in zip(feats, labels):
        logits = np.einsum("oc,chw->ohw", weight, f) + bias[:, None, None]
        conf.update(np.argmax(logits, axis=0), lab)
    return conf.iou()[1]


@dataclass
class RecoveryOutcome:
    net: SegNet
    epochs: int
    miou_before: float
    miou_after: float


def recover(
    net: SegNet,
    psi: RecoveryFn,
    buffer: MemoryBuffer,
    test_pool: list[TerrainSample],
    tau: float,
    max_finetune_epochs: int,
    lr: float,
    seed: int,
    apply_correction: bool = True,
) -> RecoveryOutcome:
    """Correct the head via psi, then fine-tune it on memory until tau is met.

    Only head parameters change; the backbone is bitwise untouched.
    """
    if buffer.is_empty():
        raise RecoveryImpossibleError("recover requires a nonempty buffer")
    out = net.clone()
    pk = preserved_knowledge(buffer, net)
    miou_before = None
    if apply_correction:
        d_w, d_b = encode_and_fuse(
            psi, out.params["head.weight"].data, out.params["head.bias"].data, pk
        )
        out.params["head.weight"].data = out.params["head.weight"].data + d_w
        out.params["head.bias"].data = out.params["head.bias"].data + d_b
    mem = buffer.all_samples()
    mem_feats = cache_features(net, mem)
    mem_labels = [s.labels for s in mem]
    test_feats = cache_features(net, test_pool)
    test_labels = [s.labels for s in test_pool]
    w = out.params["head.weight"].data
    b = out.params["head.bias"].data
    miou_before = _head_miou(w, b, test_feats, test_labels, out.class_count)
    rng = np.random.default_rng(seed)
    epochs = 0
    miou = miou_before
    batch = 8
    while miou < tau and epochs < max_finetune_epochs:
        order = rng.permutation(len(mem))
        for pos in range(0, len(order), batch):
            idx = order[pos:pos + batch]
            w, b = head_sgd(w, b, [mem_feats[i] for i in idx], [mem_labels[i] for i in idx], 1, lr)
        epochs += 1
        miou = _head_miou(w, b, test_feats, test_labels, out.class_count)
    out.params["head.weight"].data = w
    out.params["head.bias"].data = b
    return RecoveryOutcome(out, epochs, miou_before, miou)
