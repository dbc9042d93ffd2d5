"""Layer-selective rehearsal: correction generators and the stratified update.

Each layer group gets a generator that maps compact per-channel statistics
(plus memory-derived features) to two per-channel factors (u, v). The
correction broadcast to every parameter of channel c is

    delta[c, :] = u[c] * (-grad[c, :]) + v[c] * (theta_ref[c, :] - theta[c, :])

i.e. u amplifies the descent direction (plasticity) and v anchors the channel
to its task-start snapshot (stability). Updates follow

    theta_l <- theta_l - eta * velocity_l + alpha_l * delta_l

with alpha_s < alpha_d < alpha_c. Generators train online by one-step
unrolled differentiation of the memory loss through the update; they stay on
the client and are never uploaded.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateBatchError, MemoryEmptyError, PrototypeUndefinedError
from .segnet import (
    GROUP_LAYERS,
    FEATURE_DIM,
    LayerGroup,
    SegNet,
    group_channel_widths,
    group_of,
    group_summary,
)
from .tensor import Tape, Tensor, backward
from .terrain import MemoryBuffer, TerrainSample

log = logging.getLogger(__name__)

LATENT = 32
FUSED = 64
# generators start neutral: zero corrections, exactly plain rehearsal
ANCHOR_PREACT = 0.0
# tanh outputs are scaled into a trust region so a saturated channel can at
# most add a ~UV_SCALE-weighted gradient step; keeps |u|,|v| <= 1 and online
# training inside the optimizer's stable range
UV_SCALE = 0.1
# per-step pull of the output layers toward the neutral (zero-correction) point
OMEGA_DECAY = 1e-3


@dataclass(frozen=True)
class ProtectionWeights:
    """Stratified protection strengths; ordering is enforced at construction."""

    alpha_s: float
    alpha_d: float
    alpha_c: float

    def __post_init__(self):
        if not (0.0 <= self.alpha_s < self.alpha_d < self.alpha_c):
            raise ContractError(
                f"protection weights must satisfy 0 <= alpha_s < alpha_d < alpha_c, "
                f"got ({self.alpha_s}, {self.alpha_d}, {self.alpha_c})"
            )

    def for_group(self, group: LayerGroup) -> float:
        return {
            LayerGroup.SHALLOW: self.alpha_s,
            LayerGroup.DEEP: self.alpha_d,
            LayerGroup.HEAD: self.alpha_c,
        }[group]

    def mean_budget(self) -> float:
        return (self.alpha_s + self.alpha_d + self.alpha_c) / 3.0

    def uniform_mapping(self) -> dict[LayerGroup, float]:
        """Same total budget spread evenly: the uniform-rehearsal comparator."""
        a = self.mean_budget()
        return {g: a for g in LayerGroup}

    def mapping(self) -> dict[LayerGroup, float]:
        return {g: self.for_group(g) for g in LayerGroup}


def _init_affine(rng: np.random.Generator, out_dim: int, in_dim: int, scale: float | None = None):
    a = float(np.sqrt(1.0 / in_dim)) if scale is None else scale
    w = Tensor(rng.uniform(-a, a, size=(out_dim, in_dim)), requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True)
    return w, b


class Mlp:
    """Dense stack over 1-D vectors; the final layer may carry an output bias."""

    def __init__(self, sizes, rng, final_scale=0.01, final_bias=None, final_act="tanh"):
        self.layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            w, b = _init_affine(rng, sizes[i + 1], sizes[i], final_scale if last else None)
            if last and final_bias is not None:
                b.data[...] = final_bias
            self.layers.append((w, b, (final_act if last else "relu")))

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for w, b, act in self.layers:
            h = T.affine(h, w, b)
            if act == "relu":
                h = T.relu(h)
            elif act == "tanh":
                h = T.tanh_act(h)
        return h

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b, _) in enumerate(self.layers):
            out[f"{prefix}.l{i}.weight"] = w
            out[f"{prefix}.l{i}.bias"] = b
        return out


@dataclass
class PreservedKnowledge:
    """Memory-derived context: pooled feature, class prototypes, angular summary."""

    h_m: np.ndarray                  # [16]
    p: np.ndarray                    # [n_classes, 16], ascending class id
    class_ids: tuple[int, ...]
    a: np.ndarray                    # (min, mean, max) of pairwise cosines

    @classmethod
    def empty(cls) -> "PreservedKnowledge":
        return cls(np.zeros(FEATURE_DIM), np.zeros((0, FEATURE_DIM)), (), np.ones(3))


def memory_features(buffer: MemoryBuffer, net: SegNet) -> np.ndarray:
    """Mean over exemplars of the globally average-pooled deep features."""
    if buffer.is_empty():
        raise MemoryEmptyError("memory_features on an empty buffer")
    samples = buffer.all_samples()
    feats = net.features(Tensor(np.stack([s.image for s in samples]))).data
    return feats.mean(axis=(2, 3)).sum(axis=0) / len(samples)


def class_prototypes(buffer: MemoryBuffer, net: SegNet) -> tuple[np.ndarray, tuple[int, ...]]:
    """Per stored class, the mean deep-feature vector over its labeled pixels."""
    if buffer.is_empty():
        raise MemoryEmptyError("class_prototypes on an empty buffer")
    ids = tuple(buffer.classes())
    rows = []
    for cls in ids:
        group = buffer.exemplars[cls]
        feats = net.features(Tensor(np.stack([s.image for s in group]))).data
        acc = np.zeros(FEATURE_DIM)
        count = 0
        for i, s in enumerate(group):
            mask = s.labels == cls
            n = int(mask.sum())
            if n:
                acc += feats[i][:, mask].sum(axis=1)
                count += n
        if count == 0:
            raise PrototypeUndefinedError(f"class {cls} has no labeled pixels in memory")
        rows.append(acc / count)
    return np.stack(rows), ids


def geometric_features(p: np.ndarray) -> np.ndarray:
    """(min, mean, max) cosine similarity over unordered prototype pairs."""
    n = p.shape[0]
    if n < 2:
        return np.ones(3)
    sims = []
    norms = np.linalg.norm(p, axis=1)
    for i in range(n):
        for j in range(i + 1, n):
            denom = norms[i] * norms[j]
            sims.append(float(p[i] @ p[j] / denom) if denom > 0.0 else 0.0)
    sims = np.array(sims)
    return np.array([sims.min(), sims.mean(), sims.max()])


def preserved_knowledge(buffer: MemoryBuffer, net: SegNet) -> PreservedKnowledge:
    h_m = memory_features(buffer, net)
    p, ids = class_prototypes(buffer, net)
    return PreservedKnowledge(h_m, p, ids, geometric_features(p))


class HeadGenerator:
    """Multi-encoder + fusion generator for the growing segmentation head.

    Global context comes from pooled channel statistics, pooled prototype
    encodings, the memory feature and the angular summary; a shared output
    layer then emits (u, v) for each head channel conditioned on that
    channel's own statistics, so the parameter count is independent of the
    class count.
    """

    def __init__(self, rng: np.random.Generator):
        self.w_zg, self.b_zg = _init_affine(rng, LATENT, 4)
        self.w_p, self.b_p = _init_affine(rng, LATENT, FEATURE_DIM)
        self.w_m, self.b_m = _init_affine(rng, LATENT, FEATURE_DIM)
        self.w_a, self.b_a = _init_affine(rng, LATENT, 3)
        self.w_f, self.b_f = _init_affine(rng, FUSED, 4 * LATENT)
        self.w_out, self.b_out = _init_affine(rng, 2, FUSED + 4, scale=0.01)
        self.b_out.data[...] = np.array([0.0, ANCHOR_PREACT])

    def params(self, prefix: str) -> dict[str, Tensor]:
        names = {
            "zg": (self.w_zg, self.b_zg),
            "proto": (self.w_p, self.b_p),
            "mem": (self.w_m, self.b_m),
            "geo": (self.w_a, self.b_a),
            "fuse": (self.w_f, self.b_f),
            "out": (self.w_out, self.b_out),
        }
        out = {}
        for key, (w, b) in names.items():
            out[f"{prefix}.{key}.weight"] = w
            out[f"{prefix}.{key}.bias"] = b
        return out

    def uv(self, chan_matrix: np.ndarray, pk: PreservedKnowledge) -> tuple[Tensor, Tensor]:
        """Per-channel (u, v) for a head with chan_matrix.shape[0] channels."""
        pooled = Tensor(chan_matrix.mean(axis=0))
        e_zg = T.relu(T.affine(pooled, self.w_zg, self.b_zg))
        if pk.p.shape[0] > 0:
            rows = [T.relu(T.affine(Tensor(pk.p[i]), self.w_p, self.b_p))
                    for i in range(pk.p.shape[0])]
            stacked = T.stack_rows(rows)
            e_p = T.vecmat(Tensor(np.full(len(rows), 1.0 / len(rows))), stacked)
        else:
            e_p = T.relu(T.affine(Tensor(np.zeros(FEATURE_DIM)), self.w_p, self.b_p))
        e_m = T.relu(T.affine(Tensor(pk.h_m), self.w_m, self.b_m))
        e_a = T.relu(T.affine(Tensor(pk.a), self.w_a, self.b_a))
        fused = T.relu(T.affine(T.concat_vec([e_zg, e_p, e_m, e_a]), self.w_f, self.b_f))
        pairs = []
        for c in range(chan_matrix.shape[0]):
            x = T.concat_vec([fused, Tensor(chan_matrix[c])])
            pairs.append(T.tanh_act(T.affine(x, self.w_out, self.b_out)))
        mat = T.scale(T.stack_rows(pairs), UV_SCALE)
        n = chan_matrix.shape[0]
        u = T.reshape(T.slice_cols(mat, 0, 1), (n,))
        v = T.reshape(T.slice_cols(mat, 1, 2), (n,))
        return u, v


class GeneratorSet:
    """The three per-group correction generators (client-local, never uploaded)."""

    def __init__(self, phi_s: Mlp, phi_d: Mlp, phi_c: HeadGenerator):
        self.phi_s = phi_s
        self.phi_d = phi_d
        self.phi_c = phi_c

    @classmethod
    def init_random(cls, rng: np.random.Generator) -> "GeneratorSet":
        c_s, c_d = 8, 32
        anchor_s = np.concatenate([np.zeros(c_s), np.full(c_s, ANCHOR_PREACT)])
        anchor_d = np.concatenate([np.zeros(c_d), np.full(c_d, ANCHOR_PREACT)])
        phi_s = Mlp([4 * c_s + FEATURE_DIM, 32, 2 * c_s], rng, final_bias=anchor_s)
        phi_d = Mlp([4 * c_d + FEATURE_DIM, 64, 64, 2 * c_d], rng, final_bias=anchor_d)
        return cls(phi_s, phi_d, HeadGenerator(rng))

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.phi_s.params("phi_s"))
        out.update(self.phi_d.params("phi_d"))
        out.update(self.phi_c.params("phi_c"))
        return out

    def output_params(self) -> list[Tensor]:
        """The layers that directly emit (u, v); decayed toward neutral."""
        out = []
        for mlp in (self.phi_s, self.phi_d):
            w, b, _ = mlp.layers[-1]
            out.extend([w, b])
        out.extend([self.phi_c.w_out, self.phi_c.b_out])
        return out

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None

    def force_zero_output(self) -> None:
        """Zero the final layers so every correction is exactly zero."""
        for mlp in (self.phi_s, self.phi_d):
            w, b, _ = mlp.layers[-1]
            w.data[...] = 0.0
            b.data[...] = 0.0
        self.phi_c.w_out.data[...] = 0.0
        self.phi_c.b_out.data[...] = 0.0

    def uv_graph(self, inputs: "CorrectionInputs") -> tuple[Tensor, Tensor]:
        group = inputs.group
        if group is LayerGroup.HEAD:
            return self.phi_c.uv(inputs.chan_matrix, inputs.pk)
        mlp = self.phi_s if group is LayerGroup.SHALLOW else self.phi_d
        x = Tensor(np.concatenate([inputs.summary_vec, inputs.pk.h_m]))
        out = T.scale(mlp.forward(x), UV_SCALE)
        c = inputs.channel_count
        return T.slice_vec(out, 0, c), T.slice_vec(out, c, 2 * c)


@dataclass
class CorrectionInputs:
    """Everything a generator needs; all arrays are constants w.r.t. omega."""

    group: LayerGroup
    summary_vec: np.ndarray                 # [z; g], length 4C
    chan_matrix: np.ndarray                 # [C, 4] rows (z_mean, z_var, g_mean, g_var)
    pk: PreservedKnowledge
    neg_grad: dict[str, np.ndarray]
    ref_diff: dict[str, np.ndarray]         # theta_ref - theta
    widths: tuple[int, ...]

    @property
    def channel_count(self) -> int:
        return int(sum(self.widths))


def correction_inputs(
    net: SegNet,
    grads: dict[str, np.ndarray],
    theta_ref: dict[str, np.ndarray],
    group: LayerGroup,
    pk: PreservedKnowledge,
    fresh_head_rows: int = 0,
) -> CorrectionInputs:
    arrays = {n: p.data for n, p in net.param_items()}
    z = group_summary(arrays, group)
    g = group_summary(grads, group)
    summary_vec = np.concatenate([z.vector(), g.vector()])
    chan_matrix = np.stack(
        [z.per_channel_mean, z.per_channel_var, g.per_channel_mean, g.per_channel_var], axis=1
    )
    neg_grad, ref_diff = {}, {}
    for kname, bname in GROUP_LAYERS[group]:
        for name in (kname, bname):
            neg_grad[name] = -grads[name]
            ref_diff[name] = theta_ref[name] - arrays[name]
    if group is LayerGroup.HEAD and fresh_head_rows > 0:
        # rows added at this task boundary have no pre-task state to preserve;
        # they learn by plain descent, corrections touch only the old rows
        for name in ("head.weight", "head.bias"):
            neg_grad[name] = neg_grad[name].copy()
            ref_diff[name] = ref_diff[name].copy()
            neg_grad[name][-fresh_head_rows:] = 0.0
            ref_diff[name][-fresh_head_rows:] = 0.0
    widths = group_channel_widths(group, net.class_count)
    return CorrectionInputs(group, summary_vec, chan_matrix, pk, neg_grad, ref_diff, widths)


def correction_graph(gen: GeneratorSet, inputs: CorrectionInputs) -> dict[str, Tensor]:
    """Build delta-theta for every parameter of the group, in-graph."""
    u, v = gen.uv_graph(inputs)
    out: dict[str, Tensor] = {}
    offset = 0
    for (kname, bname), width in zip(GROUP_LAYERS[inputs.group], inputs.widths):
        u_l = T.slice_vec(u, offset, offset + width)
        v_l = T.slice_vec(v, offset, offset + width)
        for name in (kname, bname):
            out[name] = T.add(
                T.channel_mul(u_l, Tensor(inputs.neg_grad[name])),
                T.channel_mul(v_l, Tensor(inputs.ref_diff[name])),
            )
        offset += width
    return out


def gen_correction(gen: GeneratorSet, inputs: CorrectionInputs) -> dict[str, np.ndarray]:
    """Correction values for one group (no recording)."""
    return {name: t.data for name, t in correction_graph(gen, inputs).items()}


def stratified_update(
    net: SegNet,
    grads: dict[str, np.ndarray],
    corrections: dict[str, np.ndarray] | None,
    eta: float,
    alphas: ProtectionWeights | Mapping[LayerGroup, float],
    momentum_state: dict[str, np.ndarray],
    mu_momentum: float,
    weight_decay: float,
) -> None:
    """In-place: velocity <- mu*velocity + (grad + wd*theta); theta <- theta - eta*velocity + alpha_l*delta_l."""
    alpha_of = alphas.for_group if isinstance(alphas, ProtectionWeights) else alphas.__getitem__
    for name, p in net.param_items():
        g = grads[name]
        vel = momentum_state.get(name)
        if vel is None or vel.shape != g.shape:
            vel = np.zeros_like(g)
        vel = mu_momentum * vel + (g + weight_decay * p.data)
        momentum_state[name] = vel
        new = p.data - eta * vel
        if corrections is not None and name in corrections:
            new = new + alpha_of(group_of(name)) * corrections[name]
        p.data = new


def _batch_ce(net: SegNet, samples: list[TerrainSample], params=None) -> Tensor:
    images = Tensor(np.stack([s.image for s in samples]))
    labels = np.stack([s.labels for s in samples])
    return T.pixel_cross_entropy_batch(net.forward(images, params=params), labels)


def lsr_loss(
    net: SegNet,
    task_batch: list[TerrainSample],
    mem_batch: list[TerrainSample],
    lam: float,
    params=None,
) -> Tensor:
    """Task cross-entropy plus lam * memory cross-entropy; absent terms are 0."""
    if not task_batch and not mem_batch:
        raise DegenerateBatchError("both batches empty")
    if task_batch and mem_batch:
        return T.add(
            _batch_ce(net, task_batch, params),
            T.scale(_batch_ce(net, mem_batch, params), lam),
        )
    if task_batch:
        return _batch_ce(net, task_batch, params)
    return T.scale(_batch_ce(net, mem_batch, params), lam)


def unrolled_memory_loss(
    gen: GeneratorSet,
    net: SegNet,
    mem_batch: list[TerrainSample],
    corr_inputs: dict[LayerGroup, CorrectionInputs],
    applied: dict[str, np.ndarray],
    alphas: Mapping[LayerGroup, float],
) -> Tensor:
    """Memory loss at the just-updated parameters, rebuilt as a function of omega.

    net already carries theta' = theta - eta*velocity + alpha*delta(omega_0);
    substituting theta'(omega) = theta' + alpha*(delta(omega) - delta(omega_0))
    gives the same value and the exact gradient w.r.t. omega at omega_0.
    """
    override: dict[str, Tensor] = {}
    for group, inputs in corr_inputs.items():
        alpha = alphas[group]
        deltas = correction_graph(gen, inputs)
        for name, delta in deltas.items():
            base = Tensor(net.params[name].data - alpha * applied[name])
            override[name] = T.add(base, T.scale(delta, alpha))
    for name, p in net.param_items():
        if name not in override:
            override[name] = Tensor(p.data)
    return _batch_ce(net, mem_batch, params=override)


def generator_step(
    gen: GeneratorSet,
    net: SegNet,
    mem_batch: list[TerrainSample],
    corr_inputs: dict[LayerGroup, CorrectionInputs],
    applied: dict[str, np.ndarray],
    alphas: Mapping[LayerGroup, float],
    eta_gen: float,
    clip_norm: float = 2.0,
) -> float | None:
    """One SGD step on omega through the one-step unrolled memory loss."""
    if not mem_batch:
        log.debug("generator_step skipped: empty memory batch")
        return None
    if eta_gen == 0.0:
        return None
    gen.zero_grad()
    with Tape() as tape:
        loss = unrolled_memory_loss(gen, net, mem_batch, corr_inputs, applied, alphas)
        backward(loss, tape)
    params = gen.params()
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    total = float(np.sqrt(total))
    factor = eta_gen if total <= clip_norm else eta_gen * clip_norm / total
    for p in params.values():
        if p.grad is not None:
            p.data = p.data - factor * p.grad
    for p in gen.output_params():
        p.data = p.data * (1.0 - OMEGA_DECAY)
    gen.zero_grad()
    return float(loss.data)


@dataclass
class LocalHyper:
    """Per-client training knobs for one round."""

    eta: float
    lam: float
    alphas: Mapping[LayerGroup, float] | None   # None disables corrections
    epochs: int
    batch: int
    mu_momentum: float
    weight_decay: float
    eta_gen: float
    rehearse: bool
    fresh_head_rows: int = 0


@dataclass
class LocalResult:
    net: SegNet
    mean_loss: float
    steps: int


def local_train(
    global_net: SegNet,
    gen: GeneratorSet,
    task_data: list[TerrainSample],
    buffer: MemoryBuffer,
    hyper: LocalHyper,
    theta_ref: dict[str, np.ndarray],
    momentum_state: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> LocalResult:
    """The per-batch loop of one client for one round; generators stay local."""
    net = global_net.clone()
    # fully masked samples carry no supervision for this task
    task_data = [s for s in task_data if np.any(s.labels != 255)]
    mem_pool = buffer.all_samples() if (hyper.rehearse and not buffer.is_empty()) else []
    use_corrections = hyper.alphas is not None and mem_pool
    pk = preserved_knowledge(buffer, global_net) if use_corrections else PreservedKnowledge.empty()
    loss_sum, steps = 0.0, 0
    for _ in range(hyper.epochs):
        if task_data:
            order = rng.permutation(len(task_data))
            batches = [
                [task_data[i] for i in order[pos:pos + hyper.batch]]
                for pos in range(0, len(order), hyper.batch)
            ]
        elif mem_pool:
            batches = [[]]
        else:
            return LocalResult(net, 0.0, 0)
        for task_batch in batches:
            mem_batch = []
            if mem_pool:
                take = min(hyper.batch, len(mem_pool))
                mem_batch = [mem_pool[i] for i in rng.choice(len(mem_pool), take, replace=False)]
            net.zero_grad()
            with Tape() as tape:
                loss = lsr_loss(net, task_batch, mem_batch, hyper.lam)
                backward(loss, tape)
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in net.param_items()
            }
            corr_values = None
            corr_inputs: dict[LayerGroup, CorrectionInputs] = {}
            if use_corrections:
                corr_values = {}
                for group in LayerGroup:
                    inputs = correction_inputs(
                        net, grads, theta_ref, group, pk, hyper.fresh_head_rows
                    )
                    corr_inputs[group] = inputs
                    corr_values.update(gen_correction(gen, inputs))
            stratified_update(
                net, grads, corr_values, hyper.eta, hyper.alphas or {g: 0.0 for g in LayerGroup},
                momentum_state, hyper.mu_momentum, hyper.weight_decay,
            )
            if use_corrections:
                generator_step(
                    gen, net, mem_batch, corr_inputs, corr_values, hyper.alphas, hyper.eta_gen
                )
            loss_sum += float(loss.data)
            steps += 1
    net.zero_grad()
    return LocalResult(net, loss_sum / steps if steps else 0.0, steps)
