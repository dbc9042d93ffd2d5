from __future__ import annotations

import numpy as np
import pytest

from terrafed import tensor as T
from terrafed.errors import ContractError, DegenerateBatchError
from terrafed.lsr import (
    CorrectionInputs,
    GeneratorSet,
    LocalHyper,
    PreservedKnowledge,
    ProtectionWeights,
    class_prototypes,
    correction_graph,
    correction_inputs,
    gen_correction,
    generator_step,
    geometric_features,
    local_train,
    lsr_loss,
    memory_features,
    preserved_knowledge,
    stratified_update,
    unrolled_memory_loss,
)
from terrafed.segnet import LayerGroup, SegNet
from terrafed.tensor import Tape, Tensor, backward
from terrafed.terrain import MemoryBuffer, gen_terrain
from terrafed.rng import stream


def make_net(classes=3, seed=0):
    return SegNet.init_random(classes, np.random.default_rng(seed))


def make_buffer(classes=(0, 1, 2), per_class=2, seed=0):
    buf = MemoryBuffer(capacity=32)
    for c in classes:
        buf.exemplars[c] = [
            gen_terrain(seed + 31 * c + i, (c,), 8, 8, 1) for i in range(per_class)
        ]
    return buf


def training_state(seed=0, classes=3):
    """Net, generators, buffer, grads, theta_ref, pk for correction tests."""
    net = make_net(classes, seed)
    gen = GeneratorSet.init_random(np.random.default_rng(seed + 1))
    buf = make_buffer(tuple(range(classes)), seed=seed)
    samples = [gen_terrain(seed + 900 + i, tuple(range(classes)), 8, 8, 3) for i in range(4)]
    net.zero_grad()
    with Tape() as tape:
        loss = lsr_loss(net, samples, buf.all_samples()[:4], 1.0)
        backward(loss, tape)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for n, p in net.param_items()}
    net.zero_grad()
    ref = {n: p.data.copy() for n, p in net.param_items()}
    pk = preserved_knowledge(buf, net)
    return net, gen, buf, samples, grads, ref, pk


class TestPreservedKnowledge:
    def test_single_exemplar_memory_feature(self):
        net = make_net()
        buf = MemoryBuffer(4)
        s = gen_terrain(5, (0,), 8, 8, 1)
        buf.exemplars[0] = [s]
        h = memory_features(buf, net)
        expected = T.global_avg_pool(net.features(Tensor(s.image))).data
        assert np.array_equal(h, expected)

    def test_duplicated_exemplars_keep_mean(self):
        net = make_net()
        s = gen_terrain(6, (0,), 8, 8, 1)
        one = MemoryBuffer(8)
        one.exemplars[0] = [s]
        two = MemoryBuffer(8)
        two.exemplars[0] = [s.copy(), s.copy()]
        assert np.allclose(memory_features(one, net), memory_features(two, net), atol=1e-15)

    def test_memory_feature_matches_two_loop_oracle(self):
        net = make_net(seed=4)
        buf = make_buffer(seed=9)
        h = memory_features(buf, net)
        acc, n = np.zeros(16), 0
        for s in buf.all_samples():
            feats = net.features(Tensor(s.image)).data
            acc += feats.mean(axis=(1, 2))
            n += 1
        assert np.max(np.abs(h - acc / n)) < 1e-12

    def test_fully_labeled_prototype_is_spatial_mean(self):
        net = make_net()
        buf = MemoryBuffer(4)
        s = gen_terrain(7, (1,), 8, 8, 1)  # single cell: all pixels class 1
        buf.exemplars[1] = [s]
        p, ids = class_prototypes(buf, net)
        assert ids == (1,)
        feats = net.features(Tensor(s.image)).data
        assert np.max(np.abs(p[0] - feats.mean(axis=(1, 2)))) < 1e-12

    def test_identical_images_give_identical_prototypes(self):
        net = make_net()
        base = gen_terrain(8, (0,), 8, 8, 1)
        twin = base.copy()
        twin.labels = np.full_like(base.labels, 1)
        buf = MemoryBuffer(4)
        buf.exemplars[0] = [base]
        buf.exemplars[1] = [twin]
        p, _ = class_prototypes(buf, net)
        assert np.array_equal(p[0], p[1])

    def test_prototypes_match_masked_mean_oracle(self):
        net = make_net(seed=2)
        buf = make_buffer(seed=3)
        p, ids = class_prototypes(buf, net)
        for row, cls in zip(p, ids):
            acc, count = np.zeros(16), 0
            for s in buf.exemplars[cls]:
                feats = net.features(Tensor(s.image)).data
                for y in range(8):
                    for x in range(8):
                        if s.labels[y, x] == cls:
                            acc += feats[:, y, x]
                            count += 1
            assert np.max(np.abs(row - acc / count)) < 1e-12

    def test_geometric_features_cases(self):
        orth = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert np.array_equal(geometric_features(orth), np.zeros(3))
        same = np.array([[1.0, 2.0], [1.0, 2.0]])
        assert np.allclose(geometric_features(same), np.ones(3), atol=1e-12)
        single = np.array([[3.0, 4.0]])
        assert np.array_equal(geometric_features(single), np.ones(3))

    def test_geometric_features_match_pairwise_oracle(self):
        rng = np.random.default_rng(10)
        p = rng.normal(size=(3, 6))
        a = geometric_features(p)
        sims = []
        for i in range(3):
            for j in range(i + 1, 3):
                sims.append(p[i] @ p[j] / (np.linalg.norm(p[i]) * np.linalg.norm(p[j])))
        assert a[0] == pytest.approx(min(sims))
        assert a[1] == pytest.approx(float(np.mean(sims)))
        assert a[2] == pytest.approx(max(sims))

    def test_zero_norm_prototype_pairs_score_zero(self):
        p = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert np.array_equal(geometric_features(p), np.zeros(3))


class TestGenCorrection:
    def test_null_generator_gives_zero_correction(self):
        net, gen, _, _, grads, ref, pk = training_state(seed=1)
        gen.force_zero_output()
        for group in LayerGroup:
            corr = gen_correction(gen, correction_inputs(net, grads, ref, group, pk))
            for arr in corr.values():
                assert np.all(arr == 0.0)

    def test_anchored_at_snapshot_with_zero_u(self):
        """u = 0 and theta = theta_ref make the correction vanish."""
        net, gen, _, _, grads, ref, pk = training_state(seed=2)
        # zero the u half of every generator's final layer
        for mlp, c in ((gen.phi_s, 8), (gen.phi_d, 32)):
            w, b, _ = mlp.layers[-1]
            w.data[:c] = 0.0
            b.data[:c] = 0.0
        gen.phi_c.w_out.data[0] = 0.0
        gen.phi_c.b_out.data[0] = 0.0
        ref_now = {n: p.data.copy() for n, p in net.param_items()}  # theta == theta_ref
        for group in LayerGroup:
            corr = gen_correction(gen, correction_inputs(net, grads, ref_now, group, pk))
            for arr in corr.values():
                assert np.max(np.abs(arr)) == 0.0

    def test_matches_direct_broadcast_oracle(self):
        net, gen, _, _, grads, ref, pk = training_state(seed=3)
        for group in LayerGroup:
            inputs = correction_inputs(net, grads, ref, group, pk)
            u, v = gen.uv_graph(inputs)
            corr = gen_correction(gen, inputs)
            offset = 0
            from terrafed.segnet import GROUP_LAYERS
            for (kname, bname), width in zip(GROUP_LAYERS[group], inputs.widths):
                for name in (kname, bname):
                    arr = corr[name]
                    for c in range(width):
                        expected = (
                            u.data[offset + c] * (-grads[name][c])
                            + v.data[offset + c] * (ref[name][c] - net.params[name].data[c])
                        )
                        assert np.max(np.abs(arr[c] - expected)) < 1e-12
                offset += width

    def test_correction_boundedness(self):
        """|u|,|v| <= 1 implies the inf-norm bound on the correction."""
        for seed in range(5):
            net, gen, _, _, grads, ref, pk = training_state(seed=seed)
            for group in LayerGroup:
                inputs = correction_inputs(net, grads, ref, group, pk)
                corr = gen_correction(gen, inputs)
                for name, arr in corr.items():
                    bound = (
                        np.max(np.abs(grads[name]))
                        + np.max(np.abs(ref[name] - net.params[name].data))
                    )
                    assert np.max(np.abs(arr)) <= bound + 1e-12


class TestStratifiedUpdate:
    def test_equation_arithmetic(self):
        net = make_net(classes=2, seed=5)
        name = "head.bias"
        net.params[name].data[...] = 1.0
        grads = {n: np.zeros_like(p.data) for n, p in net.param_items()}
        grads[name][...] = 2.0
        corr = {name: np.full_like(net.params[name].data, 0.4)}
        stratified_update(
            net, grads, corr, eta=0.1,
            alphas={g: 0.5 for g in LayerGroup},
            momentum_state={}, mu_momentum=0.0, weight_decay=0.0,
        )
        assert np.allclose(net.params[name].data, 1.0, atol=1e-15)

    def test_reduces_to_vanilla_sgd(self):
        net = make_net(seed=6)
        before = {n: p.data.copy() for n, p in net.param_items()}
        rng = np.random.default_rng(0)
        grads = {n: rng.normal(size=p.data.shape) for n, p in net.param_items()}
        stratified_update(
            net, grads, None, eta=0.05, alphas={g: 0.3 for g in LayerGroup},
            momentum_state={}, mu_momentum=0.0, weight_decay=0.0,
        )
        for n, p in net.param_items():
            assert np.array_equal(p.data, before[n] - 0.05 * grads[n])

    def test_head_alpha_moves_head_only(self):
        """alpha_c on/off changes the head trajectory, not the shallow one."""
        runs = {}
        for alpha_c in (0.0, 0.5):
            net, gen, _, _, grads, ref, pk = training_state(seed=7)
            alphas = {LayerGroup.SHALLOW: 0.0, LayerGroup.DEEP: 0.0, LayerGroup.HEAD: alpha_c}
            corr = {}
            for group in LayerGroup:
                corr.update(gen_correction(gen, correction_inputs(net, grads, ref, group, pk)))
            stratified_update(net, grads, corr, 0.01, alphas, {}, 0.9, 1e-4)
            runs[alpha_c] = {n: p.data.copy() for n, p in net.param_items()}
        assert not np.array_equal(runs[0.0]["head.weight"], runs[0.5]["head.weight"])
        assert np.array_equal(runs[0.0]["shallow.conv.kernel"], runs[0.5]["shallow.conv.kernel"])

    def test_ordering_enforced(self):
        with pytest.raises(ContractError):
            ProtectionWeights(0.5, 0.2, 0.8)
        with pytest.raises(ContractError):
            ProtectionWeights(0.0, 0.0, 0.0)
        w = ProtectionWeights(0.05, 0.2, 0.8)
        assert w.for_group(LayerGroup.DEEP) == 0.2
        assert w.mean_budget() == pytest.approx((0.05 + 0.2 + 0.8) / 3)


class TestLsrLoss:
    def test_lambda_zero_is_task_loss(self):
        net = make_net()
        task = [gen_terrain(1, (0, 1, 2), 8, 8, 2)]
        mem = [gen_terrain(2, (0,), 8, 8, 1)]
        full = lsr_loss(net, task, mem, 0.0)
        only = lsr_loss(net, task, [], 1.0)
        assert full.item() == only.item()

    def test_identical_batches_double(self):
        net = make_net()
        batch = [gen_terrain(3, (0, 1, 2), 8, 8, 2)]
        combined = lsr_loss(net, batch, batch, 1.0)
        single = lsr_loss(net, batch, [], 1.0)
        assert combined.item() == pytest.approx(2.0 * single.item(), rel=1e-15)

    def test_both_empty_raises(self):
        with pytest.raises(DegenerateBatchError):
            lsr_loss(make_net(), [], [], 1.0)


class TestGeneratorStep:
    def test_zero_eta_keeps_generators_bitwise(self):
        net, gen, _, _, grads, ref, pk = training_state(seed=8)
        before = {n: p.data.copy() for n, p in gen.params().items()}
        inputs = {g: correction_inputs(net, grads, ref, g, pk) for g in LayerGroup}
        applied = {}
        for g in LayerGroup:
            applied.update(gen_correction(gen, inputs[g]))
        mem = make_buffer(seed=8).all_samples()[:3]
        result = generator_step(gen, net, mem, inputs, applied,
                                {g: 0.2 for g in LayerGroup}, eta_gen=0.0)
        assert result is None
        for n, p in gen.params().items():
            assert np.array_equal(p.data, before[n]), n

    def test_empty_memory_is_noop(self):
        net, gen, _, _, grads, ref, pk = training_state(seed=8)
        inputs = {g: correction_inputs(net, grads, ref, g, pk) for g in LayerGroup}
        assert generator_step(gen, net, [], inputs, {}, {g: 0.2 for g in LayerGroup}, 0.1) is None

    def test_unrolled_gradient_matches_finite_differences(self):
        net, gen, buf, _, grads, ref, pk = training_state(seed=9)
        inputs = {g: correction_inputs(net, grads, ref, g, pk) for g in LayerGroup}
        applied = {}
        for g in LayerGroup:
            applied.update(gen_correction(gen, inputs[g]))
        mem = buf.all_samples()[:3]
        alphas = {LayerGroup.SHALLOW: 0.1, LayerGroup.DEEP: 0.3, LayerGroup.HEAD: 0.7}

        def loss_value():
            return unrolled_memory_loss(gen, net, mem, inputs, applied, alphas).item()

        gen.zero_grad()
        with Tape() as tape:
            loss = unrolled_memory_loss(gen, net, mem, inputs, applied, alphas)
            backward(loss, tape)
        params = gen.params()
        rng = np.random.default_rng(0)
        checked = 0
        for name in ["phi_s.l1.weight", "phi_d.l2.bias", "phi_c.out.weight", "phi_c.fuse.weight"]:
            p = params[name]
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            idx = int(rng.integers(flat.size))
            orig = flat[idx]
            step = 1e-5
            flat[idx] = orig + step
            up = loss_value()
            flat[idx] = orig - step
            down = loss_value()
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            analytic = gflat[idx]
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6)
            assert rel < 1e-3, (name, fd, analytic)
            checked += 1
        assert checked >= 3

    def test_repeated_steps_decrease_unrolled_loss(self):
        wins = 0
        for seed in range(10):
            net, gen, buf, _, grads, ref, pk = training_state(seed=20 + seed)
            inputs = {g: correction_inputs(net, grads, ref, g, pk) for g in LayerGroup}
            applied = {}
            for g in LayerGroup:
                applied.update(gen_correction(gen, inputs[g]))
            mem = buf.all_samples()[:3]
            alphas = {LayerGroup.SHALLOW: 0.1, LayerGroup.DEEP: 0.3, LayerGroup.HEAD: 0.7}
            losses = []
            for _ in range(4):
                losses.append(
                    generator_step(gen, net, mem, inputs, applied, alphas, eta_gen=1e-3)
                )
            if all(b <= a + 1e-9 for a, b in zip(losses, losses[1:])):
                wins += 1
        assert wins >= 8, wins


class TestLocalTrain:
    def _hyper(self, **kw):
        base = dict(
            eta=0.05, lam=1.0, alphas={g: 0.2 for g in LayerGroup}, epochs=1, batch=4,
            mu_momentum=0.9, weight_decay=1e-4, eta_gen=0.01, rehearse=True,
        )
        base.update(kw)
        return LocalHyper(**base)

    def test_zero_epochs_returns_unchanged(self):
        net = make_net(seed=11)
        gen = GeneratorSet.init_random(np.random.default_rng(0))
        data = [gen_terrain(40 + i, (0, 1, 2), 8, 8, 3) for i in range(4)]
        result = local_train(net, gen, data, MemoryBuffer(8), self._hyper(epochs=0),
                             {n: p.data.copy() for n, p in net.param_items()}, {},
                             stream(0, "local", 0))
        for n, p in result.net.param_items():
            assert np.array_equal(p.data, net.params[n].data)

    def test_null_generators_and_zero_alpha_match_plain_rehearsal_sgd(self):
        """LSR machinery with forced-zero outputs reproduces plain SGD bitwise."""
        net = make_net(seed=12)
        gen = GeneratorSet.init_random(np.random.default_rng(1))
        gen.force_zero_output()
        buf = make_buffer(seed=12)
        data = [gen_terrain(50 + i, (0, 1, 2), 8, 8, 3) for i in range(4)]
        ref = {n: p.data.copy() for n, p in net.param_items()}
        hyper = self._hyper(alphas={g: 0.0 for g in LayerGroup}, eta_gen=0.0)
        got = local_train(net, gen, data, buf, hyper, ref, {}, stream(7, "local", 0))

        # hand-rolled rehearsal SGD with the identical stream
        expect = net.clone()
        momentum: dict[str, np.ndarray] = {}
        rng = stream(7, "local", 0)
        mem_pool = buf.all_samples()
        order = rng.permutation(len(data))
        for pos in range(0, len(order), 4):
            batch = [data[i] for i in order[pos:pos + 4]]
            take = min(4, len(mem_pool))
            mem = [mem_pool[i] for i in rng.choice(len(mem_pool), take, replace=False)]
            expect.zero_grad()
            with Tape() as tape:
                loss = lsr_loss(expect, batch, mem, 1.0)
                backward(loss, tape)
            for n, p in expect.param_items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                vel = momentum.get(n, np.zeros_like(g))
                vel = 0.9 * vel + (g + 1e-4 * p.data)
                momentum[n] = vel
                p.data = p.data - 0.05 * vel
        for n, p in got.net.param_items():
            assert np.array_equal(p.data, expect.params[n].data), n

    def test_task_loss_decreases_over_epochs(self):
        wins = 0
        for seed in range(10):
            net = make_net(seed=100 + seed)
            gen = GeneratorSet.init_random(np.random.default_rng(seed))
            data = [gen_terrain(700 + 13 * seed + i, (0, 1, 2), 8, 8, 3) for i in range(8)]

            def task_loss(model):
                return lsr_loss(model, data, [], 1.0).item()

            before = task_loss(net)
            result = local_train(
                net, gen, data, MemoryBuffer(8),
                self._hyper(epochs=4, alphas=None, rehearse=False),
                {n: p.data.copy() for n, p in net.param_items()}, {},
                stream(seed, "local", 0),
            )
            if task_loss(result.net) < before:
                wins += 1
        assert wins >= 9, wins


def test_preserved_knowledge_assembles(seed=0):
    net = make_net(seed=seed)
    buf = make_buffer(seed=seed)
    pk = preserved_knowledge(buf, net)
    assert pk.h_m.shape == (16,)
    assert pk.p.shape == (3, 16)
    assert pk.class_ids == (0, 1, 2)
    assert pk.a.shape == (3,)
    assert np.all(pk.a >= -1.0) and np.all(pk.a <= 1.0)
