import dataclasses
import math

import numpy as np
import numpy.testing as npt
import pytest

from dyncapmoe import autodiff as ad
from dyncapmoe import moe


# --------------------------------------------------------------------------
# independent straight-line oracles
# --------------------------------------------------------------------------

def prefix_oracle(p, top_p):
    """Sort by (-p, index), walk until the running sum reaches top_p."""
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    total = 0.0
    chosen = []
    for i in order:
        chosen.append(i)
        total += p[i]
        if total >= top_p:
            return chosen
    return chosen  # rounding deficit: everything active


def sampled_inclusion_exact(p, top_p):
    """Exact per-slot inclusion probabilities by enumerating draw orders."""
    n = len(p)
    incl = np.zeros(n)

    def walk(remaining, drawn, mass, prob):
        total = sum(p[i] for i in remaining)
        if mass >= top_p or not remaining or total <= 0.0:
            for i in drawn:
                incl[i] += prob
            return
        for i in remaining:
            if p[i] == 0.0:
                continue
            walk([j for j in remaining if j != i], drawn + [i],
                 mass + p[i], prob * p[i] / total)

    walk(list(range(n)), [], 0.0, 1.0)
    return incl


def silu_np(u):
    s = 1.0 / (1.0 + np.exp(-u))
    return u * s


def gated_ffn_np(x, params):
    return params.w_down.data @ (silu_np(params.w_gate.data @ x) * (params.w_up.data @ x))


def softmax_np(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def random_prob_vector(rng, n, with_ties):
    if with_ties:
        raw = rng.integers(1, 9, size=n).astype(np.float64)  # grid values force exact ties
    else:
        raw = rng.uniform(0.05, 1.0, size=n)
    return raw / raw.sum()


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

class TestMoEConfig:
    def test_shared_hidden_default_is_one_eighth(self):
        assert moe.MoEConfig(d_model=4, n_routed=2, expert_hidden=16).shared_hidden == 2
        assert moe.MoEConfig(d_model=4, n_routed=2, expert_hidden=64).shared_hidden == 8

    def test_shared_hidden_default_never_below_one(self):
        assert moe.MoEConfig(d_model=4, n_routed=2, expert_hidden=4).shared_hidden == 1

    def test_n_slots_counts_null(self):
        cfg = moe.MoEConfig(d_model=4, n_routed=3, expert_hidden=8, n_null=2)
        assert cfg.n_slots == 5
        assert cfg.role_of_slot(2) is moe.ExpertRole.ROUTED
        assert cfg.role_of_slot(3) is moe.ExpertRole.NULL

    @pytest.mark.parametrize("kwargs", [
        {"d_model": 0, "n_routed": 1, "expert_hidden": 4},
        {"d_model": 4, "n_routed": 0, "expert_hidden": 4},
        {"d_model": 4, "n_routed": 1, "expert_hidden": 4, "n_null": -1},
        {"d_model": 4, "n_routed": 1, "expert_hidden": 4, "top_p": 0.0},
        {"d_model": 4, "n_routed": 1, "expert_hidden": 4, "top_p": 1.2},
        {"d_model": 4, "n_routed": 1, "expert_hidden": 4, "routing_mode": "greedy"},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            moe.MoEConfig(**kwargs)


# --------------------------------------------------------------------------
# router
# --------------------------------------------------------------------------

class TestRoute:
    def test_zero_weights_give_uniform_probs(self):
        cfg = moe.MoEConfig(d_model=3, n_routed=4, expert_hidden=4, seed=1)
        layer = moe.DynamicCapacityMoE(cfg)
        layer.router.data[:] = 0.0
        state = layer.route(ad.Tensor([0.3, -0.2, 0.9]))
        npt.assert_allclose(state.probs.data, np.full(4, 0.25), atol=1e-15)

    def test_closed_form_two_slot_softmax(self):
        cfg = moe.MoEConfig(d_model=1, n_routed=2, expert_hidden=4, seed=1)
        layer = moe.DynamicCapacityMoE(cfg)
        layer.router.data[:] = np.array([[math.log(2.0)], [0.0]])
        state = layer.route(ad.Tensor([1.0]))
        npt.assert_allclose(state.probs.data, [2 / 3, 1 / 3], atol=1e-12)

    def test_probs_sum_to_one(self):
        cfg = moe.MoEConfig(d_model=6, n_routed=5, expert_hidden=4, n_null=2, seed=3)
        layer = moe.DynamicCapacityMoE(cfg)
        rng = np.random.default_rng(0)
        for _ in range(100):
            state = layer.route(ad.Tensor(rng.normal(size=6)))
            assert abs(state.probs.data.sum() - 1.0) <= 1e-12

    def test_dim_mismatch_raises(self):
        layer = moe.DynamicCapacityMoE(moe.MoEConfig(d_model=3, n_routed=2, expert_hidden=4))
        with pytest.raises(ad.ShapeError):
            layer.route(ad.Tensor([1.0, 2.0]))


# --------------------------------------------------------------------------
# deterministic Top-P
# --------------------------------------------------------------------------

class TestSelectDeterministic:
    def test_worked_examples(self):
        d = moe.select_top_p_deterministic(np.array([0.5, 0.3, 0.2]), 0.7)
        assert d.active == (0, 1) and d.k == 2
        d = moe.select_top_p_deterministic(np.array([0.8, 0.1, 0.1]), 0.7)
        assert d.active == (0,) and d.k == 1

    def test_p_equal_one_activates_all(self):
        rng = np.random.default_rng(4)
        for n in (1, 3, 8):
            p = random_prob_vector(rng, n, with_ties=False)
            d = moe.select_top_p_deterministic(p, 1.0)
            assert d.k == n and sorted(d.active) == list(range(n))

    def test_stable_tie_break_prefers_lower_index(self):
        d = moe.select_top_p_deterministic(np.array([0.3, 0.4, 0.3]), 0.6)
        assert d.active == (1, 0) and d.k == 2

    def test_threshold_below_max_prob_gives_argmax_only(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = random_prob_vector(rng, 6, with_ties=False)
            d = moe.select_top_p_deterministic(p, float(p.max()) * 0.5)
            assert d.k == 1 and d.active == (int(np.argmax(p)),)

    def test_k_monotone_in_p(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            p = random_prob_vector(rng, 7, with_ties=True)
            ks = [moe.select_top_p_deterministic(p, t).k
                  for t in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)]
            assert ks == sorted(ks)

    def test_matches_prefix_oracle_on_random_vectors(self):
        rng = np.random.default_rng(7)
        for trial in range(2000):
            n = int(rng.integers(1, 17))
            p = random_prob_vector(rng, n, with_ties=bool(trial % 2))
            for top_p in (0.1, 0.7, 1.0):
                d = moe.select_top_p_deterministic(p, top_p)
                assert list(d.active) == prefix_oracle(p.tolist(), top_p)

    def test_gate_mass_is_raw_prefix_sum(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            p = random_prob_vector(rng, 6, with_ties=False)
            d = moe.select_top_p_deterministic(p, 0.7)
            oracle = sum(p[i] for i in d.active)
            assert abs(d.gate_mass() - oracle) <= 1e-12
            if d.k < 6:
                assert d.gate_mass() < 1.0  # never renormalized to 1

    def test_invalid_threshold_rejected(self):
        with pytest.raises(ValueError):
            moe.select_top_p_deterministic(np.array([0.5, 0.5]), 0.0)
        with pytest.raises(ValueError):
            moe.select_top_p_deterministic(np.array([0.5, 0.5]), 1.5)


# --------------------------------------------------------------------------
# sampled Top-P
# --------------------------------------------------------------------------

class TestSelectSampled:
    def test_one_hot_always_selects_the_hot_slot(self):
        p = np.array([1.0, 0.0, 0.0])
        for seed in range(50):
            d = moe.select_top_p_sampled(p, 1.0, np.random.default_rng(seed))
            assert d.active == (0,) and d.k == 1

    def test_uniform_four_p03_always_k2(self):
        p = np.full(4, 0.25)
        for seed in range(100):
            d = moe.select_top_p_sampled(p, 0.3, np.random.default_rng(seed))
            assert d.k == 2

    def test_draw_order_recorded_and_unique(self):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        d = moe.select_top_p_sampled(p, 1.0, np.random.default_rng(11))
        assert sorted(d.active) == [0, 1, 2, 3]
        assert [e.rank for e in d.per_expert] == [0, 1, 2, 3]

    def test_stops_at_original_mass_threshold(self):
        p = np.array([0.5, 0.3, 0.2])
        for seed in range(200):
            d = moe.select_top_p_sampled(p, 0.7, np.random.default_rng(seed))
            mass = d.gate_mass()
            assert mass >= 0.7 - 1e-12
            # removing the last draw must leave the mass short of the threshold
            assert mass - d.per_expert[-1].gate_prob < 0.7

    def test_marginal_inclusion_matches_enumeration(self):
        p = np.array([0.5, 0.3, 0.2])
        top_p = 0.7
        exact = sampled_inclusion_exact(p.tolist(), top_p)
        trials = 100_000
        counts = np.zeros(3)
        rng = np.random.default_rng(1234)
        for _ in range(trials):
            d = moe.select_top_p_sampled(p, top_p, rng)
            for i in d.active:
                counts[i] += 1
        freq = counts / trials
        npt.assert_allclose(freq, exact, atol=0.01)
        assert freq[0] >= p[0]  # argmax slot included at least as often as its prob


# --------------------------------------------------------------------------
# expert forward
# --------------------------------------------------------------------------

def small_layer(**overrides):
    kwargs = dict(d_model=4, n_routed=2, expert_hidden=6, n_null=1, n_shared=1,
                  top_p=0.7, seed=9)
    kwargs.update(overrides)
    return moe.DynamicCapacityMoE(moe.MoEConfig(**kwargs))


class TestExpertForward:
    def test_null_slot_outputs_exact_zero_constant(self):
        layer = small_layer()
        out = layer.expert_forward(ad.Tensor([1.0, -2.0, 3.0, 0.5]), 2)
        npt.assert_array_equal(out.data, np.zeros(4))
        assert not out.requires_grad

    def test_zero_weights_give_zero_output(self):
        layer = small_layer()
        for t in (layer.routed[0].w_gate, layer.routed[0].w_up, layer.routed[0].w_down):
            t.data[:] = 0.0
        out = layer.expert_forward(ad.Tensor([1.0, 2.0, 3.0, 4.0]), 0)
        npt.assert_array_equal(out.data, np.zeros(4))

    def test_matches_numpy_oracle(self):
        layer = small_layer()
        x = np.array([0.3, -0.8, 0.1, 1.2])
        out = layer.expert_forward(ad.Tensor(x), 1)
        npt.assert_array_equal(out.data, gated_ffn_np(x, layer.routed[1]))
        shared_out = layer.expert_forward(ad.Tensor(x), 3)
        npt.assert_array_equal(shared_out.data, gated_ffn_np(x, layer.shared[0]))

    def test_bad_index_raises(self):
        layer = small_layer()
        with pytest.raises(IndexError):
            layer.expert_forward(ad.Tensor([0.0] * 4), 4)

    def test_gradient_matches_finite_differences(self):
        layer = small_layer()
        xv = np.array([0.4, -0.2, 0.7, -0.5])
        params = layer.routed[0]
        up = np.array([0.3, -1.1, 0.6, 0.9])

        out = layer.expert_forward(ad.Tensor(xv), 0)
        ad.backward(ad.sum(ad.mul(out, ad.Tensor(up))))

        def f(w):
            rebuilt = dataclasses.replace(params, w_gate=w)
            return ad.sum(ad.mul(moe.gated_ffn(ad.Tensor(xv), rebuilt), ad.Tensor(up)))

        fd = ad.finite_diff_grad(f, ad.Tensor(params.w_gate.data))
        assert ad.max_rel_err(params.w_gate.grad, fd) <= 1e-6


# --------------------------------------------------------------------------
# layer forward, inference
# --------------------------------------------------------------------------

class TestForwardInfer:
    def test_saturated_gate_reduces_to_single_expert(self):
        layer = small_layer(n_null=0, n_shared=0)
        layer.router.data[:] = 0.0
        layer.router.data[0, :] = 250.0   # softmax saturates to exactly [1, 0]
        x = ad.Tensor([1.0, 1.0, 1.0, 1.0])
        y, decision = layer.forward_infer(x)
        assert decision.active == (0,) and decision.per_expert[0].gate_prob == 1.0
        npt.assert_array_equal(y.data, layer.expert_forward(x, 0).data)

    def test_matches_straight_line_oracle(self):
        layer = small_layer()
        rng = np.random.default_rng(13)
        for _ in range(20):
            xv = rng.normal(size=4)
            y, decision = layer.forward_infer(ad.Tensor(xv))
            p = softmax_np(layer.router.data @ xv)
            acc = np.zeros(4)
            for entry in decision.per_expert:
                if entry.role is moe.ExpertRole.NULL:
                    continue
                acc = acc + p[entry.index] * gated_ffn_np(xv, layer.routed[entry.index])
            acc = acc + gated_ffn_np(xv, layer.shared[0])
            npt.assert_array_equal(y.data, acc)

    def test_active_null_slot_leaves_output_unchanged(self):
        layer = small_layer(top_p=1.0)  # every slot active, including the null one
        xv = np.array([0.6, -0.3, 0.2, 0.8])
        y, decision = layer.forward_infer(ad.Tensor(xv))
        assert any(e.role is moe.ExpertRole.NULL for e in decision.per_expert)
        p = softmax_np(layer.router.data @ xv)
        acc = np.zeros(4)
        for entry in decision.per_expert:
            if entry.role is moe.ExpertRole.NULL:
                continue
            acc = acc + p[entry.index] * gated_ffn_np(xv, layer.routed[entry.index])
        acc = acc + gated_ffn_np(xv, layer.shared[0])
        npt.assert_array_equal(y.data, acc)

    def test_shared_expert_listed_for_every_token(self):
        layer = small_layer()
        rng = np.random.default_rng(14)
        for _ in range(25):
            _, decision = layer.forward_infer(ad.Tensor(rng.normal(size=4)))
            assert len(decision.shared) == 1
            assert decision.shared[0].role is moe.ExpertRole.SHARED
            assert decision.shared[0].index == layer.config.n_slots


# --------------------------------------------------------------------------
# layer forward, training
# --------------------------------------------------------------------------

class TestForwardTrain:
    def test_single_contribution_forward_equals_scaled_output(self):
        layer = small_layer(n_routed=1, n_null=0, n_shared=0, routing_mode="sampled",
                            top_p=0.5)
        xv = np.array([0.9, -0.4, 0.3, 0.1])
        for seed in range(10):
            y, decision = layer.forward_train(ad.Tensor(xv), np.random.default_rng(seed))
            entry = decision.per_expert[0]
            o = entry.gate_prob * gated_ffn_np(xv, layer.routed[0])
            npt.assert_allclose(y.data, entry.forward_scale * o, rtol=0, atol=1e-15)

    def test_argmax_contribution_passes_through_exactly(self):
        layer = small_layer(n_shared=0, top_p=0.05)  # only the argmax slot activates
        xv = np.array([0.2, 0.7, -0.5, 0.4])
        y, decision = layer.forward_train(ad.Tensor(xv), np.random.default_rng(3))
        entry = decision.per_expert[0]
        assert entry.is_argmax and entry.forward_scale == 1.0
        y_plain, _ = layer.forward_infer(ad.Tensor(xv))
        npt.assert_array_equal(y.data, y_plain.data)

    def test_multi_expert_forward_matches_scaled_oracle(self):
        layer = small_layer(routing_mode="sampled", top_p=0.9)
        xv = np.array([0.5, 0.1, -0.7, 0.3])
        for seed in range(10):
            y, decision = layer.forward_train(ad.Tensor(xv), np.random.default_rng(seed))
            p = softmax_np(layer.router.data @ xv)
            acc = np.zeros(4)
            for entry in decision.per_expert:
                assert entry.bern in (0, 1)
                if entry.role is moe.ExpertRole.NULL:
                    continue
                o = p[entry.index] * gated_ffn_np(xv, layer.routed[entry.index])
                acc = acc + entry.forward_scale * o
            acc = acc + gated_ffn_np(xv, layer.shared[0])
            npt.assert_allclose(y.data, acc, rtol=0, atol=1e-14)

    def test_gradients_doubled_versus_plain_graph(self):
        cfg = dict(n_shared=0, routing_mode="sampled", top_p=0.9)
        layer_est = small_layer(**cfg)
        layer_plain = small_layer(**cfg)  # identical parameters via identical seed
        xv = np.array([0.4, -0.6, 0.2, 0.9])

        y, decision = layer_est.forward_train(ad.Tensor(xv), np.random.default_rng(21))
        ad.backward(ad.sum(y))

        replay = dataclasses.replace(decision, per_expert=tuple(
            dataclasses.replace(e, bern=None, forward_scale=1.0)
            for e in decision.per_expert))
        y_plain, matches = layer_plain.forward_frozen(ad.Tensor(xv), replay)
        assert matches
        ad.backward(ad.sum(y_plain))

        est_params, plain_params = layer_est.parameters(), layer_plain.parameters()
        checked = 0
        for name, t in est_params.items():
            g_plain = plain_params[name].grad
            if t.grad is None:
                assert g_plain is None
                continue
            npt.assert_allclose(t.grad, 2.0 * g_plain, rtol=0, atol=1e-12)
            checked += 1
        assert checked >= 4  # router plus at least one full expert

    def test_null_slot_contributes_no_gradient_terms(self):
        layer = small_layer(n_routed=1, n_null=1, n_shared=0, top_p=1.0)
        xv = np.array([0.3, 0.3, -0.1, 0.2])
        y, decision = layer.forward_train(ad.Tensor(xv), np.random.default_rng(5))
        assert {e.role for e in decision.per_expert} == {moe.ExpertRole.ROUTED,
                                                         moe.ExpertRole.NULL}
        ad.backward(ad.sum(y))
        # router still receives gradient through the routed gate only; finite values
        assert np.all(np.isfinite(layer.router.grad))

    def test_frozen_replay_detects_argmax_flip(self):
        layer = small_layer(n_shared=0)
        xv = np.array([0.4, -0.6, 0.2, 0.9])
        _, decision = layer.forward_train(ad.Tensor(xv), np.random.default_rng(8))
        flipped = dataclasses.replace(decision, per_expert=tuple(
            dataclasses.replace(e, is_argmax=not e.is_argmax)
            for e in decision.per_expert))
        _, matches = layer.forward_frozen(ad.Tensor(xv), flipped)
        assert not matches


# --------------------------------------------------------------------------
# batched application
# --------------------------------------------------------------------------

class TestLayerApply:
    def test_single_token_batch_equals_direct_call(self):
        layer = small_layer()
        xv = np.array([0.1, 0.2, 0.3, 0.4])
        ys, ds = layer.layer_apply([xv], mode="infer")
        y_direct, d_direct = layer.forward_infer(ad.Tensor(xv))
        npt.assert_array_equal(ys[0].data, y_direct.data)
        assert ds[0].active == d_direct.active

    def test_infer_outputs_permute_with_the_batch(self):
        layer = small_layer()
        rng = np.random.default_rng(17)
        batch = rng.normal(size=(6, 4))
        ys, _ = layer.layer_apply(batch, mode="infer")
        perm = [3, 0, 5, 1, 4, 2]
        ys_perm, _ = layer.layer_apply(batch[perm], mode="infer")
        for j, src in enumerate(perm):
            npt.assert_array_equal(ys_perm[j].data, ys[src].data)

    def test_train_mode_is_reproducible(self):
        layer = small_layer(routing_mode="sampled")
        rng = np.random.default_rng(18)
        batch = rng.normal(size=(5, 4))
        ys1, ds1 = layer.layer_apply(batch, mode="train", step=7)
        ys2, ds2 = layer.layer_apply(batch, mode="train", step=7)
        for a, b in zip(ys1, ys2):
            npt.assert_array_equal(a.data, b.data)
        assert [d.active for d in ds1] == [d.active for d in ds2]

    def test_distinct_steps_draw_distinct_streams(self):
        layer = small_layer(routing_mode="sampled", top_p=0.9)
        rng = np.random.default_rng(19)
        batch = rng.normal(size=(8, 4))
        _, ds1 = layer.layer_apply(batch, mode="train", step=0)
        _, ds2 = layer.layer_apply(batch, mode="train", step=1)
        draws1 = [(d.active, tuple(e.bern for e in d.per_expert)) for d in ds1]
        draws2 = [(d.active, tuple(e.bern for e in d.per_expert)) for d in ds2]
        assert draws1 != draws2

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            small_layer().layer_apply([], mode="infer")

    def test_construction_is_deterministic(self):
        a, b = small_layer(), small_layer()
        for name, t in a.parameters().items():
            npt.assert_array_equal(t.data, b.parameters()[name].data)
