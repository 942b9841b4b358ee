import numpy as np
import pytest

from avmoe import tensor as T
from avmoe.moe_layer import ExpertFFN, MoELayer, MoELayerConfig, flops_report
from avmoe.routing import MOD_AUDIO, MOD_AV, MOD_VIDEO
from avmoe.tensor import Tensor, grad_check


def make_layer(mode, seed=0, **kw):
    cfg = MoELayerConfig(mode=mode, d=6, h=8, **kw)
    return MoELayer(cfg, np.random.default_rng(seed))


class TestExpertFFN:
    def test_zero_parameters_zero_output(self):
        e = ExpertFFN(Tensor.param(np.zeros((4, 6))), Tensor.param(np.zeros(6)),
                      Tensor.param(np.zeros((6, 4))), Tensor.param(np.zeros(4)))
        out = e.forward(Tensor(np.ones((3, 4))))
        assert np.array_equal(out.data, np.zeros((3, 4)))

    def test_identity_construction(self):
        d = 4
        e = ExpertFFN(Tensor.param(np.eye(d)), Tensor.param(np.zeros(d)),
                      Tensor.param(np.eye(d)), Tensor.param(np.zeros(d)),
                      activation="linear")
        x = np.random.default_rng(0).normal(size=(2, d))
        assert np.allclose(e.forward(Tensor(x)).data, x, atol=1e-12)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(1)
        e = ExpertFFN.init(5, 7, rng, activation="tanh")
        x = rng.normal(size=5)
        got = e.forward(Tensor(x)).data
        want = np.tanh(x @ e.W1.data + e.b1.data) @ e.W2.data + e.b2.data
        assert np.max(np.abs(got - want)) < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        e = ExpertFFN.init(4, 6, rng)
        target = Tensor(rng.normal(size=(3, 4)))
        x = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda t: T.mse(e.forward(t), target), x, eps=1e-4) < 1e-4


class TestMoEForward:
    def test_k1_equals_single_expert(self):
        layer = make_layer("sparse_topk", n_experts=4, k=1)
        X = Tensor(np.random.default_rng(3).normal(size=(5, 6)))
        out, decisions, _ = layer.forward(X)
        for t, d in enumerate(decisions):
            e = d.selected_experts[0]
            want = layer.experts[e].forward(Tensor(X.data[t:t + 1]))
            assert np.allclose(out.data[t], want.data[0], atol=1e-12)

    def test_identical_experts_routing_independent(self):
        layer = make_layer("sparse_topk", n_experts=4, k=2)
        proto = layer.experts[0]
        for e in layer.experts[1:]:
            e.W1.data[:] = proto.W1.data
            e.b1.data[:] = proto.b1.data
            e.W2.data[:] = proto.W2.data
            e.b2.data[:] = proto.b2.data
        X = Tensor(np.random.default_rng(4).normal(size=(4, 6)))
        out, _, _ = layer.forward(X)
        want = proto.forward(X)
        assert np.max(np.abs(out.data - want.data)) < 1e-12

    def test_dense_evaluation_oracle(self):
        layer = make_layer("sparse_topk", n_experts=4, k=2, seed=5)
        X = Tensor(np.random.default_rng(6).normal(size=(6, 6)))
        out, decisions, _ = layer.forward(X)
        for t, d in enumerate(decisions):
            dense = np.zeros(6)
            for slot, e in enumerate(d.selected_experts):
                y = layer.experts[e].forward(Tensor(X.data[t:t + 1])).data[0]
                dense += d.selected_weights.data[slot] * y
            assert np.max(np.abs(out.data[t] - dense)) < 1e-12

    def test_sparsity_contract(self):
        layer = make_layer("sparse_topk", n_experts=8, k=2, seed=7)
        layer.reset_eval_counts()
        X = Tensor(np.random.default_rng(8).normal(size=(10, 6)))
        layer.forward(X)
        assert sum(layer.eval_counts()) == 10 * 2

    def test_hierarchical_sparsity_contract(self):
        layer = make_layer("hierarchical", n_groups=2, n_per_group=4, m=2, seed=9)
        layer.reset_eval_counts()
        X = Tensor(np.random.default_rng(10).normal(size=(7, 6)))
        layer.forward(X)
        assert sum(layer.eval_counts()) == 7 * 2  # m=2 groups x 1 expert

    def test_hard_audiovisual_mean_of_groups(self):
        layer = make_layer("hard", n_groups=2, n_per_group=4, k=2, seed=11)
        X = Tensor(np.random.default_rng(12).normal(size=(3, 6)))
        out, decisions, _ = layer.forward(X, modalities=[MOD_AV] * 3)
        for t, d in enumerate(decisions):
            acc = np.zeros(6)
            for gid in d.selected_groups:
                ids, w = d.per_group_selection[gid]
                group_out = np.zeros(6)
                for slot, e in enumerate(ids):
                    group_out += w.data[slot] * layer.experts[e].forward(
                        Tensor(X.data[t:t + 1])).data[0]
                acc += 0.5 * group_out
            assert np.max(np.abs(out.data[t] - acc)) < 1e-12

    def test_hard_unimodal_group_confinement(self):
        layer = make_layer("hard", n_groups=2, n_per_group=4, k=2, seed=13)
        X = Tensor(np.random.default_rng(14).normal(size=(4, 6)))
        _, decisions, _ = layer.forward(X, modalities=[MOD_AUDIO, MOD_VIDEO] * 2)
        for d, tag in zip(decisions, [MOD_AUDIO, MOD_VIDEO] * 2):
            lo, hi = (0, 4) if tag == MOD_AUDIO else (4, 8)
            assert all(lo <= e < hi for e in d.selected_experts)

    def test_unselected_experts_zero_gradient(self):
        layer = make_layer("sparse_topk", n_experts=4, k=1, seed=15)
        X = Tensor(np.random.default_rng(16).normal(size=(2, 6)))
        out, decisions, _ = layer.forward(X)
        loss = T.tsum(T.mul(out, out))
        loss.backward()
        selected = {e for d in decisions for e in d.selected_experts}
        for i, e in enumerate(layer.experts):
            if i in selected:
                assert e.W1.grad is not None
            else:
                assert e.W1.grad is None

    def test_selected_gradients_match_finite_differences(self):
        layer = make_layer("sparse_topk", n_experts=3, k=2, seed=17)
        rng = np.random.default_rng(18)
        X_data = rng.normal(size=(3, 6))
        e0 = layer.experts[0]

        def loss_of(w1: Tensor):
            saved = e0.W1
            e0.W1 = w1
            try:
                out, _, _ = layer.forward(Tensor(X_data))
                return T.mse(out, Tensor(np.zeros_like(out.data)))
            finally:
                e0.W1 = saved

        assert grad_check(loss_of, Tensor(e0.W1.data.copy()), eps=1e-4) < 1e-4

    def test_expert_permutation_invariance(self):
        layer = make_layer("sparse_topk", n_experts=4, k=2, seed=19)
        X = Tensor(np.random.default_rng(20).normal(size=(5, 6)))
        out1, _, _ = layer.forward(X)
        perm = [2, 0, 3, 1]
        layer.experts = [layer.experts[p] for p in perm]
        # permute router columns consistently
        layer.router.weight = Tensor.param(layer.router.weight.data[:, perm])
        out2, _, _ = layer.forward(X)
        assert np.max(np.abs(out1.data - out2.data)) < 1e-12

    def test_hierarchical_g1_reduces_to_sparse(self):
        cfg_h = MoELayerConfig(mode="hierarchical", d=6, h=8, n_groups=1,
                               n_per_group=4, m=1, k_per_group=2)
        layer_h = MoELayer(cfg_h, np.random.default_rng(21))
        cfg_s = MoELayerConfig(mode="sparse_topk", d=6, h=8, n_experts=4, k=2)
        layer_s = MoELayer(cfg_s, np.random.default_rng(22))
        # share parameters
        layer_s.router.weight = layer_h.intra_routers[0].weight
        layer_s.experts = layer_h.experts
        X = Tensor(np.random.default_rng(23).normal(size=(6, 6)))
        out_h, _, _ = layer_h.forward(X)
        out_s, _, _ = layer_s.forward(X)
        assert np.array_equal(out_h.data, out_s.data)


class TestFlops:
    def test_dense_ratio_one(self):
        cfg = MoELayerConfig(mode="dense_ffn", d=32, h=64)
        assert flops_report(cfg, 100)["ratio"] == 1.0

    def test_sparse_8_2_slightly_above_two(self):
        cfg = MoELayerConfig(mode="sparse_topk", d=32, h=64, n_experts=8, k=2)
        r = flops_report(cfg, 1000)["ratio"]
        assert 2.0 < r < 2.3

    def test_activated_vs_total_parameter_flops(self):
        cfg = MoELayerConfig(mode="hierarchical", d=32, h=64, n_groups=2,
                             n_per_group=4, m=2, k_per_group=1)
        rep = flops_report(cfg, 10)
        # total spans 8 experts, activated-per-token expert work spans 2
        assert rep["total_param_flops"] == 8 * rep["dense_ffn_flops"]
        expert_only = rep["activated_flops"] - (2 * 32 * 2 + 2 * 2 * 32 * 4) * 10
        assert expert_only == 2 * rep["dense_ffn_flops"]

    def test_invalid_tokens(self):
        with pytest.raises(ValueError):
            flops_report(MoELayerConfig(), 0)
