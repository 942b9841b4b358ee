"""End-to-end acceptance checks: loss identities, gradient verification,
routing oracles, sparsity/FLOPs accounting, corruption protocol, group
specialization with its ablation, noise-adaptive routing, uptraining
representation tightening, and run determinism."""

import itertools
import math
import tempfile

import numpy as np
import pytest

from avmoe.corruption import allocate_masks, mix_at_snr, sample_plan_preset
from avmoe.gradcheck import run as run_gradcheck
from avmoe.metrics import spearman
from avmoe.moe_layer import MoELayer, MoELayerConfig, flops_report
from avmoe.moe_losses import load_balancing_loss, load_biasing_loss, router_z_loss
from avmoe.routing import (
    MOD_AUDIO, MOD_AV, MOD_VIDEO, DispatchStats, RouterParams,
    route_hierarchical, route_sparse, select_topk,
)
from avmoe.tensor import Tensor
from avmoe.trainer import (
    TrainConfig, eval_group_load_vs_snr, group_affinity,
    repr_distance_report, train,
)

SNR_GRID = [-10.0, -5.0, 0.0, 5.0, 10.0]

SPECIALIZATION_BASE = {
    "regime": "supervised_moe", "steps": 2500, "batch_size": 6,
    "lr": 1e-3, "optimizer": "adam", "seed": 0, "modality_dropout": 0.25,
    "identical_expert_init": True, "freeze_experts_steps": 2500,
    "router_warmup_steps": 2500, "inter_lr_scale": 10.0,
    "model": {"moe": {"mode": "hierarchical", "n_groups": 2, "n_per_group": 4,
                      "m": 2, "k_per_group": 1}},
    "generator": {"vocab": 16},
}

UPTRAIN_BASE = {
    "regime": "cav2vec_uptrain", "steps": 400, "batch_size": 4,
    "lr": 1e-3, "optimizer": "adam", "seed": 0,
    "model": {"moe": {"mode": "dense_ffn"}},
    "generator": {"vocab": 16},
}


# -- criterion 1: closed-form loss identities --------------------------------

def test_01_loss_identities():
    for n in (2, 4, 8, 16):
        f = np.full(n, 1.0 / n)
        P = Tensor(np.full(n, 1.0 / n))
        assert abs(float(load_balancing_loss(f, P).data) - 1.0) <= 1e-9
    lz = float(router_z_loss(Tensor(np.zeros((5, 8)))).data)
    assert abs(lz - math.log(8.0) ** 2) <= 1e-9
    half = np.array([0.5, 0.5])
    stats = DispatchStats(expert_f=[], expert_P=[],
                          g={MOD_AUDIO: half, MOD_VIDEO: half},
                          Q={MOD_AUDIO: Tensor(half.copy()),
                             MOD_VIDEO: Tensor(half.copy())},
                          counts={MOD_AUDIO: 4, MOD_VIDEO: 4, MOD_AV: 0},
                          n_groups=2)
    assert abs(float(load_biasing_loss(stats).data) - 1.5) <= 1e-12
    print("criterion 1 PASS: closed-form loss identities hold")


# -- criterion 2: gradient verification --------------------------------------

def test_02_gradient_verification():
    results = run_gradcheck(seeds=20, eps=1e-4)
    worst = max(results.values())
    bad = {k: v for k, v in results.items() if v >= 1e-4}
    assert not bad, f"gradient check failures: {bad}"
    print(f"criterion 2 PASS: {len(results)} ops, max relative error {worst:.2e}")


# -- criterion 3: routing oracles --------------------------------------------

def _brute_force_topk(probs: np.ndarray, k: int):
    best_ids, best_sum = None, -np.inf
    for comb in itertools.combinations(range(probs.size), k):
        s = float(probs[list(comb)].sum())
        if s > best_sum:
            best_ids, best_sum = set(comb), s
    return best_ids


def test_03_routing_oracles():
    rng = np.random.default_rng(0)
    trials = 0
    while trials < 1000:
        for n in range(1, 9):
            for k in range(1, n + 1):
                raw = rng.random(n)
                probs = raw / raw.sum()
                ids, weights = select_topk(Tensor(probs), k)
                assert set(ids) == _brute_force_topk(probs, k), (n, k, probs)
                expected = probs[ids] / probs[ids].sum()
                assert np.allclose(weights.data, expected, atol=1e-12)
                trials += 1
    # single-group hierarchy must reduce to dense top-k bit-identically
    for seed in range(50):
        r = np.random.default_rng(seed)
        router = RouterParams.init(6, 5, r)
        inter = RouterParams.zeros(6, 1)
        x = Tensor(r.normal(size=6))
        k = int(r.integers(1, 6))
        dense = route_sparse(router, x, k)
        hier = route_hierarchical(inter, [router], x, m=1, k_per_group=k)
        assert hier.selected_experts == dense.selected_experts
        _, hier_w = hier.per_group_selection[0]
        assert np.array_equal(hier_w.data, dense.selected_weights.data)
    print(f"criterion 3 PASS: {trials} top-k trials + 50 hierarchy reductions")


# -- criterion 4: sparsity and FLOPs -----------------------------------------

def test_04_sparsity_and_flops():
    rng = np.random.default_rng(0)
    sparse = MoELayer(MoELayerConfig(mode="sparse_topk", d=32, h=64,
                                     n_experts=8, k=2), rng)
    X = Tensor(rng.normal(size=(7, 32)))
    sparse.forward(X)
    assert sum(sparse.eval_counts()) == 2 * 7
    hier = MoELayer(MoELayerConfig(mode="hierarchical", d=32, h=64, n_groups=2,
                                   n_per_group=4, m=2, k_per_group=1), rng)
    hier.forward(X, modalities=[MOD_AV] * 7)
    assert sum(hier.eval_counts()) == 2 * 1 * 7
    ratio = flops_report(MoELayerConfig(mode="sparse_topk", d=32, h=64,
                                        n_experts=8, k=2), tokens=100)["ratio"]
    assert 2.0 < ratio < 2.3, ratio
    print(f"criterion 4 PASS: exact expert-call counts, activated/dense ratio {ratio:.3f}")


# -- criterion 5: corruption protocol ----------------------------------------

def test_05_corruption_protocol():
    for seed in range(10_000):
        plan = sample_plan_preset("train-default", 40, seed)
        plan = allocate_masks(plan, 0.3, 3, 0.2, 2, seed + 1)
        masked = np.union1d(plan.audio_mask, plan.video_mask)
        corrupted = np.union1d(plan.audio_corrupt, plan.video_corrupt)
        assert np.intersect1d(masked, corrupted).size == 0
    rng = np.random.default_rng(1)
    worst = 0.0
    for snr in SNR_GRID:
        for trial in range(5):
            frames = rng.normal(size=(64, 16)) + 0.5
            noise = rng.normal(size=(64, 16))
            mixed = mix_at_snr(frames, noise, snr, np.arange(64))
            resid = mixed - frames
            achieved = 10.0 * np.log10(np.mean(frames ** 2) / np.mean(resid ** 2))
            worst = max(worst, abs(achieved - snr))
    assert worst <= 0.05, worst
    print(f"criterion 5 PASS: 10000 disjoint plans, SNR within {worst:.4f} dB")


# -- criteria 6 and 7: specialization and noise response ---------------------

@pytest.fixture(scope="module")
def specialization_runs():
    biased = train(TrainConfig.from_dict({**SPECIALIZATION_BASE, "c_bias": 1e-2}),
                   tempfile.mkdtemp())
    control = train(TrainConfig.from_dict({**SPECIALIZATION_BASE, "c_bias": 0.0}),
                    tempfile.mkdtemp())
    return biased, control


def test_06_group_specialization(specialization_runs):
    biased, control = specialization_runs
    gen = TrainConfig.from_dict(SPECIALIZATION_BASE).generator
    aff = group_affinity(biased.model, gen, pairs=16, seed=5)
    assert aff["audio_group_on_audio_tokens"] >= 0.9, aff
    assert aff["video_group_on_video_tokens"] >= 0.9, aff
    ctrl = group_affinity(control.model, gen, pairs=16, seed=5)
    for key, value in ctrl.items():
        assert 0.35 <= value <= 0.65, (key, ctrl)
    print(f"criterion 6 PASS: biased affinity "
          f"({aff['audio_group_on_audio_tokens']:.3f}, "
          f"{aff['video_group_on_video_tokens']:.3f}), control "
          f"({ctrl['audio_group_on_audio_tokens']:.3f}, "
          f"{ctrl['video_group_on_video_tokens']:.3f})")


def test_07_noise_adaptive_routing(specialization_runs):
    biased, _ = specialization_runs
    gen = TrainConfig.from_dict(SPECIALIZATION_BASE).generator
    table = eval_group_load_vs_snr(biased.model, gen, SNR_GRID, pairs=12, seed=11)
    rho = spearman(table.column("snr"), table.column("mean_qV"))
    assert rho <= -0.8, (rho, table.column("mean_qV"))
    print(f"criterion 7 PASS: Spearman(snr, mean_qV) = {rho:.3f}")


# -- criterion 8: corrupted-representation tightening ------------------------

def test_08_representation_tightening():
    full_cfg = TrainConfig.from_dict({**UPTRAIN_BASE,
                                      "tasks": ("MASK", "ACP", "VCP")})
    ctrl_cfg = TrainConfig.from_dict({**UPTRAIN_BASE, "tasks": ("MASK",)})
    full = train(full_cfg, tempfile.mkdtemp())
    ctrl = train(ctrl_cfg, tempfile.mkdtemp())
    rep = repr_distance_report(ctrl.model, full.model, full_cfg.generator,
                               pairs=12, preset="eval-fullnoise", seed=3)
    assert rep["relative_change"] <= -0.30, rep

    combined = {**UPTRAIN_BASE, "regime": "combined_pipeline",
                "uptrain_steps": 400, "steps": 1500, "batch_size": 6}
    full_ter = train(TrainConfig.from_dict({**combined,
                                            "tasks": ("MASK", "ACP", "VCP")}),
                     tempfile.mkdtemp()).ter["eval-fullnoise"]
    ctrl_ter = train(TrainConfig.from_dict({**combined, "tasks": ("MASK",)}),
                     tempfile.mkdtemp()).ter["eval-fullnoise"]
    assert full_ter < ctrl_ter, (full_ter, ctrl_ter)
    print(f"criterion 8 PASS: distance change {rep['relative_change']:.1%}, "
          f"ter {full_ter:.3f} < control {ctrl_ter:.3f}")


# -- criterion 9: determinism ------------------------------------------------

def test_09_byte_identical_reruns(tmp_path):
    sup = TrainConfig.from_dict({**SPECIALIZATION_BASE, "steps": 40,
                                 "freeze_experts_steps": 40,
                                 "router_warmup_steps": 40, "c_bias": 1e-2})
    train(sup, str(tmp_path / "sup_a"))
    train(sup, str(tmp_path / "sup_b"))
    assert (tmp_path / "sup_a" / "steps.csv").read_bytes() == \
           (tmp_path / "sup_b" / "steps.csv").read_bytes()
    up = TrainConfig.from_dict({**UPTRAIN_BASE, "steps": 10})
    train(up, str(tmp_path / "up_a"))
    train(up, str(tmp_path / "up_b"))
    assert (tmp_path / "up_a" / "steps.csv").read_bytes() == \
           (tmp_path / "up_b" / "steps.csv").read_bytes()
    print("criterion 9 PASS: byte-identical steps.csv for both regimes")
