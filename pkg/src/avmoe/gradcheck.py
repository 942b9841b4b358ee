"""Finite-difference verification harness for every differentiable exported
operation, grouped by module for selective runs from the CLI.

Each case owns a builder that, given a seed, returns (f, x) where f maps a
Tensor to a scalar Tensor; `run` reports the max relative error per case
across seeds. Gradients are checked with respect to inputs, weights, and
probability paths (P/Q) alike by making the probe tensor play those roles.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .moe_layer import ExpertFFN, MoELayer, MoELayerConfig
from .moe_losses import (
    load_balancing_from_stats, load_balancing_loss, load_biasing_loss,
    router_z_loss, total_aux_loss,
)
from .routing import (
    MOD_AUDIO, MOD_AV, MOD_VIDEO, RouterParams, dispatch_stats,
    route_dense_batch, route_hierarchical, route_sparse,
)
from .tensor import Tensor, grad_check

DEFAULT_SEEDS = 20
TOLERANCE = 1e-4
EPS = 1e-4


def _rng(seed):
    return np.random.default_rng(seed)


def _vec(seed, n=6):
    return Tensor(_rng(seed).normal(size=n))


def _mat(seed, r=3, c=4):
    return Tensor(_rng(seed).normal(size=(r, c)))


# -- tensor primitive cases ---------------------------------------------------

def _case_add(seed):
    b = _mat(seed + 1000)
    return lambda t: T.tsum(T.add(t, b)), _mat(seed)


def _case_sub(seed):
    b = _mat(seed + 1000)
    return lambda t: T.tsum(T.mul(T.sub(t, b), T.sub(t, b))), _mat(seed)


def _case_mul(seed):
    b = _mat(seed + 1000)
    return lambda t: T.tsum(T.mul(t, b)), _mat(seed)


def _case_div(seed):
    b = Tensor(np.abs(_rng(seed + 1000).normal(size=(3, 4))) + 1.0)
    return lambda t: T.tsum(T.div(t, b)), _mat(seed)


def _case_scale(seed):
    return lambda t: T.tsum(T.scale(t, -1.7)), _mat(seed)


def _case_matmul(seed):
    b = _mat(seed + 1000, 4, 3)
    return lambda t: T.tsum(T.matmul(t, b)), _mat(seed)


def _case_transpose(seed):
    b = _mat(seed + 1000, 4, 3)
    return lambda t: T.tsum(T.mul(T.transpose(t), b)), _mat(seed)


def _case_reshape(seed):
    return lambda t: T.tsum(T.mul(T.reshape(t, (2, 6)), T.reshape(t, (2, 6)))), _mat(seed)


def _case_tmean(seed):
    return lambda t: T.tmean(T.mul(t, t)), _mat(seed)


def _case_mean_axis0(seed):
    w = _vec(seed + 1000, 4)
    return lambda t: T.tsum(T.mul(T.mean_axis0(t), w)), _mat(seed)


def _case_tanh(seed):
    return lambda t: T.tsum(T.tanh(t)), _mat(seed)


def _case_gelu(seed):
    return lambda t: T.tsum(T.gelu(t)), _mat(seed)


def _case_relu(seed):
    # keep coordinates away from the kink at 0
    x = _rng(seed).normal(size=(3, 4))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    return lambda t: T.tsum(T.relu(t)), Tensor(x)


def _case_softmax(seed):
    w = _vec(seed + 1000)
    return lambda t: T.tsum(T.mul(T.softmax(t), w)), _vec(seed)


def _case_softmax_rows(seed):
    w = _mat(seed + 1000)
    return lambda t: T.tsum(T.mul(T.softmax(t), w)), _mat(seed)


def _case_logsumexp(seed):
    return lambda t: T.tsum(T.logsumexp(t)), _mat(seed)


def _case_mse(seed):
    target = _mat(seed + 1000)
    return lambda t: T.mse(t, target), _mat(seed)


def _case_cross_entropy(seed):
    tid = int(_rng(seed + 1000).integers(4))
    return lambda t: T.cross_entropy_with_logits(t, tid), _vec(seed, 4)


def _case_cross_entropy_rows(seed):
    ids = [int(i) for i in _rng(seed + 1000).integers(0, 4, size=3)]
    return lambda t: T.cross_entropy_rows(t, ids), _mat(seed)


def _case_index_rows(seed):
    return lambda t: T.tsum(T.mul(T.index_rows(t, [0, 2, 0]),
                                  T.index_rows(t, [0, 2, 0]))), _mat(seed)


def _case_take(seed):
    return lambda t: T.tsum(T.mul(T.take(t, [1, 3, 1]), T.take(t, [0, 2, 2]))), _vec(seed)


def _case_scatter_rows(seed):
    w = _mat(seed + 1000, 5, 4)
    return lambda t: T.tsum(T.mul(T.scatter_rows(t, [0, 3, 4], 5), w)), _mat(seed)


def _case_concat_rows(seed):
    b = _mat(seed + 1000, 2, 4)
    return lambda t: T.tmean(T.mul(T.concat_rows([t, b]),
                                   T.concat_rows([t, b]))), _mat(seed)


def _case_concat_cols(seed):
    b = _mat(seed + 1000, 3, 2)
    return lambda t: T.tmean(T.mul(T.concat_cols([t, b]),
                                   T.concat_cols([t, b]))), _mat(seed)


def _case_stack_rows(seed):
    def f(t):
        rows = [T.reshape(T.index_rows(t, [i]), (4,)) for i in range(3)]
        stacked = T.stack_rows(rows)
        return T.tsum(T.mul(stacked, stacked))

    return f, _mat(seed)


def _case_standardize(seed):
    w = _mat(seed + 1000)
    return lambda t: T.tsum(T.mul(T.standardize_rows(t), w)), _mat(seed)


def _case_attention(seed):
    rng = _rng(seed + 1000)
    K = Tensor(rng.normal(size=(5, 4)))
    V = Tensor(rng.normal(size=(5, 4)))
    return lambda t: T.tsum(T.attention(t, K, V)), _mat(seed)


def _case_attention_keys(seed):
    rng = _rng(seed + 1000)
    Q = Tensor(rng.normal(size=(3, 4)))
    V = Tensor(rng.normal(size=(5, 4)))
    return lambda t: T.tsum(T.attention(Q, t, V)), _mat(seed, 5, 4)


# -- MoE layer cases ----------------------------------------------------------

def _case_expert_forward(seed):
    expert = ExpertFFN.init(4, 6, _rng(seed + 1000))
    return lambda t: T.tsum(expert.forward(t)), _mat(seed)


def _case_expert_weights(seed):
    rng = _rng(seed + 1000)
    expert = ExpertFFN.init(4, 6, rng)
    x = Tensor(rng.normal(size=(3, 4)))

    def f(t):
        expert.W1 = t
        return T.tsum(expert.forward(x))

    return f, _mat(seed, 4, 6)


def _moe_layer(seed, mode):
    cfg = MoELayerConfig(mode=mode, d=4, h=6, n_experts=4, k=2,
                         n_groups=2, n_per_group=2, m=2, k_per_group=1)
    return MoELayer(cfg, _rng(seed + 1000))


def _case_moe_forward_sparse(seed):
    layer = _moe_layer(seed, "sparse_topk")
    return lambda t: T.tsum(layer.forward(t)[0]), _mat(seed)


def _case_moe_forward_hier(seed):
    layer = _moe_layer(seed, "hierarchical")
    tags = [MOD_AUDIO, MOD_VIDEO, MOD_AV]
    return lambda t: T.tsum(layer.forward(t, modalities=tags)[0]), _mat(seed)


def _case_moe_router_weights(seed):
    layer = _moe_layer(seed, "sparse_topk")
    x = Tensor(_rng(seed + 2000).normal(size=(3, 4)))

    def f(t):
        layer.router.weight = t
        return T.tsum(layer.forward(x)[0])

    return f, _mat(seed, 4, 4)


# -- loss cases with gradient paths through P/Q -------------------------------

def _sparse_stats(layer, X):
    decisions = [route_sparse(layer.router, _row_of(X, i), layer.cfg.k)
                 for i in range(X.data.shape[0])]
    return dispatch_stats(decisions, [MOD_AV] * X.data.shape[0])


def _row_of(X, i):
    return T.reshape(T.index_rows(X, [i]), (X.data.shape[1],))


def _case_balance_through_P(seed):
    layer = _moe_layer(seed, "sparse_topk")
    return lambda t: load_balancing_from_stats(_sparse_stats(layer, t)), _mat(seed)


def _case_balance_direct(seed):
    f = np.abs(_rng(seed + 1000).normal(size=4))
    f /= f.sum()
    return lambda t: load_balancing_loss(f, T.softmax(t)), _vec(seed, 4)


def _hier_stats(layer, X, tags):
    decisions = [layer.route(_row_of(X, i), tags[i])
                 for i in range(X.data.shape[0])]
    return dispatch_stats(decisions, tags)


def _case_bias_through_Q(seed):
    layer = _moe_layer(seed, "hierarchical")
    tags = [MOD_AUDIO, MOD_VIDEO, MOD_AV]
    return lambda t: load_biasing_loss(_hier_stats(layer, t, tags)), _mat(seed)


def _case_bias_router_weights(seed):
    layer = _moe_layer(seed, "hierarchical")
    x = Tensor(_rng(seed + 2000).normal(size=(4, 4)))
    tags = [MOD_AUDIO, MOD_VIDEO, MOD_AUDIO, MOD_VIDEO]

    def f(t):
        layer.inter_router.weight = t
        return load_biasing_loss(_hier_stats(layer, x, tags))

    return f, _mat(seed, 4, 2)


def _case_z_loss(seed):
    return lambda t: router_z_loss(t), _mat(seed)


def _case_z_through_router(seed):
    router = RouterParams.init(4, 4, _rng(seed + 1000))
    return lambda t: router_z_loss(route_dense_batch(router, t)[0]), _mat(seed)


def _case_total_aux(seed):
    rng = _rng(seed + 1000)
    f = np.abs(rng.normal(size=4))
    f /= f.sum()

    def f_total(t):
        probs = T.softmax(t)
        ce = T.tmean(T.mul(t, t))
        balance = load_balancing_loss(f, probs)
        z = router_z_loss(T.reshape(t, (1, 4)))
        return total_aux_loss(ce, balance, Tensor(0.0), z).total

    return f_total, _vec(seed, 4)


CASES = {
    "tensor": [
        ("add", _case_add), ("sub", _case_sub), ("mul", _case_mul),
        ("div", _case_div), ("scale", _case_scale), ("matmul", _case_matmul),
        ("transpose", _case_transpose), ("reshape", _case_reshape),
        ("tmean", _case_tmean), ("mean_axis0", _case_mean_axis0),
        ("tanh", _case_tanh), ("gelu", _case_gelu), ("relu", _case_relu),
        ("softmax", _case_softmax), ("softmax_rows", _case_softmax_rows),
        ("logsumexp", _case_logsumexp), ("mse", _case_mse),
        ("cross_entropy", _case_cross_entropy),
        ("cross_entropy_rows", _case_cross_entropy_rows),
        ("index_rows", _case_index_rows), ("take", _case_take),
        ("scatter_rows", _case_scatter_rows),
        ("concat_rows", _case_concat_rows), ("concat_cols", _case_concat_cols),
        ("stack_rows", _case_stack_rows),
        ("standardize_rows", _case_standardize),
        ("attention", _case_attention), ("attention_keys", _case_attention_keys),
    ],
    "moe": [
        ("expert_forward", _case_expert_forward),
        ("expert_forward_weights", _case_expert_weights),
        ("moe_forward_sparse", _case_moe_forward_sparse),
        ("moe_forward_hierarchical", _case_moe_forward_hier),
        ("moe_router_weights", _case_moe_router_weights),
    ],
    "losses": [
        ("load_balancing_through_P", _case_balance_through_P),
        ("load_balancing_direct", _case_balance_direct),
        ("load_biasing_through_Q", _case_bias_through_Q),
        ("load_biasing_router_weights", _case_bias_router_weights),
        ("router_z_loss", _case_z_loss),
        ("router_z_through_router", _case_z_through_router),
        ("total_aux_loss", _case_total_aux),
    ],
}


def run(module: str | None = None, seeds: int = DEFAULT_SEEDS,
        eps: float = EPS) -> dict[str, float]:
    """Max relative gradient error per case name over ``seeds`` seeds."""
    if module is not None and module not in CASES:
        raise KeyError(f"unknown gradcheck module {module!r}; "
                       f"choose from {sorted(CASES)}")
    selected = [module] if module is not None else sorted(CASES)
    results: dict[str, float] = {}
    for mod in selected:
        for name, builder in CASES[mod]:
            worst = 0.0
            for seed in range(seeds):
                f, x = builder(seed)
                worst = max(worst, grad_check(f, x, eps=eps))
            results[f"{mod}.{name}"] = worst
    return results
