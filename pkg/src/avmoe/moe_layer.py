"""Expert feed-forward networks and the dispatch/combine layer for dense,
sparse top-k, hard-routed, and hierarchical modes, plus a coarse FLOPs
accounting (multiply-adds counted as 2 ops, biases/activations ignored).

Dispatch is gather -> compute -> scatter per expert: only the experts a token
selected are ever evaluated, and an instrumented per-token evaluation counter
makes that checkable."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .routing import (
    AUDIO_GROUP, MOD_AV, RouterParams, RoutingConfigError, RoutingDecision,
    dispatch_stats, route_dense_batch, route_hard, route_hierarchical,
    route_sparse, topk_ids,
)
from .tensor import Tensor

# documentation constants from published large-scale measurements (MFLOPs per
# FFN position, 500-frame sequence); recorded for context, never asserted
REFERENCE_FFN_MFLOPS = {"dense_base": 472, "moe_base": 921,
                        "dense_large": 839, "moe_large": 1630}


@dataclass
class ExpertFFN:
    """Two-layer bottleneck FFN: W2^T act(W1^T x + b1) + b2."""

    W1: Tensor  # [d x h]
    b1: Tensor  # [h]
    W2: Tensor  # [h x d]
    b2: Tensor  # [d]
    activation: str = "gelu"
    eval_count: int = 0  # token evaluations, for the sparsity contract

    @staticmethod
    def init(d: int, h: int, rng, activation: str = "gelu", scale: float = 0.1) -> "ExpertFFN":
        return ExpertFFN(
            W1=Tensor.param(scale * rng.normal(size=(d, h))),
            b1=Tensor.param(np.zeros(h)),
            W2=Tensor.param(scale * rng.normal(size=(h, d))),
            b2=Tensor.param(np.zeros(d)),
            activation=activation,
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.W1.data.shape[0]:
            raise T.ShapeError(
                f"expert input {x.data.shape} incompatible with W1 {self.W1.data.shape}")
        self.eval_count += x.data.shape[0] if x.data.ndim == 2 else 1
        act = T.ACTIVATIONS[self.activation]
        hidden = act(T.add(T.matmul(x, self.W1), self.b1))
        return T.add(T.matmul(hidden, self.W2), self.b2)

    def params(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class MoELayerConfig:
    mode: str = "dense_ffn"  # dense_ffn | sparse_topk | hard | hierarchical
    d: int = 32
    h: int = 64
    n_experts: int = 8       # sparse_topk: total experts
    k: int = 2               # sparse_topk / hard: experts per token
    n_groups: int = 2        # hard / hierarchical
    n_per_group: int = 4
    m: int = 2               # hierarchical: groups per token
    k_per_group: int = 1     # hierarchical: experts per selected group
    activation: str = "gelu"

    def __post_init__(self):
        if self.mode not in ("dense_ffn", "sparse_topk", "hard", "hierarchical"):
            raise RoutingConfigError(f"unknown MoE mode {self.mode!r}")
        if min(self.d, self.h, self.n_experts, self.k, self.n_groups,
               self.n_per_group, self.m, self.k_per_group) < 1:
            raise ValueError("all MoE dimensions must be positive")


class MoELayer:
    """One FFN position of the decoder in any of the four modes."""

    def __init__(self, cfg: MoELayerConfig, rng):
        self.cfg = cfg
        self.experts: list[ExpertFFN] = []
        self.inter_router: RouterParams | None = None
        self.intra_routers: list[RouterParams] = []
        self.router: RouterParams | None = None
        d, h = cfg.d, cfg.h
        if cfg.mode == "dense_ffn":
            self.experts = [ExpertFFN.init(d, h, rng, cfg.activation)]
        elif cfg.mode == "sparse_topk":
            self.experts = [ExpertFFN.init(d, h, rng, cfg.activation)
                            for _ in range(cfg.n_experts)]
            self.router = RouterParams.init(d, cfg.n_experts, rng)
        elif cfg.mode == "hard":
            self.experts = [ExpertFFN.init(d, h, rng, cfg.activation)
                            for _ in range(cfg.n_groups * cfg.n_per_group)]
            self.intra_routers = [RouterParams.init(d, cfg.n_per_group, rng)
                                  for _ in range(cfg.n_groups)]
        else:  # hierarchical
            self.experts = [ExpertFFN.init(d, h, rng, cfg.activation)
                            for _ in range(cfg.n_groups * cfg.n_per_group)]
            self.inter_router = RouterParams.zeros(d, cfg.n_groups)
            self.intra_routers = [RouterParams.init(d, cfg.n_per_group, rng)
                                  for _ in range(cfg.n_groups)]
        # running mean of routed tokens; the inter router sees centered inputs
        # so that group logits react to how a token differs from the typical
        # token rather than to the shared mean component
        self.inter_center = np.zeros(d)
        self.center_momentum = 0.99

    # -- parameters -----------------------------------------------------------

    def params(self) -> list[Tensor]:
        out = []
        for e in self.experts:
            out.extend(e.params())
        if self.router is not None:
            out.append(self.router.weight)
        if self.inter_router is not None:
            out.append(self.inter_router.weight)
        for r in self.intra_routers:
            out.append(r.weight)
        return out

    def reset_eval_counts(self):
        for e in self.experts:
            e.eval_count = 0

    def eval_counts(self) -> list[int]:
        return [e.eval_count for e in self.experts]

    # -- routing --------------------------------------------------------------

    def route(self, x: Tensor, modality: str = MOD_AV) -> RoutingDecision:
        cfg = self.cfg
        if cfg.mode == "sparse_topk":
            return route_sparse(self.router, x, cfg.k)
        if cfg.mode == "hard":
            return route_hard(modality, tuple(self.intra_routers), x, cfg.k)
        if cfg.mode == "hierarchical":
            x_inter = T.sub(x, Tensor(self.inter_center))
            return route_hierarchical(self.inter_router, self.intra_routers, x,
                                      cfg.m, cfg.k_per_group, x_inter=x_inter)
        raise RoutingConfigError("dense_ffn mode has no routing decision")

    # -- forward --------------------------------------------------------------

    def forward(self, X: Tensor, modalities: list[str] | None = None):
        """Process a [B x d] token batch.

        Returns (outputs [B x d], decisions, DispatchStats); stats is None in
        dense mode."""
        B = X.data.shape[0]
        cfg = self.cfg
        if cfg.mode == "dense_ffn":
            return self.experts[0].forward(X), [], None
        if modalities is None:
            modalities = [MOD_AV] * B
        if cfg.mode == "hierarchical" and T.grad_enabled():
            mom = self.center_momentum
            self.inter_center = mom * self.inter_center + (1 - mom) * X.data.mean(axis=0)
        decisions = [self.route(_row(X, i), modalities[i]) for i in range(B)]
        out = self.combine(X, decisions)
        stats = dispatch_stats(decisions, modalities)
        return out, decisions, stats

    def combine(self, X: Tensor, decisions: list[RoutingDecision]) -> Tensor:
        """y_t = weighted sum of selected expert outputs per token."""
        cfg = self.cfg
        B = X.data.shape[0]
        if cfg.mode == "dense_ffn":
            return self.experts[0].forward(X)
        if decisions and decisions[0].mode != cfg.mode and not (
                decisions[0].mode == "sparse_topk" and cfg.mode == "sparse_topk"):
            raise RoutingConfigError(
                f"routing mode {decisions[0].mode!r} does not match layer mode {cfg.mode!r}")

        # (expert -> rows to process, each with a scalar weight Tensor)
        jobs: dict[int, list[tuple[int, Tensor]]] = {}
        for t, d in enumerate(decisions):
            if d.mode == "sparse_topk":
                for slot, e in enumerate(d.selected_experts):
                    w = T.take(d.selected_weights, [slot])
                    jobs.setdefault(e, []).append((t, w))
            elif d.mode == "hard":
                if len(d.selected_groups) == 1:
                    gid = d.selected_groups[0]
                    ids, weights = d.per_group_selection[gid]
                    for slot, e in enumerate(ids):
                        jobs.setdefault(e, []).append((t, T.take(weights, [slot])))
                else:  # audiovisual: equal-weight mean of the two group outputs
                    for gid in d.selected_groups:
                        ids, weights = d.per_group_selection[gid]
                        for slot, e in enumerate(ids):
                            w = T.scale(T.take(weights, [slot]), 0.5)
                            jobs.setdefault(e, []).append((t, w))
            else:  # hierarchical
                for pos, gid in enumerate(d.selected_groups):
                    ids, weights = d.per_group_selection[gid]
                    qw = T.take(d.group_weights, [pos])
                    for slot, e in enumerate(ids):
                        w = T.mul(qw, T.take(weights, [slot]))
                        jobs.setdefault(e, []).append((t, w))

        total = None
        for e_id in sorted(jobs):
            rows_w = jobs[e_id]
            token_ids = [t for t, _ in rows_w]
            weights = T.reshape(T.concat_rows([T.reshape(w, (1, 1)) for _, w in rows_w]),
                                (len(rows_w), 1))
            rows = T.index_rows(X, token_ids)
            y = T.mul(self.experts[e_id].forward(rows), weights)
            scattered = T.scatter_rows(y, token_ids, B)
            total = scattered if total is None else T.add(total, scattered)
        if total is None:
            total = Tensor(np.zeros_like(X.data))
        return total

    def router_logit_rows(self, X: Tensor) -> list[Tensor]:
        """Expert-router logit matrices for this batch (z-loss inputs).

        The z-loss is defined over the expert logits; the inter-modal router
        of the hierarchical mode is deliberately left out."""
        rows = []
        if self.router is not None:
            rows.append(route_dense_batch(self.router, X)[0])
        for r in self.intra_routers:
            rows.append(route_dense_batch(r, X)[0])
        return rows


def _row(X: Tensor, i: int) -> Tensor:
    return T.reshape(T.index_rows(X, [i]), (X.data.shape[1],))


def flops_report(cfg: MoELayerConfig, tokens: int) -> dict:
    """Multiply-add FLOPs (2 ops each) for one layer over ``tokens`` tokens."""
    if tokens < 1:
        raise ValueError("tokens must be positive")
    per_expert = 2 * cfg.d * cfg.h * 2  # two matmuls
    dense = per_expert * tokens
    if cfg.mode == "dense_ffn":
        activated = dense
    elif cfg.mode == "sparse_topk":
        activated = cfg.k * per_expert * tokens + 2 * cfg.d * cfg.n_experts * tokens
    elif cfg.mode == "hard":
        activated = cfg.k * per_expert * tokens + 2 * cfg.d * cfg.n_per_group * tokens
    else:  # hierarchical: all intra routers plus the inter router run per token
        router = 2 * cfg.d * cfg.n_groups + cfg.n_groups * 2 * cfg.d * cfg.n_per_group
        activated = cfg.m * cfg.k_per_group * per_expert * tokens + router * tokens
    total_param_flops = per_expert * len_experts(cfg) * tokens
    return {
        "activated_flops": int(activated),
        "total_param_flops": int(total_param_flops),
        "dense_ffn_flops": int(dense),
        "ratio": activated / dense,
    }


def len_experts(cfg: MoELayerConfig) -> int:
    if cfg.mode == "dense_ffn":
        return 1
    if cfg.mode == "sparse_topk":
        return cfg.n_experts
    return cfg.n_groups * cfg.n_per_group
