"""Router probability computation and expert/group selection for dense top-k,
hard-routed, and hierarchical (two-level) modes, plus batch dispatch
statistics.

Conventions:
- tie-breaking everywhere is lowest index first;
- expert ids are flat across groups (group g, local j -> g * n_per_group + j);
- top-1 frequencies (f, g) are non-differentiable statistics; gradients flow
  only through mean probabilities (P, Q).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MOD_AUDIO = "audio"
MOD_VIDEO = "video"
MOD_AV = "av"
MODALITIES = (MOD_AUDIO, MOD_VIDEO, MOD_AV)

AUDIO_GROUP = 0  # first group handles audio, second video
VIDEO_GROUP = 1


class RoutingConfigError(ValueError):
    """Routing request inconsistent with the configured mode."""


@dataclass
class RouterParams:
    """One linear routing map; one weight column per expert (or per group)."""

    weight: Tensor  # [d x n_outputs]

    @staticmethod
    def zeros(d: int, n: int) -> "RouterParams":
        return RouterParams(Tensor.param(np.zeros((d, n))))

    @staticmethod
    def init(d: int, n: int, rng, scale: float = 0.02) -> "RouterParams":
        return RouterParams(Tensor.param(scale * rng.normal(size=(d, n))))

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[1]


@dataclass
class RoutingDecision:
    """Per-token routing outcome.

    ``expert_probs`` is the full router distribution (one per group in grouped
    modes). ``selected_weights`` sums to 1; in grouped modes
    ``per_group_selection`` maps selected group -> (flat expert ids, weights
    within the group, also summing to 1) and ``group_weights`` carries the
    normalized inter-router weights.
    """

    mode: str
    expert_probs: list[Tensor]            # one [n_g] prob vector per group
    group_sizes: list[int]
    selected_experts: list[int] = field(default_factory=list)   # flat ids
    selected_weights: Tensor | None = None
    group_probs: Tensor | None = None     # [G]
    selected_groups: list[int] = field(default_factory=list)
    group_weights: Tensor | None = None   # normalized over selected groups
    per_group_selection: dict = field(default_factory=dict)

    @property
    def top1_expert(self) -> int:
        """Flat id of the overall highest-probability expert (lowest id wins)."""
        best_id, best_p = -1, -np.inf
        offset = 0
        for probs, n in zip(self.expert_probs, self.group_sizes):
            local = int(np.argmax(probs.data))
            if probs.data[local] > best_p:
                best_id, best_p = offset + local, float(probs.data[local])
            offset += n
        return best_id


def route_dense(router: RouterParams, x: Tensor) -> Tensor:
    """softmax(W^T x) over experts for a single token vector."""
    if x.data.ndim != 1 or x.data.shape[0] != router.weight.shape[0]:
        raise ShapeError(
            f"token shape {x.data.shape} incompatible with router {router.weight.shape}")
    return T.softmax(T.matmul(x, router.weight))


def route_dense_batch(router: RouterParams, X: Tensor) -> tuple[Tensor, Tensor]:
    """(logits, probs) for a [B x d] batch."""
    logits = T.matmul(X, router.weight)
    return logits, T.softmax(logits)


def topk_ids(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest entries, ties broken toward lower indices."""
    order = np.argsort(-probs, kind="stable")
    return [int(i) for i in order[:k]]


def select_topk(probs: Tensor, k: int) -> tuple[list[int], Tensor]:
    """Top-k ids plus renormalized weights over the selection."""
    n = probs.data.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    ids = topk_ids(probs.data, k)
    picked = T.take(probs, ids)
    total = T.tsum(picked)
    return ids, T.div(picked, total)


def route_sparse(router: RouterParams, x: Tensor, k: int) -> RoutingDecision:
    """Dense softmax routing followed by top-k selection (single group)."""
    probs = route_dense(router, x)
    ids, weights = select_topk(probs, k)
    return RoutingDecision(mode="sparse_topk", expert_probs=[probs],
                           group_sizes=[router.n_outputs],
                           selected_experts=ids, selected_weights=weights)


def route_hard(modality: str, routers: tuple[RouterParams, RouterParams],
               x: Tensor, k: int) -> RoutingDecision:
    """Manual group activation: unimodal tokens use only their group's
    experts; audio-visual tokens take the top-(k/2) of each group."""
    if modality not in MODALITIES:
        raise RoutingConfigError(f"unknown modality {modality!r}")
    router_a, router_v = routers
    n_a, n_v = router_a.n_outputs, router_v.n_outputs
    probs_a = route_dense(router_a, x)
    probs_v = route_dense(router_v, x)
    decision = RoutingDecision(mode="hard", expert_probs=[probs_a, probs_v],
                               group_sizes=[n_a, n_v])
    if modality == MOD_AUDIO:
        ids, weights = select_topk(probs_a, k)
        decision.selected_experts = ids
        decision.selected_weights = weights
        decision.selected_groups = [AUDIO_GROUP]
        decision.per_group_selection = {AUDIO_GROUP: (ids, weights)}
    elif modality == MOD_VIDEO:
        ids, weights = select_topk(probs_v, k)
        decision.selected_experts = [n_a + i for i in ids]
        decision.selected_weights = weights
        decision.selected_groups = [VIDEO_GROUP]
        decision.per_group_selection = {VIDEO_GROUP: (decision.selected_experts, weights)}
    else:
        if k % 2 != 0:
            raise RoutingConfigError(f"audiovisual hard routing needs even k, got {k}")
        ids_a, w_a = select_topk(probs_a, k // 2)
        ids_v, w_v = select_topk(probs_v, k // 2)
        flat_v = [n_a + i for i in ids_v]
        decision.selected_experts = ids_a + flat_v
        decision.selected_groups = [AUDIO_GROUP, VIDEO_GROUP]
        decision.per_group_selection = {AUDIO_GROUP: (ids_a, w_a),
                                        VIDEO_GROUP: (flat_v, w_v)}
    return decision


def route_hierarchical(inter: RouterParams, intras: list[RouterParams], x: Tensor,
                       m: int, k_per_group: int = 1,
                       x_inter: Tensor | None = None) -> RoutingDecision:
    """Inter-modal router picks top-m groups; within each selected group the
    intra router picks the argmax expert (k_per_group == 1, Kronecker-delta
    weights carrying no gradient) or a renormalized top-k_per_group.

    ``x_inter`` optionally substitutes the inter router's input (for example
    a mean-centered view of ``x``); intra routers always see ``x``."""
    G = len(intras)
    if m > G:
        raise RoutingConfigError(f"m={m} exceeds {G} groups")
    q = route_dense(inter, x if x_inter is None else x_inter)
    group_ids = topk_ids(q.data, m)
    picked = T.take(q, group_ids)
    q_tilde = T.div(picked, T.tsum(picked))
    group_sizes = [r.n_outputs for r in intras]
    offsets = np.concatenate(([0], np.cumsum(group_sizes)))
    expert_probs = [route_dense(r, x) for r in intras]
    per_group = {}
    flat_selected = []
    for g in group_ids:
        if k_per_group == 1:
            local = int(np.argmax(expert_probs[g].data))
            flat = int(offsets[g]) + local
            per_group[g] = ([flat], Tensor(np.ones(1)))  # delta weight, no gradient
            flat_selected.append(flat)
        else:
            ids, weights = select_topk(expert_probs[g], k_per_group)
            flats = [int(offsets[g]) + i for i in ids]
            per_group[g] = (flats, weights)
            flat_selected.extend(flats)
    return RoutingDecision(mode="hierarchical", expert_probs=expert_probs,
                           group_sizes=group_sizes, selected_experts=flat_selected,
                           group_probs=q, selected_groups=group_ids,
                           group_weights=q_tilde, per_group_selection=per_group)


@dataclass
class DispatchStats:
    """Batch-level load statistics.

    ``expert_f``/``expert_P`` hold one vector per group (a single entry in
    flat modes); each f vector sums to 1 when any token was seen. ``g``/``Q``
    hold group-level top-1 frequencies and mean probabilities keyed by
    modality subset ('audio', 'video', 'av'); subsets absent from the batch
    are omitted. ``counts`` gives tokens per subset.
    """

    expert_f: list[np.ndarray]
    expert_P: list[Tensor]
    g: dict[str, np.ndarray]
    Q: dict[str, Tensor]
    counts: dict[str, int]
    n_groups: int


def dispatch_stats(decisions: list[RoutingDecision], modalities: list[str]) -> DispatchStats:
    """Aggregate f/P per expert group and g/Q per modality subset."""
    if not decisions:
        raise ValueError("dispatch_stats needs a non-empty batch")
    if len(modalities) != len(decisions):
        raise ValueError("one modality tag per decision required")
    n_tok = len(decisions)
    group_sizes = decisions[0].group_sizes
    n_groups = len(group_sizes)

    expert_f = []
    expert_P = []
    for gi, n in enumerate(group_sizes):
        ones = np.zeros(n)
        for d in decisions:
            ones[int(np.argmax(d.expert_probs[gi].data))] += 1.0
        expert_f.append(ones / n_tok)
        stacked = T.stack_rows([d.expert_probs[gi] for d in decisions])
        expert_P.append(T.mean_axis0(stacked))

    g: dict[str, np.ndarray] = {}
    Q: dict[str, Tensor] = {}
    counts = {key: 0 for key in MODALITIES}
    if decisions[0].group_probs is not None:
        by_subset: dict[str, list[RoutingDecision]] = {}
        for d, tag in zip(decisions, modalities):
            by_subset.setdefault(tag, []).append(d)
        for tag, ds in by_subset.items():
            counts[tag] = len(ds)
            freq = np.zeros(n_groups)
            for d in ds:
                freq[int(np.argmax(d.group_probs.data))] += 1.0
            g[tag] = freq / len(ds)
            Q[tag] = T.mean_axis0(T.stack_rows([d.group_probs for d in ds]))
    else:
        for tag in modalities:
            counts[tag] += 1
    return DispatchStats(expert_f=expert_f, expert_P=expert_P, g=g, Q=Q,
                         counts=counts, n_groups=n_groups)
