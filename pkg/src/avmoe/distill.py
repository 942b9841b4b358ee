"""Self-distillation with an exponential-moving-average teacher.

The teacher is a frozen copy of the student updated only by `ema_update`.
Targets come from running the teacher on clean inputs and averaging the last
few encoder blocks. The task losses predict those targets from masked or
corrupted student inputs, restricted to the masked or corrupted frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corruption import CorruptionPlan
from .model import Model
from .tensor import Tensor

MODE_AV = "AV"
MODE_A_ONLY = "A_only"
MODE_V_ONLY = "V_only"


class VariantError(ValueError):
    """Unknown corrupted-prediction task variant."""


@dataclass(frozen=True)
class TaskVariant:
    """(student input, teacher target, loss index set) for one task."""

    name: str
    input_mode: str   # which student input is fed: "av", "audio", "video"
    target_mode: str  # teacher target: MODE_AV / MODE_A_ONLY / MODE_V_ONLY
    index_set: str    # "union" (C^a u C^v), "audio" (C^a), "video" (C^v)


VARIANTS = {
    "AVCP": TaskVariant("AVCP", "av", MODE_AV, "union"),
    "mACP": TaskVariant("mACP", "av", MODE_A_ONLY, "video"),
    "mVCP": TaskVariant("mVCP", "av", MODE_V_ONLY, "audio"),
    "ACP": TaskVariant("ACP", "video", MODE_A_ONLY, "video"),
    "VCP": TaskVariant("VCP", "audio", MODE_V_ONLY, "audio"),
    # within-modal forms: target the same modality that was corrupted
    "ACP_within": TaskVariant("ACP_within", "audio", MODE_A_ONLY, "audio"),
    "VCP_within": TaskVariant("VCP_within", "video", MODE_V_ONLY, "video"),
}


@dataclass
class TaskWeights:
    acp: float = 1.0
    vcp: float = 1.0
    mask: float = 1.0
    mlm: float = 2.0

    def __post_init__(self):
        if min(self.acp, self.vcp, self.mask, self.mlm) < 0:
            raise ValueError("task weights must be nonnegative")


@dataclass
class DistillTargets:
    vectors: np.ndarray                 # [T x d], gradient-free
    centroid_ids: np.ndarray | None = None


@dataclass
class TeacherState:
    model: Model
    eta_start: float = 0.99
    eta_end: float = 0.999
    total_steps: int = 1
    current_step: int = 0

    def __post_init__(self):
        if not (0.0 <= self.eta_start <= 1.0 and 0.0 <= self.eta_end <= 1.0):
            raise ValueError("eta endpoints must lie in [0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def make_teacher(student: Model, total_steps: int,
                 eta_start: float = 0.99, eta_end: float = 0.999) -> TeacherState:
    """Snapshot the student as the initial teacher."""
    twin = Model(student.cfg, seed=0)
    twin.load_state_dict(student.state_dict())
    return TeacherState(model=twin, eta_start=eta_start, eta_end=eta_end,
                        total_steps=total_steps)


def eta_schedule(state: TeacherState) -> float:
    """Linear ramp from eta_start to eta_end, clamped at the endpoints."""
    frac = state.current_step / state.total_steps
    frac = min(max(frac, 0.0), 1.0)
    return state.eta_start + frac * (state.eta_end - state.eta_start)


def ema_update(teacher: TeacherState, student: Model, eta: float) -> TeacherState:
    """teacher <- eta * teacher + (1 - eta) * student, elementwise."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta {eta} outside [0, 1]")
    t_params = teacher.model.named_params()
    s_params = student.named_params()
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.data.shape != sp.data.shape:
            raise T.ShapeError(f"{name}: teacher {tp.data.shape} vs student {sp.data.shape}")
        tp.data[:] = eta * tp.data + (1.0 - eta) * sp.data
    return teacher


def _apply_mode(A: np.ndarray, V: np.ndarray, mode: str):
    if mode == MODE_AV:
        return A, V
    if mode == MODE_A_ONLY:
        return A, np.zeros_like(V)
    if mode == MODE_V_ONLY:
        return np.zeros_like(A), V
    raise ValueError(f"unknown modality mode {mode!r}")


def _standardize_frames(X: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = X.mean(axis=1, keepdims=True)
    var = X.var(axis=1, keepdims=True)
    return (X - mu) / np.sqrt(var + eps)


def teacher_targets(teacher: Model, A: np.ndarray, V: np.ndarray,
                    topk_blocks: int, mode: str = MODE_AV,
                    standardize: bool = True) -> DistillTargets:
    """Clean teacher features, averaged over the last topk_blocks encoder
    blocks; the absent modality is zeroed in unimodal modes."""
    if topk_blocks < 1:
        raise ValueError("topk_blocks must be >= 1")
    if topk_blocks > len(teacher.encoder_blocks):
        raise ValueError(f"topk_blocks {topk_blocks} exceeds encoder depth "
                         f"{len(teacher.encoder_blocks)}")
    a_in, v_in = _apply_mode(A, V, mode)
    with T.no_grad():
        _, per_block = teacher.encode(a_in, v_in)
    stack = np.stack([b.data for b in per_block[-topk_blocks:]])
    avg = stack.mean(axis=0)
    if standardize:
        avg = _standardize_frames(avg)
    return DistillTargets(vectors=avg)


def masked_prediction_loss(student_out: Tensor, targets: DistillTargets,
                           M) -> Tensor:
    """MSE between student features and targets over frames in M; 0 if empty."""
    idx = sorted(set(int(i) for i in M))
    if not idx:
        return Tensor(np.zeros(()))
    n = student_out.data.shape[0]
    if idx[0] < 0 or idx[-1] >= n:
        raise IndexError(f"mask index outside [0, {n})")
    picked = T.index_rows(student_out, idx)
    return T.mse(picked, Tensor(targets.vectors[idx]))


def _student_features(student: Model, variant: TaskVariant,
                      A_corr: np.ndarray, V_corr: np.ndarray,
                      head: Tensor | None) -> Tensor:
    if variant.input_mode == "av":
        a_in, v_in = A_corr, V_corr
    elif variant.input_mode == "audio":
        a_in, v_in = A_corr, np.zeros_like(V_corr)
    elif variant.input_mode == "video":
        a_in, v_in = np.zeros_like(A_corr), V_corr
    else:
        raise VariantError(f"unknown input mode {variant.input_mode!r}")
    feats, _ = student.encode(a_in, v_in)
    if head is not None:
        feats = T.matmul(feats, head)
    return feats


def corrupted_prediction_loss(variant: TaskVariant | str, student: Model,
                              teacher: Model, A: np.ndarray, A_corr: np.ndarray,
                              V: np.ndarray, V_corr: np.ndarray,
                              plan: CorruptionPlan, head: Tensor | None = None,
                              topk_blocks: int = 1,
                              standardize: bool = True) -> Tensor:
    """One corrupted-prediction task: student sees the variant's (possibly
    unimodal) corrupted input, targets are clean teacher features, and the
    MSE runs over the variant's corrupted index set."""
    if isinstance(variant, str):
        if variant not in VARIANTS:
            raise VariantError(f"unknown variant {variant!r}")
        variant = VARIANTS[variant]
    if variant.index_set == "union":
        idx = sorted(set(plan.audio_corrupt.tolist()) | set(plan.video_corrupt.tolist()))
    elif variant.index_set == "audio":
        idx = plan.audio_corrupt.tolist()
    else:
        idx = plan.video_corrupt.tolist()
    if not idx:
        return Tensor(np.zeros(()))
    targets = teacher_targets(teacher, A, V, topk_blocks, variant.target_mode,
                              standardize=standardize)
    feats = _student_features(student, variant, A_corr, V_corr, head)
    return masked_prediction_loss(feats, targets, idx)


def make_centroids(n_centroids: int, d: int, seed: int = 0) -> np.ndarray:
    """Fixed random orthonormal centroids (rows)."""
    if n_centroids < 2:
        raise ValueError("need at least 2 centroids")
    if n_centroids > d:
        raise ValueError(f"cannot fit {n_centroids} orthonormal rows in R^{d}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, n_centroids)))
    return q.T[:n_centroids]


def nearest_centroid_ids(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared-Euclidean nearest centroid per row, lowest id on ties."""
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def mlm_loss(student_features: Tensor, centroids: np.ndarray,
             teacher_features: np.ndarray, M, head: Tensor) -> Tensor:
    """Cross-entropy against the teacher feature's nearest centroid id, over
    the masked frames only."""
    if centroids.shape[0] < 2:
        raise ValueError("need at least 2 centroids")
    idx = sorted(set(int(i) for i in M))
    if not idx:
        return Tensor(np.zeros(()))
    target_ids = nearest_centroid_ids(teacher_features[idx], centroids)
    logits = T.matmul(T.index_rows(student_features, idx), head)
    return T.cross_entropy_rows(logits, [int(t) for t in target_ids])


def cav2vec_total_loss(acp: Tensor, vcp: Tensor, mask: Tensor, mlm: Tensor,
                       weights: TaskWeights | None = None) -> Tensor:
    weights = weights or TaskWeights()
    for name, v in (("acp", acp), ("vcp", vcp), ("mask", mask), ("mlm", mlm)):
        if not np.isfinite(v.data).all():
            raise T.NumericError(f"non-finite {name} loss component")
    return T.add(T.add(T.scale(acp, weights.acp), T.scale(vcp, weights.vcp)),
                 T.add(T.scale(mask, weights.mask), T.scale(mlm, weights.mlm)))


@dataclass
class DistillHeads:
    """Single-layer predictor heads, discarded after training."""

    heads: dict[str, Tensor] = field(default_factory=dict)
    mlm_head: Tensor | None = None

    @staticmethod
    def init(d: int, n_centroids: int, seed: int = 0,
             tasks: tuple[str, ...] = ("AVCP", "mACP", "mVCP", "ACP", "VCP", "MASK")):
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d)
        heads = {name: Tensor.param(scale * rng.normal(size=(d, d))) for name in tasks}
        mlm_head = Tensor.param(scale * rng.normal(size=(d, n_centroids)))
        return DistillHeads(heads=heads, mlm_head=mlm_head)

    def params(self) -> list[Tensor]:
        out = [self.heads[k] for k in sorted(self.heads)]
        if self.mlm_head is not None:
            out.append(self.mlm_head)
        return out
