"""Desk-scale multimodal encoder/decoder.

Encoder: per-modality linear projectors, concatenation fusion, then blocks of
single-head self-attention + FFN with residuals and per-feature
standardization. Decoder: causal self-attention, cross-attention to the
encoder features, and an FFN position that is either a plain FFN or a MoE
layer. An absent modality is passed as all-zero frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .moe_layer import ExpertFFN, MoELayer, MoELayerConfig
from .routing import MOD_AV
from .tensor import Tensor

CHECKPOINT_FORMAT = "avmoe-checkpoint-v1"


@dataclass
class ModelConfig:
    dim_audio: int = 16
    dim_video: int = 16
    d: int = 32
    h: int = 64
    n_enc: int = 2
    n_dec: int = 2
    vocab: int = 16
    topk_blocks: int = 2
    max_len: int = 160
    moe: MoELayerConfig = field(default_factory=lambda: MoELayerConfig(mode="dense_ffn"))

    def __post_init__(self):
        if min(self.dim_audio, self.dim_video, self.d, self.h, self.n_enc,
               self.n_dec, self.vocab, self.topk_blocks, self.max_len) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.topk_blocks > self.n_enc:
            raise ValueError("topk_blocks cannot exceed encoder depth")
        # keep the MoE layer dims in lockstep with the model width
        self.moe.d = self.d
        self.moe.h = self.h

    @property
    def bos_id(self) -> int:
        return self.vocab

    @property
    def eos_id(self) -> int:
        return self.vocab + 1

    @property
    def n_classes(self) -> int:
        return self.vocab + 2


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _linear(rng, n_in, n_out, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(n_in)
    return Tensor.param(scale * rng.normal(size=(n_in, n_out)))


class AttentionBlock:
    """Single-head attention with residual + standardization."""

    def __init__(self, d: int, rng):
        self.Wq = _linear(rng, d, d)
        self.Wk = _linear(rng, d, d)
        self.Wv = _linear(rng, d, d)
        self.Wo = _linear(rng, d, d)

    def forward(self, X: Tensor, memory: Tensor | None = None, mask=None) -> Tensor:
        mem = X if memory is None else memory
        att = T.attention(T.matmul(X, self.Wq), T.matmul(mem, self.Wk),
                          T.matmul(mem, self.Wv), mask=mask)
        return T.standardize_rows(T.add(X, T.matmul(att, self.Wo)))

    def params(self):
        return [self.Wq, self.Wk, self.Wv, self.Wo]


class FFNBlock:
    def __init__(self, d: int, h: int, rng):
        self.ffn = ExpertFFN.init(d, h, rng)

    def forward(self, X: Tensor) -> Tensor:
        return T.standardize_rows(T.add(X, self.ffn.forward(X)))

    def params(self):
        return self.ffn.params()


class EncoderBlock:
    def __init__(self, d: int, h: int, rng):
        self.attn = AttentionBlock(d, rng)
        self.ffn = FFNBlock(d, h, rng)

    def forward(self, X: Tensor) -> Tensor:
        return self.ffn.forward(self.attn.forward(X))

    def params(self):
        return self.attn.params() + self.ffn.params()


class DecoderBlock:
    """Causal self-attention, cross-attention, then the (MoE) FFN position."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d
        self.self_attn = AttentionBlock(d, rng)
        self.cross_attn = AttentionBlock(d, rng)
        self.moe = MoELayer(cfg.moe, rng)

    def forward(self, X: Tensor, memory: Tensor, mask, modalities):
        X = self.self_attn.forward(X, mask=mask)
        X = self.cross_attn.forward(X, memory=memory)
        out, decisions, _ = self.moe.forward(X, modalities=modalities)
        logit_rows = ([] if self.moe.cfg.mode == "dense_ffn"
                      else self.moe.router_logit_rows(X))
        X = T.standardize_rows(T.add(X, out))
        return X, decisions, logit_rows

    def params(self):
        return self.self_attn.params() + self.cross_attn.params() + self.moe.params()


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.audio_proj = _linear(rng, cfg.dim_audio, d)
        self.video_proj = _linear(rng, cfg.dim_video, d)
        self.fusion = _linear(rng, 2 * d, d)
        self.encoder_blocks = [EncoderBlock(d, cfg.h, rng) for _ in range(cfg.n_enc)]
        self.token_emb = Tensor.param(0.1 * rng.normal(size=(cfg.n_classes, d)))
        self.decoder_blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.n_dec)]
        self.head = _linear(rng, d, cfg.n_classes)
        self.positions = sinusoidal_positions(cfg.max_len, d)
        self._causal_masks: dict[int, np.ndarray] = {}

    # -- parameters -----------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {"audio_proj": self.audio_proj, "video_proj": self.video_proj,
               "fusion": self.fusion, "token_emb": self.token_emb, "head": self.head}
        for i, blk in enumerate(self.encoder_blocks):
            for j, p in enumerate(blk.params()):
                out[f"enc{i}.p{j}"] = p
        for i, blk in enumerate(self.decoder_blocks):
            for j, p in enumerate(blk.params()):
                out[f"dec{i}.p{j}"] = p
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def encoder_params(self) -> list[Tensor]:
        out = [self.audio_proj, self.video_proj, self.fusion]
        for blk in self.encoder_blocks:
            out.extend(blk.params())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        named = self.named_params()
        if set(state) != set(named):
            missing = set(named) ^ set(state)
            raise KeyError(f"state dict keys mismatch: {sorted(missing)[:5]}")
        for name, values in state.items():
            p = named[name]
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != p.data.shape:
                raise T.ShapeError(f"{name}: checkpoint {arr.shape} vs model {p.data.shape}")
            p.data[:] = arr

    # -- encoder --------------------------------------------------------------

    def encode(self, audio: np.ndarray, video: np.ndarray):
        """Returns (final features [T x d], per-block outputs)."""
        if audio.shape[0] != video.shape[0]:
            raise T.ShapeError(
                f"audio has {audio.shape[0]} frames, video has {video.shape[0]}")
        a = T.matmul(Tensor(audio), self.audio_proj)
        v = T.matmul(Tensor(video), self.video_proj)
        X = T.matmul(T.concat_cols([a, v]), self.fusion)
        per_block = []
        for blk in self.encoder_blocks:
            X = blk.forward(X)
            per_block.append(X)
        return X, per_block

    # -- decoder --------------------------------------------------------------

    def _causal_mask(self, n: int) -> np.ndarray:
        if n not in self._causal_masks:
            m = np.triu(np.full((n, n), -np.inf), k=1)
            self._causal_masks[n] = m
        return self._causal_masks[n]

    def _embed_tokens(self, token_ids: list[int]) -> Tensor:
        if max(token_ids) >= self.cfg.n_classes or min(token_ids) < 0:
            raise IndexError(f"token id outside [0, {self.cfg.n_classes})")
        emb = T.index_rows(self.token_emb, token_ids)
        return T.add(emb, Tensor(self.positions[:len(token_ids)]))

    def decode_step(self, features: Tensor, token_ids: list[int], modality: str):
        """One teacher-forced decoder pass; returns (logits, moe aux per layer)."""
        X = self._embed_tokens(token_ids)
        mask = self._causal_mask(len(token_ids))
        modalities = [modality] * len(token_ids)
        aux = []
        for blk in self.decoder_blocks:
            X, decisions, logit_rows = blk.forward(X, features, mask, modalities)
            aux.append({"decisions": decisions, "logit_rows": logit_rows,
                        "modalities": modalities})
        return T.matmul(X, self.head), aux

    def decode_train(self, features: Tensor, labels, modality: str = MOD_AV):
        """Teacher-forced next-token prediction.

        Returns (logits [L+1 x n_classes], mean cross-entropy, moe aux)."""
        labels = [int(t) for t in labels]
        if any(t < 0 or t >= self.cfg.vocab for t in labels):
            raise IndexError(f"label outside vocab of size {self.cfg.vocab}")
        inputs = [self.cfg.bos_id] + labels
        targets = labels + [self.cfg.eos_id]
        logits, aux = self.decode_step(features, inputs, modality)
        ce = T.cross_entropy_rows(logits, targets)
        return logits, ce, aux

    def decode_greedy(self, features: Tensor, max_len: int, modality: str = MOD_AV) -> list[int]:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        tokens = [self.cfg.bos_id]
        out: list[int] = []
        with T.no_grad():
            for _ in range(max_len):
                logits, _ = self.decode_step(features, tokens, modality)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == self.cfg.eos_id:
                    break
                out.append(nxt)
                tokens.append(nxt if nxt < self.cfg.n_classes else self.cfg.bos_id)
        return out

    # -- checkpoints ----------------------------------------------------------

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that still affects inference."""
        return {f"dec{i}.moe_center": blk.moe.inter_center
                for i, blk in enumerate(self.decoder_blocks)}

    def save_checkpoint(self, path: str):
        payload = {"format": CHECKPOINT_FORMAT,
                   "params": {name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                              for name, arr in self.state_dict().items()},
                   "buffers": {name: arr.tolist()
                               for name, arr in self.buffers().items()}}
        with open(path, "w") as f:
            json.dump(payload, f)

    def load_checkpoint(self, path: str):
        with open(path) as f:
            payload = json.load(f)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {payload.get('format')!r}")
        state = {name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
                 for name, entry in payload["params"].items()}
        self.load_state_dict(state)
        for i, blk in enumerate(self.decoder_blocks):
            key = f"dec{i}.moe_center"
            if key in payload.get("buffers", {}):
                blk.moe.inter_center = np.asarray(payload["buffers"][key], dtype=np.float64)
