"""Transformer backbone, span masking, the letter CTC head and the model container."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .features import FeatureKind, FeatureMatrix
from .frontends import FbankFrontEnd, FbankFrontEndConfig, WaveFrontEnd, WaveFrontEndConfig

BLANK = "<blank>"
LETTERS = [BLANK] + [chr(c) for c in range(ord("a"), ord("z") + 1)] + ["'", " "]
BLANK_ID = 0


@dataclass
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 192
    n_heads: int = 4
    d_ff: int = 768
    dropout: float = 0.1
    max_frames: int = 3000

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff, self.max_frames) < 1 or self.n_layers < 0:
            raise ValueError("encoder dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class SpanMask:
    mask_prob: float
    span_length: int
    masked_indices: np.ndarray  # sorted frame indices
    num_frames: int

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_frames, dtype=bool)
        out[self.masked_indices] = True
        return out


def sample_span_mask(num_frames: int, mask_prob: float, span_length: int, rng_seed) -> SpanMask:
    """Mask ``round(mask_prob * T / span_length)`` non-overlapping spans.

    Starts are drawn uniformly over all non-overlapping placements, so the
    masked fraction is ``mask_prob`` up to rounding to whole spans.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    span_length = max(1, min(int(span_length), num_frames))
    n_spans = min(int(round(mask_prob * num_frames / span_length)), num_frames // span_length)
    mask = np.zeros(num_frames, dtype=bool)
    if n_spans > 0:
        rng = np.random.default_rng(rng_seed)
        slots = num_frames - n_spans * (span_length - 1)
        picks = np.sort(rng.choice(slots, size=n_spans, replace=False))
        for i, pick in enumerate(picks):
            start = pick + i * (span_length - 1)
            mask[start:start + span_length] = True
    return SpanMask(mask_prob, span_length, np.flatnonzero(mask), num_frames)


def sinusoidal_positions(num_frames: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(num_frames, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(num_frames, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_embedding = nn.Parameter(torch.empty(cfg.d_model).uniform_())
        self.dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(cfg.n_layers)
        )
        # Pre-norm stacks need a closing norm; a zero-layer stack stays the identity.
        self.final_norm = nn.LayerNorm(cfg.d_model) if cfg.n_layers > 0 else None

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None, mask: torch.Tensor | None = None):
        """``x`` is ``(B, T, d_model)``; ``mask`` is a ``(B, T)`` bool tensor of frames to replace."""
        b, t, d = x.shape
        if t > self.cfg.max_frames:
            raise ValueError(f"{t} frames exceeds encoder max_frames={self.cfg.max_frames}")
        if mask is not None:
            x = torch.where(mask[:, :, None], self.mask_embedding.to(x.dtype).expand(b, t, d), x)
        x = self.dropout(x + sinusoidal_positions(t, d, x.dtype))
        pad = None
        if lengths is not None:
            pad = torch.arange(t)[None, :] >= lengths[:, None]
            if not bool(pad.any()):
                pad = None
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad)
        if self.final_norm is not None:
            x = self.final_norm(x)
        return x


class CTCHead(nn.Module):
    def __init__(self, d_model: int, vocab_size: int = len(LETTERS)):
        super().__init__()
        self.proj = nn.Linear(d_model, vocab_size)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.proj(h), dim=-1)


PARAM_GROUPS = ("wave_frontend", "fbank_frontend", "transformer", "ctc_head", "pretrain_head")


class EncoderModel(nn.Module):
    """All trainable blocks under fixed group names.

    ``fbank_frontend`` and ``pretrain_head`` are optional: a pre-training model
    has no Fbank block, and the adapter attaches a fresh one later.
    """

    def __init__(
        self,
        wave_cfg: WaveFrontEndConfig,
        enc_cfg: EncoderConfig,
        fbank_cfg: FbankFrontEndConfig | None = None,
        n_clusters: int | None = None,
        vocab_size: int = len(LETTERS),
    ):
        super().__init__()
        if wave_cfg.output_dim != enc_cfg.d_model:
            raise ValueError(f"wave front-end output_dim {wave_cfg.output_dim} != d_model {enc_cfg.d_model}")
        self.wave_cfg = wave_cfg
        self.enc_cfg = enc_cfg
        self.vocab_size = vocab_size
        self.wave_frontend = WaveFrontEnd(wave_cfg)
        self.transformer = TransformerEncoder(enc_cfg)
        self.ctc_head = CTCHead(enc_cfg.d_model, vocab_size)
        self.fbank_frontend: FbankFrontEnd | None = None
        self.fbank_cfg: FbankFrontEndConfig | None = None
        self.pretrain_head: nn.Linear | None = None
        self.n_clusters = n_clusters
        if n_clusters is not None:
            self.pretrain_head = nn.Linear(enc_cfg.d_model, n_clusters)
        if fbank_cfg is not None:
            self.attach_fbank_frontend(fbank_cfg)
        self.check_partition()

    def attach_fbank_frontend(self, cfg: FbankFrontEndConfig) -> FbankFrontEnd:
        if cfg.output_dim != self.enc_cfg.d_model:
            raise ValueError(f"fbank front-end output_dim {cfg.output_dim} != d_model {self.enc_cfg.d_model}")
        self.fbank_cfg = cfg
        dtype = next(self.parameters()).dtype
        self.fbank_frontend = FbankFrontEnd(cfg).to(dtype)
        self.check_partition()
        return self.fbank_frontend

    def group(self, name: str) -> list[nn.Parameter]:
        if name not in PARAM_GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        module = getattr(self, name)
        if module is None:
            raise KeyError(f"parameter group {name!r} is absent from this model")
        return list(module.parameters())

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(getattr(self, name).parameters()) for name in PARAM_GROUPS if getattr(self, name) is not None}

    def check_partition(self) -> None:
        seen: dict[int, str] = {}
        for name, params in self.groups().items():
            for p in params:
                if id(p) in seen:
                    raise AssertionError(f"parameter shared between groups {seen[id(p)]} and {name}")
                seen[id(p)] = name
        everything = {id(p) for p in self.parameters()}
        if everything != set(seen):
            raise AssertionError("some parameters belong to no named group")

    def encode(self, frontend_out: torch.Tensor, lengths=None, mask=None) -> torch.Tensor:
        return self.transformer(frontend_out, lengths, mask)

    def ctc_logprobs(self, frontend_out: torch.Tensor, lengths=None, mask=None) -> torch.Tensor:
        return self.ctc_head(self.transformer(frontend_out, lengths, mask))


def encode(x: FeatureMatrix, encoder: TransformerEncoder, mask: SpanMask | None = None) -> FeatureMatrix:
    data = x.data[None]
    m = None
    if mask is not None:
        m = torch.as_tensor(mask.as_bool())[None]
    out = encoder(data, mask=m)[0]
    return FeatureMatrix(out, stride_ms=x.stride_ms, kind=FeatureKind.FRONTEND_OUTPUT)


def ctc_head_forward(h: FeatureMatrix, head: CTCHead) -> FeatureMatrix:
    return FeatureMatrix(head(h.data), stride_ms=h.stride_ms, kind=FeatureKind.FRONTEND_OUTPUT)


def text_to_ids(text: str) -> list[int]:
    index = {c: i for i, c in enumerate(LETTERS)}
    try:
        return [index[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is outside the letter vocabulary") from None


def ids_to_text(ids) -> str:
    return "".join(LETTERS[i] for i in ids if i != BLANK_ID)
