"""Waveform CNN front-end, Fbank conv-subsampling front-end, and the frame
down-sampler that puts their outputs on a common stride."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import FeatureKind, FeatureMatrix, TooShortError, WaveformClip


@dataclass
class WaveFrontEndConfig:
    conv_layers: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(512, 10, 5)] + [(512, 3, 2)] * 4 + [(512, 2, 2)] * 2
    )
    output_dim: int = 192
    sample_rate_hz: int = 16000
    stride_ms: float = 20.0

    def __post_init__(self):
        self.conv_layers = [tuple(int(v) for v in layer) for layer in self.conv_layers]
        if not self.conv_layers:
            raise ValueError("waveform front-end needs at least one conv layer")
        expected = self.stride_ms * self.sample_rate_hz / 1000.0
        if self.total_stride_samples != expected:
            raise ValueError(
                f"conv strides multiply to {self.total_stride_samples} samples, "
                f"which is not the declared {self.stride_ms} ms at {self.sample_rate_hz} Hz"
            )

    @property
    def total_stride_samples(self) -> int:
        return int(np.prod([s for _, _, s in self.conv_layers]))

    def output_length(self, num_samples):
        """Floor-composed conv length; works on ints and integer tensors."""
        n = num_samples
        for _, kernel, stride in self.conv_layers:
            n = (n - kernel) // stride + 1
        return n

    @property
    def min_samples(self) -> int:
        n = 1
        for _, kernel, stride in reversed(self.conv_layers):
            n = (n - 1) * stride + kernel
        return n


@dataclass
class FbankFrontEndConfig:
    n_mels: int = 80
    subsample_factor: int = 2
    hidden_dim: int = 64
    output_dim: int = 192
    input_stride_ms: float = 10.0

    def __post_init__(self):
        if self.subsample_factor not in (2, 4):
            raise ValueError(f"subsample_factor must be 2 or 4, got {self.subsample_factor}")

    @property
    def stride_ms(self) -> float:
        return self.input_stride_ms * self.subsample_factor

    def output_length(self, num_frames):
        return num_frames // self.subsample_factor


def _length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class WaveFrontEnd(nn.Module):
    """Strided 1-D conv stack over raw samples.

    The first block normalizes each channel over the utterance's valid frames
    (a length-aware GroupNorm with one group per channel), which removes the
    overall level of the recording while keeping relative loudness between
    frames. Later blocks use a per-frame LayerNorm. Both norms ignore padding,
    so a padded batch gives the same valid outputs as single-utterance passes.
    """

    def __init__(self, cfg: WaveFrontEndConfig):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_ch = 1
        for i, (channels, kernel, stride) in enumerate(cfg.conv_layers):
            self.convs.append(nn.Conv1d(in_ch, channels, kernel, stride=stride))
            self.norms.append(nn.GroupNorm(channels, channels) if i == 0 else nn.LayerNorm(channels))
            in_ch = channels
        self.out_norm = nn.LayerNorm(in_ch)
        self.proj = nn.Linear(in_ch, cfg.output_dim)
        # Incremented on every forward; lets callers prove a code path never ran this block.
        self.n_forward = 0

    def _masked_group_norm(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        norm = self.norms[0]
        valid = _length_mask(lengths, x.shape[2])[:, None, :].to(x.dtype)
        count = valid.sum(2, keepdim=True)
        mean = (x * valid).sum(2, keepdim=True) / count
        var = (((x - mean) * valid) ** 2).sum(2, keepdim=True) / count
        x = (x - mean) / torch.sqrt(var + norm.eps)
        return x * norm.weight[None, :, None] + norm.bias[None, :, None]

    def first_layer(self, wav: torch.Tensor) -> torch.Tensor:
        return self.convs[0](wav.unsqueeze(1))

    def forward(self, wav: torch.Tensor, lengths: torch.Tensor | None = None):
        """``wav`` is ``(B, N)``; returns ``(B, T, output_dim)`` and output lengths."""
        self.n_forward += 1
        if lengths is None:
            lengths = torch.full((wav.shape[0],), wav.shape[1], dtype=torch.long)
        shortest = int(lengths.min())
        if shortest < self.cfg.min_samples:
            raise TooShortError(
                f"waveform front-end needs at least {self.cfg.min_samples} samples, got {shortest}",
                actual=shortest, minimum=self.cfg.min_samples,
            )
        x = wav.unsqueeze(1)
        _, kernel, stride = self.cfg.conv_layers[0]
        x = F.gelu(self._masked_group_norm(self.convs[0](x), (lengths - kernel) // stride + 1))
        for conv, norm in zip(self.convs[1:], self.norms[1:]):
            x = conv(x)
            x = F.gelu(norm(x.transpose(1, 2))).transpose(1, 2)
        x = self.proj(self.out_norm(x.transpose(1, 2)))
        out_lengths = self.cfg.output_length(lengths)
        return x, out_lengths


class FbankFrontEnd(nn.Module):
    """Two 2-D convs subsampling time by 2 or 4, then LayerNorm and a linear projection.

    The closing norm-then-project order matches the waveform stack's output
    block, so the projection can reproduce per-frame scale differences of the
    teacher instead of being pinned to unit-norm frames.

    Stride-2 time convs use kernel 4 / padding 1 so that each halves the frame
    count exactly (``floor(T/2)``); the optional stride-1 layer uses kernel 3 /
    padding 1. Frames past each utterance's length are zeroed between layers so
    padding never leaks into valid outputs.
    """

    def __init__(self, cfg: FbankFrontEndConfig):
        super().__init__()
        self.cfg = cfg
        t_strides = (2, 2) if cfg.subsample_factor == 4 else (2, 1)
        self.time_strides = t_strides
        self.conv1 = nn.Conv2d(1, cfg.hidden_dim, (4, 3), stride=(t_strides[0], 2), padding=1)
        k2 = 4 if t_strides[1] == 2 else 3
        self.conv2 = nn.Conv2d(cfg.hidden_dim, cfg.hidden_dim, (k2, 3), stride=(t_strides[1], 2), padding=1)
        f1 = (cfg.n_mels + 2 - 3) // 2 + 1
        f2 = (f1 + 2 - 3) // 2 + 1
        self.norm = nn.LayerNorm(cfg.hidden_dim * f2)
        self.proj = nn.Linear(cfg.hidden_dim * f2, cfg.output_dim)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor | None = None):
        """``feats`` is ``(B, T, n_mels)``; returns ``(B, T // factor, output_dim)`` and lengths."""
        b, t, _ = feats.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        shortest = int(lengths.min())
        if shortest < self.cfg.subsample_factor:
            raise TooShortError(
                f"fbank front-end needs at least {self.cfg.subsample_factor} frames, got {shortest}",
                actual=shortest, minimum=self.cfg.subsample_factor,
            )
        x = feats * _length_mask(lengths, t)[:, :, None].to(feats.dtype)
        x = x.unsqueeze(1)
        len1 = lengths // self.time_strides[0]
        x = F.relu(self.conv1(x))
        x = x * _length_mask(len1, x.shape[2])[:, None, :, None].to(x.dtype)
        len2 = len1 // self.time_strides[1]
        x = F.relu(self.conv2(x))
        x = x * _length_mask(len2, x.shape[2])[:, None, :, None].to(x.dtype)
        b, c, t2, f2 = x.shape
        x = self.norm(x.permute(0, 2, 1, 3).reshape(b, t2, c * f2))
        return self.proj(x), len2


def wave_frontend_forward(clip: WaveformClip, frontend: WaveFrontEnd) -> FeatureMatrix:
    param = next(frontend.parameters())
    wav = torch.as_tensor(clip.samples, dtype=param.dtype)[None, :]
    out, _ = frontend(wav)
    return FeatureMatrix(out[0], stride_ms=frontend.cfg.stride_ms, kind=FeatureKind.FRONTEND_OUTPUT)


def fbank_frontend_forward(feat: FeatureMatrix, frontend: FbankFrontEnd) -> FeatureMatrix:
    if feat.kind is not FeatureKind.FBANK:
        raise ValueError(f"fbank front-end expects fbank features, got {feat.kind.value}")
    param = next(frontend.parameters())
    x = torch.as_tensor(np.asarray(feat.data), dtype=param.dtype)[None]
    out, _ = frontend(x)
    return FeatureMatrix(out[0], stride_ms=feat.stride_ms * frontend.cfg.subsample_factor, kind=FeatureKind.FRONTEND_OUTPUT)


def downsample_frames(x: FeatureMatrix, factor: int, mode: str = "pick") -> FeatureMatrix:
    """Keep every ``factor``-th frame from index 0 (``mode="pick"``), or average
    each group of ``factor`` frames (``mode="mean"``; a short tail group is averaged too)."""
    if factor < 1:
        raise ValueError(f"down-sampling factor must be >= 1, got {factor}")
    data = downsample_tensor(x.data, factor, mode=mode, dim=0)
    return FeatureMatrix(data, stride_ms=x.stride_ms * factor, kind=x.kind)


def downsample_tensor(data, factor: int, mode: str = "pick", dim: int = 1):
    if factor < 1:
        raise ValueError(f"down-sampling factor must be >= 1, got {factor}")
    if factor == 1:
        return data
    if isinstance(data, np.ndarray):
        return downsample_tensor(torch.from_numpy(data), factor, mode, dim).numpy()
    if mode == "pick":
        index = torch.arange(0, data.shape[dim], factor)
        return data.index_select(dim, index)
    if mode == "mean":
        moved = data.movedim(dim, 0)
        t = moved.shape[0]
        groups = [moved[i:i + factor].mean(0) for i in range(0, t, factor)]
        return torch.stack(groups, 0).movedim(0, dim)
    raise ValueError(f"unknown down-sampling mode {mode!r}")


def downsampled_length(lengths, factor: int):
    return (lengths + factor - 1) // factor


class LengthMismatchError(ValueError):
    pass


def align_lengths(a: FeatureMatrix, b: FeatureMatrix, tolerance: int = 3) -> tuple[FeatureMatrix, FeatureMatrix]:
    if a.stride_ms != b.stride_ms:
        raise LengthMismatchError(f"cannot align outputs with strides {a.stride_ms} ms and {b.stride_ms} ms")
    ta, tb = a.num_frames, b.num_frames
    if abs(ta - tb) > tolerance:
        raise LengthMismatchError(
            f"front-end outputs differ by {abs(ta - tb)} frames ({ta} vs {tb}) at {a.stride_ms} ms; "
            f"tolerance is {tolerance} - check the stride pairing"
        )
    t = min(ta, tb)
    return (
        FeatureMatrix(a.data[:t], stride_ms=a.stride_ms, kind=a.kind),
        FeatureMatrix(b.data[:t], stride_ms=b.stride_ms, kind=b.kind),
    )


def align_batch_lengths(len_a: torch.Tensor, len_b: torch.Tensor, tolerance: int = 3) -> torch.Tensor:
    """Per-utterance common length for batched outputs, same contract as :func:`align_lengths`."""
    gap = (len_a - len_b).abs()
    if bool((gap > tolerance).any()):
        worst = int(gap.max())
        raise LengthMismatchError(
            f"front-end outputs differ by up to {worst} frames; tolerance is {tolerance} - check the stride pairing"
        )
    return torch.minimum(len_a, len_b)
