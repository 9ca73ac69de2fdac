"""Log-Mel filterbank, MFCC and SpecAug.

Everything here is plain numpy and deterministic (given a seed), so it can be
called from data-loading workers without coordination.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np
from scipy.fft import dct


class FeatureKind(str, enum.Enum):
    FBANK = "fbank"
    MFCC = "mfcc"
    FRONTEND_OUTPUT = "frontend_output"


class TooShortError(ValueError):
    """Raised when a clip cannot produce a single analysis frame."""

    def __init__(self, message: str, actual: int, minimum: int):
        super().__init__(message)
        self.actual = actual
        self.minimum = minimum


@dataclass
class WaveformClip:
    samples: np.ndarray
    sample_rate_hz: int = 16000
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError(f"clip {self.id!r} has no samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"clip {self.id!r} contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class FeatureMatrix:
    """Time-major ``T x D`` matrix with its frame stride.

    ``data`` is a numpy array for signal-processing features and a torch
    tensor for front-end outputs; both expose ``.shape``.
    """

    data: object
    stride_ms: float
    kind: FeatureKind = FeatureKind.FBANK

    def __post_init__(self):
        self.kind = FeatureKind(self.kind)
        if len(self.data.shape) != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature matrix must be T x D with T, D >= 1, got {tuple(self.data.shape)}")
        if self.stride_ms <= 0:
            raise ValueError(f"stride_ms must be positive, got {self.stride_ms}")

    @property
    def num_frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass
class FbankConfig:
    sample_rate_hz: int = 16000
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    log_floor: float = 1e-10
    dither: float = 0.0
    preemphasis: float = 0.97
    low_freq_hz: float = 20.0
    high_freq_hz: float | None = None
    # Per-utterance mean/variance normalisation; off by default.
    cmvn: bool = False

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.hop_ms > self.win_ms:
            raise ValueError(f"hop_ms ({self.hop_ms}) must not exceed win_ms ({self.win_ms})")
        if self.fft_size < self.win_samples:
            raise ValueError(f"fft_size {self.fft_size} is smaller than the window ({self.win_samples} samples)")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.dither < 0:
            raise ValueError("dither must be non-negative")

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.win_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_samples:
            return 0
        return 1 + (num_samples - self.win_samples) // self.hop_samples


@dataclass
class SpecAugPolicy:
    n_time_masks: int = 2
    max_time_mask_frames: int = 10
    n_freq_masks: int = 2
    max_freq_mask_bins: int = 15
    replace_value: float = 0.0

    def __post_init__(self):
        for name in ("n_time_masks", "max_time_mask_frames", "n_freq_masks", "max_freq_mask_bins"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular Mel filters, shape ``(n_mels, fft_size // 2 + 1)``."""
    high = cfg.high_freq_hz if cfg.high_freq_hz is not None else cfg.sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.low_freq_hz), hz_to_mel(high), cfg.n_mels + 2))
    bin_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz[None, :] - left) / (center - left)
    down = (right - bin_hz[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def frame_signal(samples: np.ndarray, cfg: FbankConfig) -> np.ndarray:
    """Slice into overlapping windows; the tail shorter than a window is dropped."""
    n = samples.shape[0]
    t = cfg.num_frames(n)
    if t == 0:
        raise TooShortError(
            f"clip of {n} samples is shorter than one {cfg.win_samples}-sample window",
            actual=n, minimum=cfg.win_samples,
        )
    idx = np.arange(cfg.win_samples)[None, :] + cfg.hop_samples * np.arange(t)[:, None]
    return samples[idx]


def mel_energies(clip: WaveformClip, cfg: FbankConfig, seed: int | None = None) -> np.ndarray:
    """Mel filter energies of the power spectrum, before the log (``T x n_mels``)."""
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"clip is {clip.sample_rate_hz} Hz but config expects {cfg.sample_rate_hz} Hz")
    x = clip.samples.astype(np.float64)
    if cfg.dither > 0:
        x = x + cfg.dither * np.random.default_rng(seed).standard_normal(x.shape)
    if cfg.preemphasis:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    frames = frame_signal(x, cfg) * np.hamming(cfg.win_samples)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    return power @ mel_filterbank(cfg).T


def compute_fbank(clip: WaveformClip, cfg: FbankConfig, seed: int | None = None) -> FeatureMatrix:
    energies = mel_energies(clip, cfg, seed=seed)
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    if cfg.cmvn:
        logmel = (logmel - logmel.mean(0)) / np.maximum(logmel.std(0), 1e-5)
    return FeatureMatrix(logmel, stride_ms=cfg.hop_ms, kind=FeatureKind.FBANK)


def compute_mfcc(clip: WaveformClip, cfg: FbankConfig, n_ceps: int = 13) -> FeatureMatrix:
    if not 1 <= n_ceps <= cfg.n_mels:
        raise ValueError(f"n_ceps must be in [1, {cfg.n_mels}], got {n_ceps}")
    energies = mel_energies(clip, cfg)
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_ceps]
    return FeatureMatrix(ceps, stride_ms=cfg.hop_ms, kind=FeatureKind.MFCC)


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along time with edge replication."""
    t = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], width, 0), x, np.repeat(x[-1:], width, 0)])
    num = sum(k * (padded[width + k: width + k + t] - padded[width - k: width - k + t]) for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def mfcc_with_deltas(clip: WaveformClip, cfg: FbankConfig, n_ceps: int = 13) -> FeatureMatrix:
    """MFCC + delta + delta-delta, the 39-dim input used for pseudo-labelling."""
    base = compute_mfcc(clip, cfg, n_ceps).data
    d1 = deltas(base)
    return FeatureMatrix(np.concatenate([base, d1, deltas(d1)], axis=1), stride_ms=cfg.hop_ms, kind=FeatureKind.MFCC)


def apply_specaug(feat: FeatureMatrix, policy: SpecAugPolicy, rng_seed: int) -> FeatureMatrix:
    if feat.kind is not FeatureKind.FBANK:
        raise ValueError(f"SpecAug applies to fbank features only, got {feat.kind.value}")
    out = np.array(feat.data, copy=True)
    t, d = out.shape
    rng = np.random.default_rng(rng_seed)
    for _ in range(policy.n_time_masks):
        width = int(rng.integers(0, min(policy.max_time_mask_frames, t) + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start:start + width, :] = policy.replace_value
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(0, min(policy.max_freq_mask_bins, d) + 1))
        start = int(rng.integers(0, d - width + 1))
        out[:, start:start + width] = policy.replace_value
    return FeatureMatrix(out, stride_ms=feat.stride_ms, kind=feat.kind)


# Feature dump: header {u32 id_len, id bytes, u32 T, u32 D, f64 stride_ms}
# followed by T*D little-endian float32, row-major.

def write_feature_record(fh: BinaryIO, utt_id: str, feat: FeatureMatrix) -> None:
    key = utt_id.encode("utf-8")
    data = np.ascontiguousarray(np.asarray(feat.data), dtype="<f4")
    fh.write(struct.pack("<I", len(key)))
    fh.write(key)
    fh.write(struct.pack("<IId", data.shape[0], data.shape[1], float(feat.stride_ms)))
    fh.write(data.tobytes())


def read_feature_records(fh: BinaryIO, kind: FeatureKind = FeatureKind.FBANK) -> Iterator[tuple[str, FeatureMatrix]]:
    while True:
        raw = fh.read(4)
        if not raw:
            return
        if len(raw) < 4:
            raise ValueError("truncated feature record header")
        (key_len,) = struct.unpack("<I", raw)
        key = fh.read(key_len).decode("utf-8")
        t, d, stride = struct.unpack("<IId", fh.read(16))
        buf = fh.read(4 * t * d)
        if len(buf) != 4 * t * d:
            raise ValueError(f"truncated feature payload for {key!r}")
        yield key, FeatureMatrix(np.frombuffer(buf, dtype="<f4").reshape(t, d).copy(), stride_ms=stride, kind=kind)
