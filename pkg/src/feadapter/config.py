"""Run configuration: nested dataclasses, JSON round-trip, cross-field checks."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .features import FbankConfig, SpecAugPolicy
from .frontends import FbankFrontEndConfig, WaveFrontEndConfig


class ConfigError(ValueError):
    pass


STRIDE_TO_FACTOR = {20: 2, 40: 4}


def toy_wave_config(d_model: int = 96, channels: int = 64) -> WaveFrontEndConfig:
    """320-sample total stride with narrow channels for CPU-scale runs.

    The first layer looks at 5 ms of signal (80 samples) so that single filters
    can resolve formant-scale spectral detail; the canonical 10-sample first
    kernel left masked pre-training with nothing better than a one-dimensional
    loudness feature at this size.
    """
    return WaveFrontEndConfig(
        conv_layers=[(channels, 80, 10)] + [(channels, 3, 2)] * 4 + [(channels, 2, 2)],
        output_dim=d_model,
    )


def toy_encoder_config(d_model: int = 96) -> EncoderConfig:
    return EncoderConfig(n_layers=3, d_model=d_model, n_heads=4, d_ff=4 * d_model, dropout=0.1, max_frames=1500)


@dataclass
class PretrainConfig:
    fbank: FbankConfig = field(default_factory=lambda: FbankConfig(n_mels=40))
    wave: WaveFrontEndConfig = field(default_factory=toy_wave_config)
    encoder: EncoderConfig = field(default_factory=toy_encoder_config)
    n_clusters: int = 32
    n_ceps: int = 13
    kmeans_iter: int = 50
    mask_prob: float = 0.2
    mask_span: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    batch_size: int = 8
    max_updates: int = 1200
    grad_clip: float = 5.0
    seed: int = 1

    def validate(self) -> None:
        if self.wave.output_dim != self.encoder.d_model:
            raise ConfigError(f"wave.output_dim {self.wave.output_dim} != encoder.d_model {self.encoder.d_model}")
        if self.n_clusters < 2:
            raise ConfigError("n_clusters must be >= 2")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must be in [0, 1]")
        if self.wave.stride_ms % self.fbank.hop_ms:
            raise ConfigError("front-end stride must be a multiple of the MFCC hop")


@dataclass
class RunConfig:
    """Fine-tuning run. ``mode`` selects adapter / plain-Fbank / waveform training."""

    mode: str = "adapter"  # adapter | fbank_noadapter | wave
    fbank: FbankConfig = field(default_factory=lambda: FbankConfig(n_mels=40))
    fbank_frontend: FbankFrontEndConfig = field(
        default_factory=lambda: FbankFrontEndConfig(n_mels=40, subsample_factor=2, hidden_dim=32, output_dim=96)
    )
    specaug: SpecAugPolicy = field(
        default_factory=lambda: SpecAugPolicy(n_time_masks=2, max_time_mask_frames=8, n_freq_masks=2, max_freq_mask_bins=6)
    )
    use_specaug: bool = True
    specaug_in_warmup: bool = False
    stride_ms: int = 20
    n_warmup: int = 200
    warmup_unit: str = "updates"  # updates | epochs
    l2_weight: float = 1.0
    downsample_mode: str = "pick"
    align_tolerance: int = 3
    reset_fbank_optimizer: bool = True
    # Span masking on the waveform path when fine-tuning the waveform model.
    wave_mask_prob: float = 0.2
    wave_mask_span: int = 3
    lr: float = 3e-4
    lr_stages: tuple[float, float, float] = (0.1, 0.4, 0.5)
    final_lr_scale: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    batch_size: int = 8
    max_updates: int = 600
    eval_interval: int = 100
    save_interval: int = 0
    probe_size: int = 8
    seed: int = 7

    def validate(self) -> None:
        if self.mode not in ("adapter", "fbank_noadapter", "wave"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.stride_ms not in STRIDE_TO_FACTOR:
            raise ConfigError(f"stride_ms must be one of {sorted(STRIDE_TO_FACTOR)}, got {self.stride_ms}")
        if STRIDE_TO_FACTOR[self.stride_ms] != self.fbank_frontend.subsample_factor:
            raise ConfigError(
                f"stride_ms={self.stride_ms} needs fbank_frontend.subsample_factor="
                f"{STRIDE_TO_FACTOR[self.stride_ms]}, got {self.fbank_frontend.subsample_factor}"
            )
        if self.fbank_frontend.input_stride_ms != self.fbank.hop_ms:
            raise ConfigError("fbank_frontend.input_stride_ms must equal fbank.hop_ms")
        if self.fbank_frontend.n_mels != self.fbank.n_mels:
            raise ConfigError(f"fbank_frontend.n_mels {self.fbank_frontend.n_mels} != fbank.n_mels {self.fbank.n_mels}")
        if self.warmup_unit not in ("updates", "epochs"):
            raise ConfigError("warmup_unit must be 'updates' or 'epochs'")
        if self.n_warmup < 0 or self.max_updates < 0:
            raise ConfigError("n_warmup and max_updates must be >= 0")
        if self.downsample_mode not in ("pick", "mean"):
            raise ConfigError("downsample_mode must be 'pick' or 'mean'")
        if abs(sum(self.lr_stages) - 1.0) > 1e-9:
            raise ConfigError("lr_stages must sum to 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


_NESTED = {
    "fbank": FbankConfig,
    "wave": WaveFrontEndConfig,
    "encoder": EncoderConfig,
    "fbank_frontend": FbankFrontEndConfig,
    "specaug": SpecAugPolicy,
}


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def from_dict(cls, data: dict):
    """Build ``cls`` from a (possibly partial) dict; unknown keys are an error."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            value = from_dict(_NESTED[key], value)
        elif key == "lr_stages":
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        elif value is not None:
            out[key] = value
    return out


def parse_overrides(items) -> dict:
    """``["a.b=3", "mode=wave"]`` -> ``{"a": {"b": 3}, "mode": "wave"}``; values are JSON when they parse."""
    out: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def load_config(cls, path: str | Path | None, overrides: dict | None = None):
    """JSON file (optional) deep-merged with ``overrides``, then validated."""
    # Start from the class defaults so a partial nested section keeps the
    # other fields of the default sub-config rather than that type's own defaults.
    data = _merge(to_dict(cls()), json.loads(Path(path).read_text()) if path else {})
    cfg = from_dict(cls, _merge(data, overrides or {}))
    cfg.validate()
    return cfg


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_resolved(cfg, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
