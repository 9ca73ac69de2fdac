"""Manifests, WAV ingestion, in-memory utterances and batch collation."""

from __future__ import annotations

import json
import logging
import re
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoder import LETTERS, text_to_ids
from .features import FbankConfig, SpecAugPolicy, FeatureMatrix, WaveformClip, apply_specaug, compute_fbank

log = logging.getLogger(__name__)

_ALLOWED = set(c for c in LETTERS[1:])


class ManifestError(ValueError):
    pass


class AudioFormatError(ValueError):
    pass


@dataclass
class ManifestRecord:
    utt_id: str
    audio_path: Path
    duration_s: float
    transcript: str


@dataclass
class Manifest:
    records: list[ManifestRecord]
    split: str = "train"
    stripped_chars: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def normalize_transcript(text: str) -> tuple[str, int]:
    """Lowercase, drop characters outside the letter inventory, collapse whitespace.

    Returns the normalized text and the number of dropped characters.
    """
    lowered = re.sub(r"\s+", " ", text.lower())
    kept = "".join(c for c in lowered if c in _ALLOWED)
    stripped = len(lowered) - len(kept)
    return re.sub(r" +", " ", kept).strip(), stripped


def load_manifest(path, split: str = "train", check_audio: bool = True) -> Manifest:
    path = Path(path)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    stripped_total = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                utt_id = str(obj["utt_id"])
                audio = obj["audio"]
                duration = float(obj["duration_s"])
                text = str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed manifest line ({exc})") from None
            if utt_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = path.parent / audio_path
            if check_audio and not audio_path.is_file():
                raise ManifestError(f"{path}:{lineno}: audio file {audio_path} for {utt_id!r} is not readable")
            norm, stripped = normalize_transcript(text)
            stripped_total += stripped
            records.append(ManifestRecord(utt_id, audio_path, duration, norm))
    if stripped_total:
        log.info("%s: stripped %d out-of-vocabulary characters", path, stripped_total)
    log.info("%s: %d utterances, %.1f s of audio", path, len(records), sum(r.duration_s for r in records))
    return Manifest(records, split=split, stripped_chars=stripped_total)


def read_audio(path, utt_id: str = "") -> WaveformClip:
    """Read a 16 kHz mono 16-bit PCM WAV into ``[-1, 1)`` floats."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from None
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if rate != 16000:
        raise AudioFormatError(f"{path}: expected 16000 Hz, got {rate} Hz (no resampling is done)")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return WaveformClip(samples, rate, utt_id or Path(path).stem)


def write_audio(path, samples: np.ndarray, sample_rate_hz: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate_hz)
        fh.writeframes(pcm.tobytes())


@dataclass
class Utterance:
    utt_id: str
    samples: np.ndarray
    fbank: np.ndarray
    text: str = ""
    token_ids: list[int] = field(default_factory=list)


def load_utterances(manifest: Manifest, fbank_cfg: FbankConfig, with_fbank: bool = True) -> list[Utterance]:
    out = []
    for rec in manifest:
        clip = read_audio(rec.audio_path, rec.utt_id)
        fb = compute_fbank(clip, fbank_cfg).data.astype(np.float32) if with_fbank else np.zeros((0, 0), np.float32)
        out.append(Utterance(rec.utt_id, clip.samples.astype(np.float32), fb, rec.transcript, text_to_ids(rec.transcript)))
    return out


@dataclass
class Batch:
    ids: list[str]
    wav: torch.Tensor
    wav_lengths: torch.Tensor
    fbank: torch.Tensor
    fbank_lengths: torch.Tensor
    targets: list[list[int]]
    texts: list[str]


def collate(
    utts: Sequence[Utterance],
    specaug: SpecAugPolicy | None = None,
    specaug_seed: int = 0,
    dtype=torch.float32,
) -> Batch:
    """Zero-pad waveforms and Fbank features; optionally SpecAug each Fbank matrix.

    Each utterance's SpecAug draw is seeded from ``(specaug_seed, position)`` so
    a batch is reproducible without shared RNG state.
    """
    n = len(utts)
    wav_len = torch.tensor([u.samples.shape[0] for u in utts], dtype=torch.long)
    fb_len = torch.tensor([u.fbank.shape[0] for u in utts], dtype=torch.long)
    wav = torch.zeros(n, int(wav_len.max()), dtype=dtype)
    n_mels = utts[0].fbank.shape[1] if utts[0].fbank.ndim == 2 else 0
    fb = torch.zeros(n, max(int(fb_len.max()), 1), max(n_mels, 1), dtype=dtype)
    for i, u in enumerate(utts):
        wav[i, : u.samples.shape[0]] = torch.from_numpy(u.samples).to(dtype)
        if n_mels:
            feat = u.fbank
            if specaug is not None:
                seed = np.random.SeedSequence([specaug_seed, i]).generate_state(1)[0]
                feat = apply_specaug(FeatureMatrix(feat, 10.0), specaug, int(seed)).data
            fb[i, : feat.shape[0]] = torch.from_numpy(np.asarray(feat)).to(dtype)
    return Batch([u.utt_id for u in utts], wav, wav_len, fb, fb_len, [list(u.token_ids) for u in utts], [u.text for u in utts])
