"""Synthetic spoken-letter corpus for CPU-scale experiments.

Each letter is rendered as a short voiced segment: a harmonic series on a
per-speaker pitch, shaped by two letter-specific formants. Speakers differ in
pitch and a vocal-tract scale factor; tokens jitter in duration, formant
position and loudness. Words are separated by short pauses.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import write_audio

SAMPLE_RATE = 16000

# (F1, F2) in Hz on a 2 x 5 grid; neighbours differ by >= 350 Hz in F1 or 500 Hz in F2.
FORMANTS = {
    "a": (300, 850), "e": (300, 1350), "i": (300, 1850), "o": (300, 2350), "u": (300, 2850),
    "d": (650, 850), "k": (650, 1350), "m": (650, 1850), "s": (650, 2350), "t": (650, 2850),
}


def make_lexicon(n_words: int = 16, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    letters = sorted(FORMANTS)
    words: set[str] = set()
    while len(words) < n_words:
        length = int(rng.integers(2, 4))
        w = [letters[rng.integers(len(letters))]]
        while len(w) < length:
            c = letters[rng.integers(len(letters))]
            if c != w[-1]:
                w.append(c)
        words.add("".join(w))
    return sorted(words)


def render_letter(letter: str, rng: np.random.Generator, f0: float, tract: float) -> np.ndarray:
    dur = rng.uniform(0.08, 0.14)
    n = int(dur * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    f1, f2 = FORMANTS[letter]
    f1 *= tract * rng.uniform(0.97, 1.03)
    f2 *= tract * rng.uniform(0.97, 1.03)
    pitch = f0 * (1 + 0.03 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
    phase = 2 * np.pi * np.cumsum(pitch) / SAMPLE_RATE
    sig = np.zeros(n)
    for h in range(1, int(4000 // f0) + 1):
        fh = h * f0
        gain = np.exp(-0.5 * ((fh - f1) / 90.0) ** 2) + 0.7 * np.exp(-0.5 * ((fh - f2) / 120.0) ** 2) + 0.02
        sig += gain * np.sin(h * phase)
    ramp = min(int(0.01 * SAMPLE_RATE), n // 2)
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[-ramp:] = np.linspace(1, 0, ramp)
    sig = sig * env
    return sig / (np.abs(sig).max() + 1e-9) * rng.uniform(0.25, 0.5)


def render_utterance(words: list[str], rng: np.random.Generator) -> np.ndarray:
    f0 = rng.uniform(100, 200)
    tract = rng.uniform(0.95, 1.05)
    parts = [np.zeros(int(rng.uniform(0.04, 0.08) * SAMPLE_RATE))]
    for wi, word in enumerate(words):
        if wi:
            parts.append(np.zeros(int(rng.uniform(0.06, 0.12) * SAMPLE_RATE)))
        parts.extend(render_letter(c, rng, f0, tract) for c in word)
    parts.append(np.zeros(int(rng.uniform(0.04, 0.08) * SAMPLE_RATE)))
    audio = np.concatenate(parts)
    audio += 10 ** (-40 / 20) * rng.standard_normal(audio.shape)
    return np.clip(audio, -0.99, 0.99)


DEFAULT_SPLITS = {"unlabeled": 600, "train": 200, "dev": 50, "test": 50}


def make_corpus(out_dir, splits: dict[str, int] | None = None, seed: int = 0, n_words: int = 16) -> dict[str, Path]:
    """Write WAVs and one JSONL manifest per split; returns manifest paths."""
    splits = splits or DEFAULT_SPLITS
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    lexicon = make_lexicon(n_words, seed)
    paths = {}
    for split_idx, (split, count) in enumerate(splits.items()):
        rng = np.random.default_rng([seed, split_idx])
        lines = []
        for i in range(count):
            words = [lexicon[j] for j in rng.integers(len(lexicon), size=int(rng.integers(2, 5)))]
            audio = render_utterance(words, rng)
            utt_id = f"{split}-{i:04d}"
            rel = Path("wav") / f"{utt_id}.wav"
            write_audio(out_dir / rel, audio, SAMPLE_RATE)
            lines.append(json.dumps({
                "utt_id": utt_id, "audio": str(rel), "duration_s": round(len(audio) / SAMPLE_RATE, 4),
                "text": " ".join(words),
            }))
        path = out_dir / f"{split}.jsonl"
        path.write_text("\n".join(lines) + "\n")
        paths[split] = path
    return paths
