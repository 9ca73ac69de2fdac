"""Single-file versioned checkpoints with atomic writes."""

from __future__ import annotations

import hashlib
import io
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import torch

from .encoder import EncoderConfig, EncoderModel
from .frontends import FbankFrontEndConfig, WaveFrontEndConfig

FORMAT = "feadapter-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def model_spec(model: EncoderModel) -> dict:
    return {
        "wave": asdict(model.wave_cfg),
        "encoder": asdict(model.enc_cfg),
        "fbank_frontend": asdict(model.fbank_cfg) if model.fbank_cfg is not None else None,
        "n_clusters": model.n_clusters,
        "vocab_size": model.vocab_size,
    }


def build_model(spec: dict) -> EncoderModel:
    fb = spec.get("fbank_frontend")
    return EncoderModel(
        WaveFrontEndConfig(**spec["wave"]),
        EncoderConfig(**spec["encoder"]),
        FbankFrontEndConfig(**fb) if fb else None,
        n_clusters=spec.get("n_clusters"),
        vocab_size=spec.get("vocab_size", 29),
    )


def save_checkpoint(path, model: EncoderModel, **sections) -> Path:
    """Write ``{format, version, model, **sections}`` atomically.

    The payload is fully serialized in memory, written to a temp file in the
    destination directory, fsynced, then renamed over ``path``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model_spec": model_spec(model),
        "state_dict": model.state_dict(),
        **sections,
    }
    payload.setdefault("provenance", {})
    payload["provenance"].setdefault("argv", list(sys.argv))
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            buf = io.BytesIO()
            torch.save(payload, buf)
            fh.write(buf.getvalue())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} != supported {VERSION}")
    return payload


def check_compatible(payload: dict, wave_cfg: WaveFrontEndConfig | None = None, enc_cfg: EncoderConfig | None = None) -> None:
    """Raise naming the first config field that differs from the checkpoint."""
    spec = payload["model_spec"]
    for section, expected in (("wave", wave_cfg), ("encoder", enc_cfg)):
        if expected is None:
            continue
        want = asdict(expected)
        have = spec[section]
        for key, value in want.items():
            got = have.get(key)
            if isinstance(value, list):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
                got = [list(v) for v in got] if got is not None else None
            if got != value:
                raise CheckpointError(f"checkpoint {section}.{key} is {got!r}, expected {value!r}")


def model_from_checkpoint(payload: dict) -> EncoderModel:
    model = build_model(payload["model_spec"])
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"state dict does not fit the declared model: {exc}") from None
    return model
