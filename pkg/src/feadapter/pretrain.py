"""Toy masked-prediction pre-training on K-means pseudo-labels.

Produces the waveform-front-end checkpoint that the adapter later starts from.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import PretrainConfig, config_hash, to_dict
from .data import Utterance, collate
from .encoder import EncoderModel, sample_span_mask
from .features import FeatureKind, FeatureMatrix, WaveformClip, mfcc_with_deltas
from .losses import masked_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    feature_kind: str = FeatureKind.MFCC.value

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # Explicit differences (not the |x|^2 - 2xc + |c|^2 expansion) keep exact ties exact.
    return np.concatenate(
        [((x[i:i + chunk, None, :] - c[None, :, :]) ** 2).sum(-1) for i in range(0, len(x), chunk)]
    ) if len(x) else np.zeros((0, len(c)))


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    closest = ((x - centroids[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # Fewer distinct points than clusters left to seed; reuse any point.
            idx = int(rng.integers(len(x)))
        else:
            idx = int(rng.choice(len(x), p=closest / total))
        centroids.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return np.stack(centroids)


def lloyd_iteration(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """One assignment + update pass. Returns new centroids, assignments, and the
    inertia of the assignment step. Empty clusters keep their old centroid."""
    d = _sq_dists(x, centroids)
    assign = d.argmin(1)
    inertia = float(d[np.arange(len(x)), assign].sum())
    new = centroids.copy()
    for j in range(len(centroids)):
        members = x[assign == j]
        if len(members):
            new[j] = members.mean(0)
    return new, assign, inertia


def kmeans_fit(
    features: Sequence[FeatureMatrix] | np.ndarray,
    k: int,
    max_iter: int = 50,
    seed: int = 0,
    init: np.ndarray | None = None,
    tol: float = 1e-6,
) -> KMeansModel:
    """Lloyd's algorithm from a k-means++ start (or ``init``).

    Inertia is checked to be non-increasing after every iteration.
    """
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
    else:
        x = np.concatenate([np.asarray(f.data, dtype=np.float64) for f in features], axis=0)
    if x.shape[0] < k:
        raise ValueError(f"k-means needs at least k={k} frames, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = np.array(init, dtype=np.float64) if init is not None else kmeans_plus_plus(x, k, rng)
    history: list[float] = []
    for _ in range(max_iter):
        centroids, _, inertia = lloyd_iteration(x, centroids)
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], 1e-300):
            break
    final = float(_sq_dists(x, centroids).min(1).sum())
    if final > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"k-means inertia increased: {history[-1]} -> {final}")
    history.append(final)
    return KMeansModel(centroids, history)


def assign_labels(model: KMeansModel, feat) -> np.ndarray:
    """Nearest centroid per frame; ``argmin`` breaks ties toward the lowest id."""
    x = np.asarray(feat.data if isinstance(feat, FeatureMatrix) else feat, dtype=np.float64)
    if x.shape[1] != model.dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match k-means dim {model.dim}")
    return _sq_dists(x, model.centroids).argmin(1)


def resample_labels(labels: Sequence[int], label_stride_ms: float, target_stride_ms: float, length: int | None = None) -> np.ndarray:
    ratio = target_stride_ms / label_stride_ms
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"target stride {target_stride_ms} ms is not an integer multiple of {label_stride_ms} ms")
    out = np.asarray(labels)[::factor]
    if length is not None:
        out = out[:length]
    return out


def make_pseudo_labels(utts: Sequence[Utterance], cfg: PretrainConfig) -> tuple[KMeansModel, dict[str, np.ndarray]]:
    """MFCC(+deltas) -> K-means -> per-utterance cluster ids at the front-end stride."""
    mfcc = {
        u.utt_id: mfcc_with_deltas(WaveformClip(u.samples.astype(np.float64), cfg.fbank.sample_rate_hz, u.utt_id), cfg.fbank, cfg.n_ceps)
        for u in utts
    }
    km = kmeans_fit(list(mfcc.values()), cfg.n_clusters, cfg.kmeans_iter, seed=cfg.seed)
    labels = {}
    for u in utts:
        n_out = cfg.wave.output_length(len(u.samples))
        labels[u.utt_id] = resample_labels(assign_labels(km, mfcc[u.utt_id]), cfg.fbank.hop_ms, cfg.wave.stride_ms, n_out)
    return km, labels


def write_label_file(path, labels: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, ids in labels.items():
            fh.write(f"{utt_id}\t{' '.join(str(int(i)) for i in ids)}\n")


def read_label_file(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, ids = line.partition("\t")
            out[utt_id] = np.array([int(v) for v in ids.split()], dtype=np.int64)
    return out


def warmup_lr(step: int, total: int, peak: float, warmup_ratio: float) -> float:
    warm = max(1, int(math.ceil(warmup_ratio * total)))
    return peak * min(1.0, step / warm)


class NonFiniteLossError(RuntimeError):
    pass


def pretrain_step(
    model: EncoderModel,
    batch,
    labels: Sequence[np.ndarray],
    optimizer: torch.optim.Optimizer,
    mask_prob: float,
    mask_span: int,
    mask_seed: int,
    grad_clip: float | None = None,
) -> dict:
    """One masked-prediction update through the waveform front-end and encoder.

    If no frame ends up masked the loss is 0 and no update is applied.
    """
    if model.pretrain_head is None:
        raise KeyError("model has no pretrain_head parameter group")
    model.train()
    feats, lengths = model.wave_frontend(batch.wav, batch.wav_lengths)
    b, t, _ = feats.shape
    lab = torch.full((b, t), -1, dtype=torch.long)
    mask = torch.zeros(b, t, dtype=torch.bool)
    for i in range(b):
        n = min(int(lengths[i]), len(labels[i]))
        lab[i, :n] = torch.as_tensor(labels[i][:n])
        m = sample_span_mask(n, mask_prob, mask_span, [mask_seed, i]).as_bool()
        mask[i, :n] = torch.as_tensor(m)
    valid_lengths = torch.tensor([min(int(lengths[i]), len(labels[i])) for i in range(b)])
    hidden = model.transformer(feats, valid_lengths, mask)
    logits = model.pretrain_head(hidden)
    loss = masked_cross_entropy(logits, lab.clamp(min=0), mask)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite pre-training loss {loss.item()} (batch {batch.ids})")
    stats = {"loss": loss.item(), "n_masked": int(mask.sum())}
    if stats["n_masked"] == 0:
        return stats
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    with torch.no_grad():
        pred = logits.argmax(-1)
        stats["acc"] = float((pred[mask] == lab[mask]).float().mean())
    return stats


@torch.no_grad()
def masked_accuracy(
    model: EncoderModel,
    utts: Sequence[Utterance],
    labels: Sequence[np.ndarray],
    mask_prob: float,
    mask_span: int,
    seed: int = 0,
    batch_size: int = 8,
) -> float:
    """Cluster-prediction accuracy on masked frames of held-out utterances."""
    model.eval()
    hits = total = 0
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        batch = collate(chunk)
        feats, lengths = model.wave_frontend(batch.wav, batch.wav_lengths)
        b, t, _ = feats.shape
        mask = torch.zeros(b, t, dtype=torch.bool)
        lab = torch.zeros(b, t, dtype=torch.long)
        for i in range(b):
            n = min(int(lengths[i]), len(labels[start + i]))
            lab[i, :n] = torch.as_tensor(labels[start + i][:n])
            mask[i, :n] = torch.as_tensor(sample_span_mask(n, mask_prob, mask_span, [seed, start + i]).as_bool())
        valid = torch.tensor([min(int(lengths[i]), len(labels[start + i])) for i in range(b)])
        pred = model.pretrain_head(model.transformer(feats, valid, mask)).argmax(-1)
        hits += int((pred[mask] == lab[mask]).sum())
        total += int(mask.sum())
    return hits / max(total, 1)


def run_pretrain(
    cfg: PretrainConfig,
    utts: Sequence[Utterance],
    labels: dict[str, np.ndarray],
    kmeans: KMeansModel,
    out_path: Path | None = None,
    heldout: Sequence[Utterance] = (),
    log_every: int = 100,
) -> tuple[EncoderModel, list[dict]]:
    """Pre-train a fresh waveform front-end + encoder; optionally save a checkpoint."""
    from .checkpoint import save_checkpoint

    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = EncoderModel(cfg.wave, cfg.encoder, n_clusters=cfg.n_clusters)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    steps_per_epoch = max(1, len(utts) // cfg.batch_size)
    t0 = time.time()
    for step in range(1, cfg.max_updates + 1):
        epoch, pos = divmod(step - 1, steps_per_epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(utts))
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        chunk = [utts[i] for i in idx]
        for group in opt.param_groups:
            group["lr"] = warmup_lr(step, cfg.max_updates, cfg.lr, cfg.warmup_ratio)
        stats = pretrain_step(
            model, collate(chunk), [labels[u.utt_id] for u in chunk], opt,
            cfg.mask_prob, cfg.mask_span, mask_seed=cfg.seed * 1_000_003 + step, grad_clip=cfg.grad_clip,
        )
        stats["step"] = step
        history.append(stats)
        if step % log_every == 0:
            log.info("pretrain step %d loss %.3f acc %.3f (%.0fs)", step, stats["loss"], stats.get("acc", 0.0), time.time() - t0)
    heldout_acc = None
    if heldout:
        heldout_acc = masked_accuracy(model, heldout, [labels[u.utt_id] for u in heldout], cfg.mask_prob, cfg.mask_span, seed=cfg.seed)
        log.info("held-out masked accuracy %.3f (chance %.3f)", heldout_acc, 1.0 / cfg.n_clusters)
    if out_path is not None:
        save_checkpoint(
            out_path, model,
            kind="pretrain",
            config=to_dict(cfg),
            kmeans={"centroids": kmeans.centroids, "inertia_history": kmeans.inertia_history},
            metrics={"history": history, "heldout_acc": heldout_acc},
            provenance={"config_hash": config_hash(cfg)},
        )
    return model, history
