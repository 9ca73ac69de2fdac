"""Two-stage front-end adaptation and the baseline fine-tuning loops.

Stage 1 (updates ``n <= n_warmup``) trains a fresh Fbank front-end to imitate
the frozen waveform front-end with an L2 loss while CTC trains only the
encoder and CTC head on the Fbank activations. Stage 2 drops the L2 term and
fine-tunes Fbank front-end, encoder and head jointly with CTC.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError, file_hash, model_from_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, to_dict
from .data import Batch, Utterance, collate
from .encoder import EncoderModel, ids_to_text, sample_span_mask
from .frontends import align_batch_lengths, downsample_tensor, downsampled_length
from .losses import (
    EditCounts,
    LossBreakdown,
    batch_ctc_loss,
    edit_counts,
    frontend_distance,
    greedy_ids,
    l2_frontend_loss,
)

log = logging.getLogger(__name__)

WARMUP = "warmup"
FINETUNE = "finetune"
METRIC_FIELDS = ["step", "regime", "l_ctc", "l_l2", "frontend_l2", "dev_wer", "wall_s"]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class AdapterSchedule:
    """Warm-up boundary in optimizer updates; ``n`` is 1-based."""

    n_warmup: int
    n: int = 0

    def __post_init__(self):
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be >= 0")

    @classmethod
    def from_units(cls, value: int, unit: str, steps_per_epoch: int) -> "AdapterSchedule":
        if unit == "updates":
            return cls(value)
        if unit == "epochs":
            return cls(value * steps_per_epoch)
        raise ValueError(f"unknown warm-up unit {unit!r}")

    def regime(self, n: int | None = None) -> str:
        n = self.n if n is None else n
        return WARMUP if n <= self.n_warmup else FINETUNE


@dataclass(frozen=True)
class StridePlan:
    stride_ms: int
    fbank_subsample: int
    wave_downsample: int


def configure_stride(target_stride_ms: int, wave_stride_ms: float = 20.0, fbank_hop_ms: float = 10.0) -> StridePlan:
    """How to wire both front-ends so their outputs meet at ``target_stride_ms``."""
    if target_stride_ms not in (20, 40):
        raise ValueError(f"unsupported target stride {target_stride_ms} ms (expected 20 or 40)")
    ratio = target_stride_ms / wave_stride_ms
    if ratio != int(ratio):
        raise ValueError(f"{target_stride_ms} ms is not a multiple of the waveform stride {wave_stride_ms} ms")
    return StridePlan(target_stride_ms, int(target_stride_ms // fbank_hop_ms), int(ratio))


def tri_stage_lr(step: int, total: int, peak: float, stages=(0.1, 0.4, 0.5), final_scale: float = 0.05, init_scale: float = 0.01) -> float:
    """Linear warm-up, hold, then exponential decay to ``final_scale * peak``."""
    total = max(total, 1)
    warm = int(round(stages[0] * total))
    hold = int(round(stages[1] * total))
    decay = max(total - warm - hold, 1)
    if step <= warm:
        return peak * (init_scale + (1 - init_scale) * step / max(warm, 1))
    if step <= warm + hold:
        return peak
    frac = min((step - warm - hold) / decay, 1.0)
    return peak * math.exp(math.log(final_scale) * frac)


def _clip_per_group(model: EncoderModel, names: Sequence[str], max_norm: float | None) -> None:
    # Separate clipping keeps one loss's gradient magnitude from rescaling the other's.
    if not max_norm:
        return
    for name in names:
        params = [p for p in model.group(name) if p.grad is not None]
        if params:
            torch.nn.utils.clip_grad_norm_(params, max_norm)


def _valid_mask(lengths: torch.Tensor, t: int) -> torch.Tensor:
    return torch.arange(t)[None, :] < lengths[:, None]


def teacher_targets(model: EncoderModel, batch: Batch, plan: StridePlan, mode: str = "pick"):
    """Frozen waveform front-end output, down-sampled to the Fbank stride. No graph is built."""
    was_training = model.wave_frontend.training
    model.wave_frontend.eval()
    with torch.no_grad():
        out, lengths = model.wave_frontend(batch.wav, batch.wav_lengths)
    model.wave_frontend.train(was_training)
    out = downsample_tensor(out, plan.wave_downsample, mode=mode, dim=1)
    return out, downsampled_length(lengths, plan.wave_downsample)


def adapter_losses(model: EncoderModel, batch: Batch, regime: str, plan: StridePlan, cfg: RunConfig):
    """Forward pass of one adapter update; returns ``(l_ctc, l_l2 or None)``.

    Gradient gating during warm-up: the encoder sees ``fbank_out.detach()``, so
    CTC cannot reach the Fbank front-end; the teacher output carries no graph,
    so L2 reaches only the Fbank front-end.
    """
    fb_out, fb_len = model.fbank_frontend(batch.fbank, batch.fbank_lengths)
    l2 = None
    if regime == WARMUP:
        teacher, t_len = teacher_targets(model, batch, plan, cfg.downsample_mode)
        common = align_batch_lengths(t_len, fb_len, cfg.align_tolerance)
        t = int(common.max())
        l2 = l2_frontend_loss(teacher[:, :t], fb_out[:, :t], _valid_mask(common, t))
        enc_in = fb_out.detach()
    else:
        enc_in = fb_out
    logp = model.ctc_logprobs(enc_in, fb_len)
    l_ctc = batch_ctc_loss(logp, fb_len, batch.targets).mean()
    return l_ctc, l2


def adapter_step(
    model: EncoderModel,
    batch: Batch,
    step: int,
    sched: AdapterSchedule,
    optimizer: torch.optim.Optimizer,
    cfg: RunConfig,
    plan: StridePlan,
) -> LossBreakdown:
    for name in ("wave_frontend", "fbank_frontend", "transformer", "ctc_head"):
        model.group(name)
    sched.n = step
    regime = sched.regime(step)
    model.train()
    l_ctc, l2 = adapter_losses(model, batch, regime, plan, cfg)
    total = l_ctc if l2 is None else l_ctc + cfg.l2_weight * l2
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at update {step} ({regime}): l_ctc={l_ctc.item()} "
            f"l_l2={l2.item() if l2 is not None else 0.0} batch={batch.ids}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    _clip_per_group(model, ("fbank_frontend", "transformer", "ctc_head"), cfg.grad_clip)
    optimizer.step()
    l_l2 = l2.item() if l2 is not None else 0.0
    return LossBreakdown(l_ctc.item(), l_l2, total.item(), step, regime)


def ctc_step(model: EncoderModel, batch: Batch, step: int, optimizer, cfg: RunConfig, frontend: str) -> LossBreakdown:
    """Plain CTC fine-tuning update through either front-end."""
    model.train()
    if frontend == "wave":
        model.wave_frontend.eval()
        with torch.no_grad():
            feats, lengths = model.wave_frontend(batch.wav, batch.wav_lengths)
        mask = None
        if cfg.wave_mask_prob > 0:
            mask = torch.zeros(feats.shape[:2], dtype=torch.bool)
            for i in range(feats.shape[0]):
                n = int(lengths[i])
                m = sample_span_mask(n, cfg.wave_mask_prob, cfg.wave_mask_span, [cfg.seed, step, i]).as_bool()
                mask[i, :n] = torch.as_tensor(m)
        logp = model.ctc_logprobs(feats, lengths, mask)
        names = ("transformer", "ctc_head")
    else:
        feats, lengths = model.fbank_frontend(batch.fbank, batch.fbank_lengths)
        logp = model.ctc_logprobs(feats, lengths)
        names = ("fbank_frontend", "transformer", "ctc_head")
    l_ctc = batch_ctc_loss(logp, lengths, batch.targets).mean()
    if not torch.isfinite(l_ctc):
        raise NonFiniteLossError(f"non-finite CTC loss at update {step}: batch={batch.ids}")
    optimizer.zero_grad(set_to_none=True)
    l_ctc.backward()
    _clip_per_group(model, names, cfg.grad_clip)
    optimizer.step()
    return LossBreakdown(l_ctc.item(), 0.0, l_ctc.item(), step, FINETUNE)


@torch.no_grad()
def evaluate(model: EncoderModel, utts: Sequence[Utterance], frontend: str, batch_size: int = 16):
    """Greedy-decode ``utts``; returns ``[(id, ref, hyp)]`` and pooled edit counts."""
    was_training = model.training
    model.eval()
    rows = []
    total = EditCounts()
    for start in range(0, len(utts), batch_size):
        batch = collate(utts[start:start + batch_size])
        if frontend == "wave":
            feats, lengths = model.wave_frontend(batch.wav, batch.wav_lengths)
        else:
            feats, lengths = model.fbank_frontend(batch.fbank, batch.fbank_lengths)
        logp = model.ctc_logprobs(feats, lengths)
        for i, utt_id in enumerate(batch.ids):
            hyp = ids_to_text(greedy_ids(logp[i], int(lengths[i])))
            ref = batch.texts[i]
            rows.append((utt_id, ref, hyp))
            total = total + edit_counts(hyp.split(), ref.split())
    model.train(was_training)
    return rows, total


class MetricsLog:
    """Append-only per-update rows, mirrored to CSV when a path is given."""

    def __init__(self, path: Path | None = None, rows: list[dict] | None = None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = list(rows or [])
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
                writer.writeheader()
                writer.writerows(self.rows)

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError(f"metrics step {row['step']} is not after {self.rows[-1]['step']}")
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=METRIC_FIELDS).writerow(row)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    model: EncoderModel
    metrics: list[dict]
    checkpoint: Path | None = None
    final_dev: tuple[list, EditCounts] | None = None
    extra: dict = field(default_factory=dict)


def _trainable_groups(mode: str) -> tuple[str, ...]:
    if mode == "wave":
        return ("transformer", "ctc_head")
    return ("fbank_frontend", "transformer", "ctc_head")


def _batch_for(utts: Sequence[Utterance], step: int, cfg: RunConfig) -> list[Utterance]:
    per_epoch = max(1, len(utts) // cfg.batch_size)
    epoch, pos = divmod(step - 1, per_epoch)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(utts))
    return [utts[i] for i in order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]


def prepare_model(parent: dict, cfg: RunConfig) -> EncoderModel:
    """Load the pre-trained model and, for Fbank modes, attach a fresh Fbank front-end."""
    model = model_from_checkpoint(parent)
    if cfg.mode != "wave":
        model.attach_fbank_frontend(cfg.fbank_frontend)
    return model


def run_training(
    cfg: RunConfig,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    parent: dict | None = None,
    parent_path: Path | None = None,
    out_dir: Path | None = None,
    resume: dict | None = None,
    stop_after: int | None = None,
) -> RunResult:
    """Shared loop for the adapter and both baselines.

    ``parent`` is the pre-trained checkpoint payload; ``resume`` a checkpoint
    written by an earlier call of this function. ``stop_after`` ends the run
    early (after saving) to simulate an interruption.
    """
    cfg.validate()
    if not train:
        raise ValueError("training manifest is empty")
    if parent is None and resume is None:
        raise ValueError("need a pre-trained checkpoint or a resume checkpoint")
    plan = configure_stride(cfg.stride_ms, wave_stride_ms=20.0, fbank_hop_ms=cfg.fbank.hop_ms)
    per_epoch = max(1, len(train) // cfg.batch_size)
    n_warmup = cfg.n_warmup if cfg.mode == "adapter" else 0
    sched = AdapterSchedule.from_units(n_warmup, cfg.warmup_unit, per_epoch)
    frontend = "wave" if cfg.mode == "wave" else "fbank"

    torch.manual_seed(cfg.seed)
    if resume is not None:
        if resume.get("kind") != "finetune":
            raise CheckpointError("resume checkpoint was not written by a fine-tuning run")
        model = model_from_checkpoint(resume)
        start = int(resume["schedule"]["step"])
        rows = list(resume["metrics"])
        provenance = dict(resume.get("provenance", {}))
    else:
        if parent.get("kind") != "pretrain":
            raise CheckpointError("parent checkpoint is not a pre-training checkpoint")
        model = prepare_model(parent, cfg)
        start = 0
        rows = []
        provenance = {"parent_hash": file_hash(parent_path) if parent_path else None}
    provenance["config_hash"] = config_hash(cfg)

    for p in model.parameters():
        p.requires_grad_(False)
    names = _trainable_groups(cfg.mode)
    params = [p for name in names for p in model.group(name)]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if resume is not None:
        opt.load_state_dict(resume["optimizer"])
        torch.set_rng_state(resume["rng"]["torch"])

    probe = collate(list(train[: cfg.probe_size]))
    probe_teacher = None
    if frontend == "fbank":
        probe_teacher, probe_t_len = teacher_targets(model, probe, plan, cfg.downsample_mode)

    def probe_distance() -> float:
        model.fbank_frontend.eval()
        with torch.no_grad():
            out, length = model.fbank_frontend(probe.fbank, probe.fbank_lengths)
        model.fbank_frontend.train()
        common = align_batch_lengths(probe_t_len, length, cfg.align_tolerance)
        t = int(common.max())
        return frontend_distance(probe_teacher[:, :t], out[:, :t], _valid_mask(common, t))

    metrics = MetricsLog(out_dir / "metrics.csv" if out_dir else None, rows)
    ckpt_path = out_dir / "checkpoint.pt" if out_dir else None

    def save(step: int) -> Path | None:
        if ckpt_path is None:
            return None
        return save_checkpoint(
            ckpt_path, model,
            kind="finetune",
            config=to_dict(cfg),
            optimizer=opt.state_dict(),
            schedule={"n_warmup": sched.n_warmup, "step": step},
            rng={"torch": torch.get_rng_state()},
            metrics=list(metrics.rows),
            provenance=provenance,
        )

    t0 = time.time()
    last = start
    end = cfg.max_updates if stop_after is None else min(cfg.max_updates, stop_after)
    for step in range(start + 1, end + 1):
        batch_utts = _batch_for(train, step, cfg)
        regime = sched.regime(step)
        augment = cfg.use_specaug and frontend == "fbank" and (regime == FINETUNE or cfg.specaug_in_warmup)
        batch = collate(batch_utts, cfg.specaug if augment else None, specaug_seed=cfg.seed * 1_000_003 + step)
        for group in opt.param_groups:
            group["lr"] = tri_stage_lr(step, cfg.max_updates, cfg.lr, cfg.lr_stages, cfg.final_lr_scale)
        if cfg.mode == "adapter":
            if step == sched.n_warmup + 1 and cfg.reset_fbank_optimizer:
                for p in model.group("fbank_frontend"):
                    opt.state.pop(p, None)
            br = adapter_step(model, batch, step, sched, opt, cfg, plan)
        else:
            br = ctc_step(model, batch, step, opt, cfg, frontend)
        dev_wer = ""
        if dev and (step % cfg.eval_interval == 0 or step == cfg.max_updates):
            dev_wer = 100.0 * evaluate(model, dev, frontend)[1].wer
        metrics.append({
            "step": step,
            "regime": br.regime,
            "l_ctc": br.l_ctc,
            "l_l2": br.l_l2,
            "frontend_l2": probe_distance() if frontend == "fbank" else "",
            "dev_wer": dev_wer,
            "wall_s": round(time.time() - t0, 3),
        })
        if cfg.save_interval and step % cfg.save_interval == 0:
            save(step)
        last = step
    path = save(last)
    return RunResult(model, metrics.rows, path)


def run_adaptation(cfg: RunConfig, train, dev, parent: dict, **kw) -> RunResult:
    if cfg.mode != "adapter":
        raise ValueError("run_adaptation needs mode='adapter'")
    return run_training(cfg, train, dev, parent, **kw)


def baseline_finetune(cfg: RunConfig, train, dev, parent: dict, frontend: str, **kw) -> RunResult:
    modes = {"wave": "wave", "fbank_noadapter": "fbank_noadapter"}
    if frontend not in modes:
        raise ValueError(f"frontend must be 'wave' or 'fbank_noadapter', got {frontend!r}")
    if cfg.mode != modes[frontend]:
        raise ValueError(f"config mode {cfg.mode!r} does not match frontend {frontend!r}")
    return run_training(cfg, train, dev, parent, **kw)
