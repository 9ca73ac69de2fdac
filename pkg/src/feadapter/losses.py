"""Training objectives and evaluation metrics.

CTC is computed with an explicit log-space forward recursion (batched over
utterances, looped over time) so its exact semantics - including the
infeasible-target error - are under our control.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .encoder import BLANK_ID, ids_to_text, text_to_ids
from .features import FeatureMatrix

# Finite stand-in for log(0): exp() of it underflows to exactly 0 while sums
# and logsumexp over it stay NaN-free in both directions.
NEG = -1e30


class InfeasibleTargetError(ValueError):
    """The target needs more frames than the utterance provides."""


@dataclass
class Transcript:
    text: str
    token_ids: list[int]

    @classmethod
    def from_text(cls, text: str) -> "Transcript":
        return cls(text, text_to_ids(text))

    @classmethod
    def from_ids(cls, ids: Sequence[int]) -> "Transcript":
        ids = [int(i) for i in ids]
        if BLANK_ID in ids:
            raise ValueError("transcript token ids must not contain the blank")
        return cls(ids_to_text(ids), ids)

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass
class LossBreakdown:
    l_ctc: float
    l_l2: float
    l_total: float
    step_n: int
    regime: str  # "warmup" | "finetune"


def _tensor(x) -> torch.Tensor:
    """Unwrap a FeatureMatrix (``Tensor.data`` would silently detach, so test the type)."""
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, FeatureMatrix):
        return torch.as_tensor(x.data)
    return torch.as_tensor(x)


def min_frames_for(target: Sequence[int]) -> int:
    """Frames CTC needs: one per label plus a blank between each adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def batch_ctc_loss(
    logp: torch.Tensor,
    lengths: torch.Tensor,
    targets: Sequence[Sequence[int]],
    blank: int = BLANK_ID,
) -> torch.Tensor:
    """Per-utterance ``-log P(target | logp)``.

    Args:
        logp: ``(B, T, V)`` per-frame log-probabilities.
        lengths: valid frames per utterance.
        targets: label id sequences without blanks.

    Returns:
        ``(B,)`` tensor of losses.
    """
    b, t_max, _ = logp.shape
    lengths = lengths.to(torch.long)
    for i, tgt in enumerate(targets):
        need = min_frames_for(tgt)
        if need > int(lengths[i]):
            raise InfeasibleTargetError(
                f"utterance {i}: target of {len(tgt)} labels needs >= {need} frames, got {int(lengths[i])}"
            )
    l_max = max((len(tgt) for tgt in targets), default=0)
    s_max = 2 * l_max + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    for i, tgt in enumerate(targets):
        if len(tgt):
            ext[i, 1:2 * len(tgt):2] = torch.as_tensor(list(tgt), dtype=torch.long)
    skip = torch.zeros(b, s_max, dtype=torch.bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = logp.gather(2, ext[:, None, :].expand(b, t_max, s_max))
    neg = torch.full((b, s_max), NEG, dtype=logp.dtype)
    first = torch.zeros(b, s_max, dtype=torch.bool)
    first[:, 0] = True
    if s_max > 1:
        first[:, 1] = True
    alpha = torch.where(first, emit[:, 0], neg)
    neg1 = neg[:, :1]
    neg2 = neg[:, :2]
    for t in range(1, t_max):
        stay = alpha
        step = torch.cat([neg1, alpha[:, :-1]], dim=1)
        jump = torch.where(skip, torch.cat([neg2, alpha[:, :-2]], dim=1), neg)
        new = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        active = (t < lengths)[:, None]
        alpha = torch.where(active, new, alpha)

    losses = []
    for i, tgt in enumerate(targets):
        last = 2 * len(tgt)
        if last == 0:
            losses.append(-alpha[i, 0])
        else:
            losses.append(-torch.logsumexp(alpha[i, last - 1:last + 1], dim=0))
    return torch.stack(losses)


def ctc_loss(logp, target) -> torch.Tensor:
    """Single-utterance CTC loss; ``logp`` is ``T x V`` (tensor or FeatureMatrix)."""
    data = _tensor(logp)
    ids = target.token_ids if isinstance(target, Transcript) else list(target)
    return batch_ctc_loss(data[None], torch.tensor([data.shape[0]]), [ids])[0]


def greedy_ids(logp: torch.Tensor, length: int | None = None) -> list[int]:
    best = logp[:length].argmax(-1).tolist() if length is not None else logp.argmax(-1).tolist()
    out: list[int] = []
    prev = None
    for k in best:
        if k != prev and k != BLANK_ID:
            out.append(k)
        prev = k
    return out


def ctc_greedy_decode(logp) -> Transcript:
    return Transcript.from_ids(greedy_ids(_tensor(logp)))



def l2_frontend_loss(teacher: torch.Tensor, student: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared difference over frames and dims; ``teacher`` is a constant.

    ``valid`` is an optional ``(B, T)`` bool mask for padded batches; the mean
    then runs over valid frames times the feature dimension.
    """
    teacher, student = _tensor(teacher), _tensor(student)
    if teacher.shape != student.shape:
        raise ValueError(f"shape mismatch: teacher {tuple(teacher.shape)} vs student {tuple(student.shape)}")
    diff2 = (student - teacher.detach()) ** 2
    if valid is None:
        return diff2.mean()
    weights = valid.to(diff2.dtype)[..., None]
    return (diff2 * weights).sum() / (weights.sum() * diff2.shape[-1])


def frontend_distance(teacher: torch.Tensor, student: torch.Tensor, valid: torch.Tensor | None = None) -> float:
    """Mean per-frame Euclidean distance between two front-end outputs (no grad)."""
    with torch.no_grad():
        dist = (student - teacher).norm(dim=-1)
        if valid is None:
            return float(dist.mean())
        return float(dist[valid].mean())


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean CE over masked frames; an empty mask gives 0 with zero gradient."""
    logits = _tensor(logits)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape[:-1])}")
    if hasattr(mask, "as_bool"):
        mask = torch.as_tensor(mask.as_bool())
    if not bool(mask.any()):
        return logits.sum() * 0.0
    logp = torch.log_softmax(logits[mask], dim=-1)
    return -logp.gather(-1, labels[mask].long()[:, None]).mean()


@dataclass
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            raise ValueError("WER is undefined for an empty reference")
        return self.errors / self.ref_words


def edit_counts(hyp: Sequence[str], ref: Sequence[str]) -> EditCounts:
    """Word-level Levenshtein alignment with S/D/I breakdown (minimum total edits)."""
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, subs, dels, ins) aligning ref[:i] with hyp[:j]
    cost = [[(0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, 0, i, 0)
    for j in range(1, m + 1):
        cost[0][j] = (j, 0, 0, j)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, s, d, k = cost[i - 1][j - 1]
            best = (e, s, d, k) if ref[i - 1] == hyp[j - 1] else (e + 1, s + 1, d, k)
            e, s, d, k = cost[i - 1][j]
            best = min(best, (e + 1, s, d + 1, k))
            e, s, d, k = cost[i][j - 1]
            best = min(best, (e + 1, s, d, k + 1))
            cost[i][j] = best
    _, s, d, k = cost[n][m]
    return EditCounts(s, d, k, n)


def _words(x) -> list[str]:
    if isinstance(x, Transcript):
        return x.words
    if isinstance(x, str):
        return x.split()
    return list(x)


def wer(hyp, ref) -> float:
    ref_words = _words(ref)
    if not ref_words:
        raise ValueError("WER needs a non-empty reference")
    return edit_counts(_words(hyp), ref_words).wer


def format_wer_report(rows: Sequence[tuple[str, str, str]]) -> tuple[str, EditCounts]:
    """Per-utterance ``id<TAB>ref<TAB>hyp`` lines plus the summary line."""
    total = EditCounts()
    lines = []
    for utt_id, ref, hyp in rows:
        total = total + edit_counts(hyp.split(), ref.split())
        lines.append(f"{utt_id}\t{ref}\t{hyp}")
    lines.append(
        f"WER {100.0 * total.wer:.2f} S={total.substitutions} D={total.deletions} "
        f"I={total.insertions} N={total.ref_words}"
    )
    return "\n".join(lines) + "\n", total

