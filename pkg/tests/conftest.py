import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from feadapter.config import PretrainConfig, RunConfig  # noqa: E402
from feadapter.data import load_manifest, load_utterances  # noqa: E402
from feadapter.encoder import EncoderConfig  # noqa: E402
from feadapter.features import FbankConfig, SpecAugPolicy  # noqa: E402
from feadapter.frontends import FbankFrontEndConfig, WaveFrontEndConfig  # noqa: E402
from feadapter.pretrain import make_pseudo_labels, run_pretrain  # noqa: E402
from feadapter.toy import make_corpus  # noqa: E402

TINY_D = 16


def tiny_wave(d=TINY_D, ch=8):
    return WaveFrontEndConfig(conv_layers=[(ch, 10, 5)] + [(ch, 3, 2)] * 4 + [(ch, 2, 2)] * 2, output_dim=d)


def tiny_encoder(d=TINY_D):
    return EncoderConfig(n_layers=1, d_model=d, n_heads=2, d_ff=2 * d, dropout=0.1, max_frames=500)


def tiny_pretrain_config(**kw):
    base = dict(
        fbank=FbankConfig(n_mels=20), wave=tiny_wave(), encoder=tiny_encoder(), n_clusters=8,
        kmeans_iter=10, mask_prob=0.4, mask_span=2, lr=2e-3, batch_size=4, max_updates=20, seed=0,
    )
    base.update(kw)
    return PretrainConfig(**base)


def tiny_run_config(**kw):
    stride = kw.get("stride_ms", 20)
    base = dict(
        fbank=FbankConfig(n_mels=20),
        fbank_frontend=FbankFrontEndConfig(n_mels=20, subsample_factor=stride // 10, hidden_dim=4, output_dim=TINY_D),
        specaug=SpecAugPolicy(1, 4, 1, 3),
        n_warmup=3, batch_size=4, max_updates=6, eval_interval=3, probe_size=4, lr=1e-3, seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    paths = make_corpus(root, {"unlabeled": 16, "train": 12, "dev": 4}, seed=5, n_words=6)
    return root, paths


@pytest.fixture(scope="session")
def tiny_utts(tiny_corpus):
    _, paths = tiny_corpus
    fb = FbankConfig(n_mels=20)
    return {split: load_utterances(load_manifest(p), fb) for split, p in paths.items()}


def make_labels(utts, cfg):
    return make_pseudo_labels(utts, cfg)


@pytest.fixture(scope="session")
def tiny_parent(tiny_utts, tmp_path_factory):
    """A few-update pre-training checkpoint on the tiny corpus."""
    from feadapter.checkpoint import load_checkpoint

    cfg = tiny_pretrain_config()
    utts = tiny_utts["unlabeled"]
    km, labels = make_labels(utts, cfg)
    path = tmp_path_factory.mktemp("parent") / "pretrain.pt"
    torch.manual_seed(0)
    run_pretrain(cfg, utts, labels, km, out_path=path)
    return path, load_checkpoint(path)


ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> bool:
    """Register one acceptance check; the terminal summary prints them grouped by criterion."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        tr.write_line(f"criterion {criterion}: {verdict}")
        for part, ok, detail in parts:
            tr.write_line(f"    {'PASS' if ok else 'FAIL'}  {part}: {detail}")
