import json
import os
import signal
import subprocess
import sys
import time
import wave

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from feadapter.checkpoint import CheckpointError, check_compatible, load_checkpoint, model_from_checkpoint, save_checkpoint
from feadapter.cli import main
from feadapter.config import ConfigError, RunConfig, STRIDE_TO_FACTOR, config_hash, from_dict, load_config, parse_overrides, to_dict
from feadapter.data import AudioFormatError, ManifestError, load_manifest, normalize_transcript, read_audio, write_audio
from feadapter.encoder import EncoderConfig, EncoderModel
from feadapter.frontends import FbankFrontEndConfig

from conftest import TINY_D, tiny_encoder, tiny_pretrain_config, tiny_run_config, tiny_wave


def write_wav(path, frames: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


def manifest_file(tmp_path, lines):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def entry(utt_id, text="a b", audio="x.wav"):
    return json.dumps({"utt_id": utt_id, "audio": audio, "duration_s": 0.1, "text": text})


@pytest.fixture
def wav_dir(tmp_path):
    write_audio(tmp_path / "x.wav", np.zeros(1600))
    return tmp_path


def test_manifest_three_records(wav_dir):
    m = load_manifest(manifest_file(wav_dir, [entry("a"), entry("b"), entry("c")]))
    assert len(m) == 3
    assert [r.utt_id for r in m] == ["a", "b", "c"]
    assert m.records[0].audio_path == wav_dir / "x.wav"


def test_manifest_duplicate_id_is_named(wav_dir):
    with pytest.raises(ManifestError, match="'b'"):
        load_manifest(manifest_file(wav_dir, [entry("a"), entry("b"), entry("b")]))


def test_manifest_normalization_counts_stripped(wav_dir, caplog):
    caplog.set_level("INFO")
    m = load_manifest(manifest_file(wav_dir, [entry("a", "Hello, World")]))
    assert m.records[0].transcript == "hello world"
    assert m.stripped_chars == 1
    assert "stripped 1" in caplog.text


def test_manifest_malformed_line_number(wav_dir):
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(manifest_file(wav_dir, [entry("a"), "{not json"]))
    with pytest.raises(ManifestError, match=":1:"):
        load_manifest(manifest_file(wav_dir, [json.dumps({"utt_id": "a"})]))


def test_manifest_missing_audio(wav_dir):
    with pytest.raises(ManifestError, match="not readable"):
        load_manifest(manifest_file(wav_dir, [entry("a", audio="missing.wav")]))


@settings(max_examples=100, deadline=None)
@given(text=st.text(alphabet=st.sampled_from(list("abcXYZ' ,.!\t\n-é")), max_size=30))
def test_normalization_is_idempotent(text):
    once, _ = normalize_transcript(text)
    twice, stripped = normalize_transcript(once)
    assert twice == once and stripped == 0


def test_read_audio_scaling(tmp_path):
    path = tmp_path / "s.wav"
    write_wav(path, np.array([0, 16384, -32768], dtype="<i2").tobytes())
    clip = read_audio(path)
    np.testing.assert_array_equal(clip.samples, [0.0, 0.5, -1.0])
    assert clip.sample_rate_hz == 16000


@pytest.mark.parametrize(
    "kwargs, match",
    [({"channels": 2}, "mono"), ({"rate": 8000}, "16000"), ({"width": 1}, "16-bit")],
)
def test_read_audio_rejects_other_formats(tmp_path, kwargs, match):
    path = tmp_path / "bad.wav"
    write_wav(path, b"\x00\x00" * 8, **kwargs)
    with pytest.raises(AudioFormatError, match=match):
        read_audio(path)


def test_read_audio_rejects_non_wav(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a riff file at all")
    with pytest.raises(AudioFormatError):
        read_audio(path)


def small_model(seed=0, d=TINY_D):
    torch.manual_seed(seed)
    model = EncoderModel(tiny_wave(d), tiny_encoder(d), FbankFrontEndConfig(n_mels=20, hidden_dim=4, output_dim=d), n_clusters=8)
    return model.eval()


def probe_logits(model):
    gen = torch.Generator().manual_seed(7)
    wav = torch.randn(2, 3200, generator=gen) * 0.1
    fb = torch.randn(2, 40, 20, generator=gen)
    with torch.no_grad():
        a = model.ctc_logprobs(*model.wave_frontend(wav))
        b = model.ctc_logprobs(*model.fbank_frontend(fb))
    return a, b


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = small_model()
    path = save_checkpoint(tmp_path / "c.pt", model, kind="pretrain", provenance={"config_hash": "x"})
    payload = load_checkpoint(path)
    back = model_from_checkpoint(payload).eval()
    for x, y in zip(probe_logits(model), probe_logits(back)):
        assert torch.equal(x, y)
    assert payload["provenance"]["argv"]


def test_checkpoint_d_model_mismatch_names_field(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", small_model())
    with pytest.raises(CheckpointError, match="encoder.d_model"):
        check_compatible(load_checkpoint(path), tiny_wave(), EncoderConfig(n_layers=1, d_model=32, n_heads=2, d_ff=32, max_frames=500))


def test_checkpoint_truncated_and_wrong_version(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", small_model())
    raw = path.read_bytes()
    (tmp_path / "t.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.pt")
    payload = torch.load(path, weights_only=False)
    payload["version"] = 99
    torch.save(payload, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pt")


def test_failed_write_keeps_previous_checkpoint(tmp_path, monkeypatch):
    path = save_checkpoint(tmp_path / "c.pt", small_model(0), kind="first")
    before = path.read_bytes()

    def boom(fd):
        raise OSError("disk went away")

    monkeypatch.setattr(os, "fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, small_model(1), kind="second")
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["c.pt"]


KILL_SCRIPT = """
import sys, torch
from feadapter.checkpoint import save_checkpoint
from feadapter.encoder import EncoderConfig, EncoderModel
from feadapter.frontends import WaveFrontEndConfig
model = EncoderModel(WaveFrontEndConfig(conv_layers=[(256, 10, 5)] + [(256, 3, 2)] * 4 + [(256, 2, 2)] * 2, output_dim=64),
                     EncoderConfig(n_layers=2, d_model=64, n_heads=2, d_ff=256))
print("ready", flush=True)
i = 0
while True:
    i += 1
    save_checkpoint(sys.argv[1], model, kind="loop", counter=i)
"""


def test_kill_during_write_leaves_a_loadable_checkpoint(tmp_path):
    path = tmp_path / "c.pt"
    save_checkpoint(path, small_model(), kind="initial")
    proc = subprocess.Popen([sys.executable, "-c", KILL_SCRIPT, str(path)], stdout=subprocess.PIPE)
    assert proc.stdout.readline().strip() == b"ready"
    time.sleep(1.5)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    payload = load_checkpoint(path)
    assert payload["kind"] in ("initial", "loop")


@settings(max_examples=40, deadline=None)
@given(stride=st.sampled_from([10, 20, 30, 40, 60]), factor=st.sampled_from([2, 4]))
def test_config_rejects_inconsistent_stride_pairs(stride, factor):
    overrides = {"stride_ms": stride, "fbank_frontend": {"subsample_factor": factor}}
    if STRIDE_TO_FACTOR.get(stride) == factor:
        assert load_config(RunConfig, None, overrides).stride_ms == stride
    else:
        with pytest.raises(ConfigError):
            load_config(RunConfig, None, overrides)


def test_config_round_trip_and_unknown_keys():
    cfg = tiny_run_config()
    again = from_dict(RunConfig, to_dict(cfg))
    assert again == cfg and config_hash(again) == config_hash(cfg)
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"not_a_field": 1})
    assert parse_overrides(["a.b=3", "m=wave"]) == {"a": {"b": 3}, "m": "wave"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def tiny_config_files(tmp_path):
    pre = to_dict(tiny_pretrain_config(max_updates=6))
    run = to_dict(tiny_run_config(n_warmup=0, max_updates=4, eval_interval=2))
    (tmp_path / "pre.json").write_text(json.dumps(pre))
    (tmp_path / "run.json").write_text(json.dumps(run))
    return tmp_path / "pre.json", tmp_path / "run.json"


def test_cli_end_to_end(tmp_path, capsys):
    pre_cfg, run_cfg = tiny_config_files(tmp_path)
    corpus = tmp_path / "corpus"
    assert main(["make-toy-corpus", str(corpus), "--n-words", "6", "--split", "unlabeled=10",
                 "--split", "train=8", "--split", "dev=3", "--split", "test=3"]) == 0
    assert main(["prepare-labels", "--manifest", str(corpus / "unlabeled.jsonl"), "--out-dir", str(tmp_path / "labels"),
                 "--config", str(pre_cfg)]) == 0
    assert (tmp_path / "labels" / "resolved_config.json").is_file()
    assert main(["pretrain", "--manifest", str(corpus / "unlabeled.jsonl"), "--labels", str(tmp_path / "labels" / "labels.txt"),
                 "--kmeans", str(tmp_path / "labels" / "kmeans.npz"), "--out-dir", str(tmp_path / "pre"),
                 "--config", str(pre_cfg), "--heldout", "2"]) == 0
    parent = tmp_path / "pre" / "checkpoint.pt"
    assert load_checkpoint(parent)["kind"] == "pretrain"
    common = ["--train", str(corpus / "train.jsonl"), "--dev", str(corpus / "dev.jsonl"), "--parent", str(parent), "--config", str(run_cfg)]
    assert main(["adapt", *common, "--out-dir", str(tmp_path / "adapt"), "--n-warmup", "0"]) == 0
    regimes = {row.split(",")[1] for row in (tmp_path / "adapt" / "metrics.csv").read_text().splitlines()[1:]}
    assert regimes == {"finetune"}
    assert main(["finetune", *common, "--out-dir", str(tmp_path / "wave"), "--frontend", "wave"]) == 0
    assert json.loads((tmp_path / "wave" / "resolved_config.json").read_text())["mode"] == "wave"
    capsys.readouterr()
    assert main(["eval", "--manifest", str(corpus / "test.jsonl"), "--checkpoint", str(tmp_path / "adapt" / "checkpoint.pt"),
                 "--out", str(tmp_path / "eval" / "report.txt")]) == 0
    assert capsys.readouterr().out.startswith("WER ")
    assert (tmp_path / "eval" / "resolved_config.json").is_file()
    svg = tmp_path / "plot" / "fig.svg"
    assert main(["plot", str(tmp_path / "adapt" / "metrics.csv"), str(tmp_path / "wave" / "metrics.csv"),
                 "--labels", "adapter-run,wave-run", "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.count("adapter-run") >= 1 and text.count("wave-run") >= 1


def test_cli_eval_identity_hypotheses(tmp_path, capsys):
    lines = [entry("u1", "the cat sat"), entry("u2", "a dog")]
    m = manifest_file(tmp_path, lines)
    hyp = tmp_path / "hyp.txt"
    hyp.write_text("u1\tthe cat sat\nu2\ta dog\n")
    assert main(["eval", "--manifest", str(m), "--hyp", str(hyp)]) == 0
    assert capsys.readouterr().out.strip() == "WER 0.00 S=0 D=0 I=0 N=5"


def test_cli_plot_two_series(tmp_path):
    for name, rows in (("a", [(1, 10.0, ""), (2, 5.0, 80.0)]), ("b", [(1, 9.0, ""), (2, 8.0, 90.0)])):
        lines = ["step,regime,l_ctc,l_l2,frontend_l2,dev_wer,wall_s"]
        lines += [f"{s},warmup,1.0,1.0,{d},{w},0.1" for s, d, w in rows]
        (tmp_path / f"{name}.csv").write_text("\n".join(lines) + "\n")
    out = tmp_path / "fig.svg"
    assert main(["plot", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--labels", "series-one,series-two", "--out", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("<?xml") and "<svg" in text
    assert "series-one" in text and "series-two" in text


def test_cli_errors_exit_nonzero_with_usage(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["adapt", "--bogus-flag"])
    assert info.value.code != 0
    assert "usage:" in capsys.readouterr().err
    code = main(["adapt", "--train", str(tmp_path / "none.jsonl"), "--out-dir", str(tmp_path / "o"),
                 "--set", "stride_ms=40", "--set", "fbank_frontend.subsample_factor=2"])
    err = capsys.readouterr().err
    assert code == 2 and "usage:" in err and "subsample_factor" in err
    assert main(["eval", "--manifest", str(tmp_path / "missing.jsonl"), "--hyp", "x"]) == 2
